"""``pushgrasp`` command line.

Every command takes ``--config FILE`` and any number of ``--set section.key=value``
overrides; the per-command flags are shorthands for common keys.  Outputs go
under ``$PUSHGRASP_OUT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import commands
from .config import ConfigError, ExperimentConfig, load

# flag dest -> config key
SHORTHANDS = {
    "seed": "run.seed", "seeds": "run.seeds", "envs": "run.n_envs", "steps": "run.total_steps",
    "eval_every": "run.eval_every", "workers": "run.workers", "mode": "run.mode",
    "encoder": "run.encoder", "output": "run.output", "checkpoint_every": "run.checkpoint_every",
    "shapes": "run.shape_set", "eval_episodes": "run.eval_episodes",
    "topology": "policy.topology", "trunk": "policy.trunk", "reward": "policy.reward_mode",
    "generate": "vae.generate", "corpus": "vae.corpus", "epochs": "vae.epochs", "image": "vae.image_size",
    "latent": "vae.latent_dim", "lr": "vae.learning_rate", "channels": "vae.channels",
    "test_set": "gentest.set", "episodes": "gentest.episodes", "checkpoint": "gentest.checkpoint",
    "threshold": "compare.threshold",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pushgrasp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def command(name, help_text, *flags):
        c = sub.add_parser(name, help=help_text)
        c.add_argument("--config", help="experiment config file")
        c.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        c.add_argument("-v", "--verbose", action="store_true")
        for flag in flags:
            c.add_argument(f"--{flag.replace('_', '-')}", dest=flag, metavar=flag.upper())
        return c

    command("pretrain-vae", "train the observation encoder",
            "generate", "corpus", "epochs", "image", "latent", "lr", "channels", "output")
    train = command("train", "train one policy", "mode", "envs", "steps", "seed", "topology", "trunk",
                    "reward", "encoder", "workers", "eval_every", "checkpoint_every", "shapes")
    train.add_argument("--resume", help="trainer checkpoint to continue from")
    command("ablate", "reward x actor-critic ablation matrix", "seeds", "steps", "envs", "episodes",
            "workers", "output")
    command("gentest", "per-shape success on a test set", "checkpoint", "test_set", "episodes", "seed", "output")
    compare = command("compare-nets", "one network vs two networks", "seeds", "steps", "envs",
                      "threshold", "workers", "output")
    compare.add_argument("--same-topology", action="store_true", help="sanity run: one network in both arms")
    command("eval", "evaluate a checkpoint (or 'scripted')", "checkpoint", "shapes", "eval_episodes", "seed")
    return p


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    for dest, key in SHORTHANDS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg.set(key, value, source=f"--{dest.replace('_', '-')}")
    if getattr(args, "same_topology", False):
        cfg.set("compare.same_topology", "true")
    for item in args.overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"override {item!r} must look like section.key=value", source="--set")
        cfg.set(key.strip(), value, source="--set")
    return cfg


def _report(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args)
        if args.command == "pretrain-vae":
            r = commands.cmd_pretrain_vae(cfg)
            _report({"checkpoint": r.checkpoint, "first_loss": r.losses[0], "final_loss": r.losses[-1],
                     "held_out_mse": r.held_out_mse, "seconds": round(r.seconds, 1)})
        elif args.command == "train":
            r = commands.cmd_train(cfg, resume=args.resume)
            _report({"directory": r.directory, "final": r.rows[-1] if r.rows else None, "reused": r.reused})
        elif args.command == "ablate":
            r = commands.cmd_ablate(cfg)
            _report({"median_beveled_success": r.medians, "ordering_holds": r.ordering_holds,
                     "directory": r.directory})
        elif args.command == "gentest":
            r = commands.cmd_gentest(cfg)
            print(r.table.read_text(), end="")
        elif args.command == "compare-nets":
            r = commands.cmd_compare_nets(cfg)
            _report({"median_steps_to_threshold": r.median_steps, "ratio": r.ratio,
                     "ratio_is_lower_bound": r.lower_bound, "directory": r.directory})
        elif args.command == "eval":
            r = commands.cmd_eval(cfg)
            _report({"success_rate": r.success_rate, "mean_return": r.mean_return, "zone_rate": r.zone_rate,
                     "fall_rate": r.fall_rate, "episodes": r.episodes})
    except (ConfigError, FileNotFoundError) as exc:
        print(f"pushgrasp: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
