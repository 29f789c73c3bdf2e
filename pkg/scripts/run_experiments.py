"""Run the desk-scale experiments behind the acceptance tests.

    python3 scripts/run_experiments.py [ablate] [compare] [gentest] [vae]

With no arguments every step runs, in that order.  Training runs land in
``$PUSHGRASP_OUT/runs`` (default ``results/``) and are reused by later steps and
by ``tests/test_acceptance.py``, which reads the same ``experiments/desk.cfg``.
"""

from __future__ import annotations

import json
import logging
import os
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
os.environ.setdefault("PUSHGRASP_OUT", str(ROOT / "results"))

from pushgrasp.harness import commands  # noqa: E402
from pushgrasp.harness.config import load  # noqa: E402

STEPS = ("ablate", "compare", "gentest", "vae")


def desk_config():
    return load(ROOT / "experiments" / "desk.cfg")


def ablate(cfg):
    r = commands.cmd_ablate(cfg.replace(run__output="ablation"))
    return {"median_beveled_success": r.medians, "ordering_holds": r.ordering_holds}


def compare(cfg):
    r = commands.cmd_compare_nets(cfg.replace(run__output="compare"))
    return {"median_steps_to_threshold": r.median_steps, "ratio": r.ratio, "ratio_is_lower_bound": r.lower_bound}


def gentest(cfg):
    out = {}
    for seed in cfg["run"]["seeds"]:
        run = commands.cmd_train(cfg, seed)
        for set_name in ("beveled", "irregular"):
            r = commands.cmd_gentest(cfg.replace(
                run__output=f"gentest-{set_name}-seed{seed}", run__seed=seed, gentest__set=set_name,
                gentest__checkpoint=str(run.checkpoint)))
            out[f"{set_name}/seed{seed}"] = 100.0 * r.result.success_rate
    return out


def vae(cfg):
    r = commands.cmd_pretrain_vae(cfg.replace(run__output="vae-desk", vae__generate=2000, vae__epochs=50))
    return {"loss_ratio": r.losses[-1] / r.losses[0], "held_out_mse": r.held_out_mse, "seconds": r.seconds}


def main(argv: list[str]) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    wanted = argv or list(STEPS)
    unknown = set(wanted) - set(STEPS)
    if unknown:
        print(f"unknown step(s) {sorted(unknown)}; choose from {STEPS}", file=sys.stderr)
        return 2
    cfg = desk_config()
    summary_path = Path(os.environ["PUSHGRASP_OUT"]) / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    for step in wanted:
        t0 = time.perf_counter()
        summary[step] = {**globals()[step](cfg), "wall_seconds": round(time.perf_counter() - t0, 1)}
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(step, json.dumps(summary[step], sort_keys=True), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
