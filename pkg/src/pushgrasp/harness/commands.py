"""The experiment commands behind the CLI.

Training runs live under ``<root>/runs/<label>-seed<k>-<digest>``, where the
digest covers every setting that can change the run (worker count excluded,
since it cannot).  A command that needs a run already present reuses it, and a
run stopped part way resumes from its last checkpoint.  Aggregate outputs of a
command go to ``<root>/<run.output>``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import encoder as E
from ..ppo import EvalResult, Policy, Trainer, evaluate_policy, scripted_actor
from ..shapes import shape_set
from . import checkpoint, csvio, plots, tables
from .config import ConfigError, ExperimentConfig, dumps

log = logging.getLogger("pushgrasp")

OUTPUT_ENV = "PUSHGRASP_OUT"
TRAINER_KIND = "trainer"
VAE_KIND = "vae"


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def output_dir(cfg: ExperimentConfig) -> Path:
    d = output_root() / cfg["run"]["output"]
    d.mkdir(parents=True, exist_ok=True)
    return d


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# encoder


def split_corpus(corpus: np.ndarray, held_out_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n_held = int(round(len(corpus) * held_out_fraction))
    cut = len(corpus) - n_held
    return corpus[:cut], corpus[cut:]


def save_vae(path: Path, vae: E.Vae, extra: dict | None = None) -> bytes:
    meta = {"vae_config": vae.config.to_dict(), **(extra or {})}
    return checkpoint.save(path, VAE_KIND, meta, vae.arrays())


def load_vae(path: str | Path) -> E.Vae:
    _, meta, arrays = checkpoint.load(path, VAE_KIND)
    return E.Vae(E.VaeConfig.from_dict(meta["vae_config"]), arrays)


@dataclass
class VaeRun:
    checkpoint: Path
    losses: list[float]
    held_out_mse: float
    seconds: float


def cmd_pretrain_vae(cfg: ExperimentConfig) -> VaeRun:
    v = cfg["vae"]
    vcfg = cfg.vae_config()
    if v["corpus"]:
        corpus = E.load_corpus(v["corpus"])
    elif v["generate"] > 0:
        corpus = E.generate_corpus(v["generate"], seed=vcfg.seed, image_size=vcfg.image_size,
                                   channels=vcfg.channels)
    else:
        raise ConfigError("no corpus: set vae.corpus to a directory or pass --generate N")
    train, held = split_corpus(corpus, v["held_out_fraction"])
    out = output_dir(cfg)
    losses_csv = csvio.Appender(out / "vae_loss.csv", "vae_loss")
    t0 = time.perf_counter()

    def on_epoch(epoch, loss):
        losses_csv([{"epoch": epoch + 1, "loss": loss}])
        log.info("vae epoch %d loss %.4f", epoch + 1, loss)

    res = E.train_vae(train, v["epochs"], config=vcfg, on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    mse = E.reconstruction_mse(res.vae, held) if len(held) else float("nan")
    path = out / "encoder.ckpt"
    save_vae(path, res.vae, {"losses": res.losses, "held_out_mse": mse, "corpus_size": len(corpus),
                             "experiment": cfg.to_dict()})
    plots.loss_curve_svg(out / "vae_loss.csv", out / "vae_loss.svg")
    return VaeRun(path, res.losses, mse, seconds)


# ---------------------------------------------------------------------------
# training


def run_label(cfg: ExperimentConfig) -> str:
    p = cfg["policy"]
    label = tables.cell_id(p["reward_mode"], p["trunk"])
    return label if p["topology"] == "onenet" else f"{label}-twonet"


def run_digest(cfg: ExperimentConfig, seed: int) -> str:
    run = {k: v for k, v in cfg.to_dict()["run"].items()
           if k in ("n_envs", "total_steps", "eval_every", "eval_episodes", "mode", "shape_set",
                    "shape_seed", "encoder")}
    d = cfg.to_dict()
    blob = _json({"run": run, "seed": seed, "policy": d["policy"], "env": d["env"]})
    return hashlib.sha256(blob.encode()).hexdigest()[:10]


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return output_root() / "runs" / f"{run_label(cfg)}-seed{seed}-{run_digest(cfg, seed)}"


def _encoder_for(cfg: ExperimentConfig):
    run = cfg["run"]
    if run["mode"] == "oracle":
        return None
    if not run["encoder"]:
        raise ConfigError("latent observations need run.encoder (an encoder checkpoint)")
    vae = load_vae(run["encoder"])
    if vae.config.latent_dim != cfg["vae"]["latent_dim"]:
        raise ConfigError(f"encoder latent size {vae.config.latent_dim} does not match "
                          f"vae.latent_dim = {cfg['vae']['latent_dim']}")
    return vae


def make_trainer(cfg: ExperimentConfig, seed: int) -> Trainer:
    settings = cfg.train_settings(seed=seed, cell=run_label(cfg))
    shapes = shape_set(cfg["run"]["shape_set"], cfg["run"]["shape_seed"])
    return Trainer(shapes, cfg.policy_config(), settings, cfg.env_config(), _encoder_for(cfg))


def save_trainer(path: Path, trainer: Trainer, cfg: ExperimentConfig) -> bytes:
    meta, arrays = trainer.state_dict()
    meta = {**meta, "experiment": cfg.to_dict(), "env_steps": trainer.steps}
    return checkpoint.save(path, TRAINER_KIND, meta, arrays)


def restore_trainer(trainer: Trainer, path: str | Path) -> dict:
    _, meta, arrays = checkpoint.load(path, TRAINER_KIND)
    if meta["policy_config"] != trainer.policy.config.to_dict():
        raise ConfigError(f"{path}: checkpoint policy settings differ from the config")
    trainer.load_state_dict(meta, arrays)
    return meta


@dataclass
class TrainRun:
    directory: Path
    rows: list[dict]
    trainer: Trainer | None = None
    reused: bool = False

    @property
    def metrics_csv(self) -> Path:
        return self.directory / "metrics.csv"

    @property
    def checkpoint(self) -> Path:
        return self.directory / "policy.ckpt"


def cmd_train(cfg: ExperimentConfig, seed: int | None = None, resume: str | Path | None = None,
              directory: Path | None = None, reuse: bool = True) -> TrainRun:
    """Train one policy; reuses a finished run with the same settings, resumes a partial one."""
    seed = cfg["run"]["seed"] if seed is None else seed
    d = directory or run_dir(cfg, seed)
    d.mkdir(parents=True, exist_ok=True)
    final = d / "policy.ckpt"
    total = cfg["run"]["total_steps"]
    if reuse and resume is None and final.exists() and (d / "metrics.csv").exists():
        _, meta, _ = checkpoint.load(final, TRAINER_KIND)
        if meta["env_steps"] >= total:
            log.info("reusing finished run %s", d)
            return TrainRun(d, csvio.read_numeric(d / "metrics.csv", "metrics"), reused=True)
        resume = final
    (d / "config.txt").write_text(dumps(cfg))
    trainer = make_trainer(cfg, seed)
    if resume is not None:
        restore_trainer(trainer, resume)
        log.info("resumed %s at step %d", d, trainer.steps)
    sink = csvio.Appender(d / "metrics.csv", "metrics", trainer.rows)
    every = cfg["run"]["checkpoint_every"]

    def on_rows(rows):
        sink(rows)
        for r in rows:
            log.info("%s step %d success %.3f return %.2f", d.name, r["step"], r["success_rate"], r["mean_return"])

    while trainer.steps < total:
        stop = total if not every else min(total, (trainer.steps // every + 1) * every)
        trainer.run(until=stop, on_rows=on_rows)
        if every and trainer.steps < total:
            save_trainer(d / f"policy-{trainer.steps}.ckpt", trainer, cfg)
            save_trainer(final, trainer, cfg)
    save_trainer(final, trainer, cfg)
    plots.learning_curve_svg([d / "metrics.csv"], d / "learning_curve.svg", f"{run_label(cfg)} seed {seed}")
    return TrainRun(d, trainer.rows, trainer)


def load_policy(path: str | Path) -> tuple[Policy, ExperimentConfig]:
    """The acting policy (parameters and observation statistics) from a trainer checkpoint."""
    from ..ppo import PolicyConfig, RunningNorm

    _, meta, arrays = checkpoint.load(path, TRAINER_KIND)
    pcfg = PolicyConfig.from_dict(meta["policy_config"])
    mean = arrays["norm/mean"]
    policy = Policy(len(mean), pcfg, seed=0)
    for k, net in enumerate(policy.nets):
        for name, p in net.params.items():
            p.data = np.array(arrays[f"net{k}/{name}"])
    policy.norm = RunningNorm(np.array(mean), np.array(arrays["norm/var"]), float(meta["norm_count"]))
    return policy, ExperimentConfig.from_dict(meta["experiment"])


# ---------------------------------------------------------------------------
# evaluation


def evaluate_checkpoint(path: str | Path, set_name: str, episodes: int, per_shape: bool,
                        seed: int = 0) -> EvalResult:
    if str(path) == "scripted":
        actor, run_cfg = scripted_actor(), ExperimentConfig()
    else:
        actor, run_cfg = load_policy(path)
    shapes = shape_set(set_name, run_cfg["run"]["shape_seed"])
    return evaluate_policy(actor, shapes, episodes, seed=seed, config=run_cfg.env_config(),
                           encoder=_encoder_for(run_cfg), per_shape=per_shape)


def gentest_rows(set_name: str, result: EvalResult) -> list[dict]:
    _, titles, names = tables.layout(set_name, list(result.per_shape))
    rows = []
    for name in names:
        e, s = result.per_shape[name]
        rows.append({"shape": name, "episodes": e, "successes": s, "rate": 100.0 * s / e})
    e = sum(v[0] for v in result.per_shape.values())
    s = sum(v[1] for v in result.per_shape.values())
    rows.append({"shape": "All", "episodes": e, "successes": s, "rate": tables.aggregate(result.per_shape)})
    return rows


@dataclass
class GentestResult:
    set_name: str
    result: EvalResult
    csv: Path
    table: Path


def cmd_gentest(cfg: ExperimentConfig, label: str = "policy") -> GentestResult:
    g = cfg["gentest"]
    if not g["checkpoint"]:
        raise ConfigError("gentest needs gentest.checkpoint")
    res = evaluate_checkpoint(g["checkpoint"], g["set"], g["episodes"], per_shape=True, seed=cfg["run"]["seed"])
    out = output_dir(cfg)
    csv_path = out / f"gentest_{g['set']}.csv"
    csvio.write(csv_path, "gentest", gentest_rows(g["set"], res))
    md = out / f"gentest_{g['set']}.md"
    md.write_text(tables.markdown(g["set"], {label: tables.rates_row(g["set"], res.per_shape)}))
    return GentestResult(g["set"], res, csv_path, md)


def cmd_eval(cfg: ExperimentConfig) -> EvalResult:
    g = cfg["gentest"]
    if not g["checkpoint"]:
        raise ConfigError("eval needs gentest.checkpoint (a policy checkpoint or 'scripted')")
    return evaluate_checkpoint(g["checkpoint"], cfg["run"]["shape_set"], cfg["run"]["eval_episodes"],
                               per_shape=False, seed=cfg["run"]["seed"])


# ---------------------------------------------------------------------------
# ablation matrix


@dataclass
class AblationResult:
    rows: list[dict]
    medians: dict[str, float]  # cell -> median beveled success (%)
    train_medians: dict[str, float]
    directory: Path
    runs: dict[str, list[TrainRun]] = field(default_factory=dict)

    @property
    def ordering_holds(self) -> bool:
        m = self.medians
        return (m["coreward-coac"] > m["coreward-sepac"]
                and m["coreward-coac"] > m["sepreward-sepac"] > m["sepreward-coac"])


def cmd_ablate(cfg: ExperimentConfig) -> AblationResult:
    """{Co,Sep} reward x {Co,Sep} actor-critic over every seed; scored on the beveled set."""
    out = output_dir(cfg)
    episodes = cfg["gentest"]["episodes"]
    rows, runs, per_cell = [], {}, {}
    for cell, (reward_mode, trunk, label) in tables.CELLS.items():
        cell_cfg = cfg.replace(policy__reward_mode=reward_mode, policy__trunk=trunk, policy__topology="onenet")
        per_shape_sum: dict[str, list[int]] = {}
        for seed in cfg["run"]["seeds"]:
            run = cmd_train(cell_cfg, seed)
            runs.setdefault(cell, []).append(run)
            res = evaluate_checkpoint(run.checkpoint, "beveled", episodes, per_shape=True, seed=seed)
            for name, (e, s) in res.per_shape.items():
                acc = per_shape_sum.setdefault(name, [0, 0])
                acc[0] += e
                acc[1] += s
            rows.append({"cell": cell, "seed": seed, "train_success": 100.0 * run.rows[-1]["success_rate"],
                         "beveled_success": 100.0 * res.success_rate, "beveled_episodes": res.episodes})
        per_cell[label] = tables.rates_row("beveled", {k: (v[0], v[1]) for k, v in per_shape_sum.items()})
    csvio.write(out / "ablation.csv", "ablation", rows)
    medians = {c: float(np.median([r["beveled_success"] for r in rows if r["cell"] == c])) for c in tables.CELLS}
    train_medians = {c: float(np.median([r["train_success"] for r in rows if r["cell"] == c])) for c in tables.CELLS}
    result = AblationResult(rows, medians, train_medians, out, runs)
    summary = {
        "median_beveled_success": medians,
        "median_final_train_success": train_medians,
        "ordering_holds": result.ordering_holds,
        "published_beveled_all": {c: v[-1] for c, v in tables.PUBLISHED_BEVELED.items()},
        "seeds": list(cfg["run"]["seeds"]),
    }
    (out / "ablation_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    (out / "ablation_beveled.md").write_text(tables.markdown("beveled", per_cell))
    plots.learning_curve_svg([r.metrics_csv for rs in runs.values() for r in rs], out / "ablation.svg",
                             "Ablation: evaluation success (median, min-max over seeds)")
    return result


# ---------------------------------------------------------------------------
# one network vs two


def steps_to_threshold(rows: list[dict], threshold: float) -> tuple[int, bool]:
    for r in rows:
        if r["success_rate"] >= threshold:
            return int(r["step"]), True
    return int(rows[-1]["step"]) if rows else 0, False


@dataclass
class CompareResult:
    rows: list[dict]
    median_steps: dict[str, float]
    ratio: float
    lower_bound: bool
    directory: Path


def cmd_compare_nets(cfg: ExperimentConfig) -> CompareResult:
    out = output_dir(cfg)
    threshold = cfg["compare"]["threshold"]
    arms = {"onenet": "onenet", "twonet": "onenet" if cfg["compare"]["same_topology"] else "twonet"}
    rows, csvs = [], []
    for arm, topology in arms.items():
        arm_cfg = cfg.replace(policy__topology=topology)
        for seed in cfg["run"]["seeds"]:
            run = cmd_train(arm_cfg, seed)
            csvs.append(run.metrics_csv)
            steps, reached = steps_to_threshold(run.rows, threshold)
            rows.append({"arm": arm, "topology": topology, "seed": seed, "steps_to_threshold": steps,
                         "reached": reached})
    csvio.write(out / "compare.csv", "compare", rows)
    med = {arm: float(np.median([r["steps_to_threshold"] for r in rows if r["arm"] == arm])) for arm in arms}
    ratio = med["twonet"] / med["onenet"] if med["onenet"] > 0 else float("inf")
    # an unreached two-net arm only bounds the ratio from below; an unreached one-net arm
    # makes the ratio meaningless and is flagged the same way
    lower_bound = not all(r["reached"] for r in rows)
    summary = {"median_steps_to_threshold": med, "ratio": ratio, "ratio_is_lower_bound": lower_bound,
               "threshold": threshold, "published_ratio": tables.PUBLISHED_SPEEDUP,
               "meets_published_ratio": ratio >= tables.PUBLISHED_SPEEDUP,
               "same_topology": cfg["compare"]["same_topology"], "seeds": list(cfg["run"]["seeds"])}
    (out / "compare_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _compare_svg(csvs, rows, out / "compare.svg")
    return CompareResult(rows, med, ratio, lower_bound, out)


def _compare_svg(csvs: list[Path], rows: list[dict], path: Path) -> None:
    metric_rows = []
    for p, r in zip(csvs, rows):
        for m in csvio.read_numeric(p, "metrics"):
            metric_rows.append({**m, "arm": "one network" if r["arm"] == "onenet" else "two networks"})
    series = plots.grouped_series(metric_rows, "arm", "step", "success_rate", 100.0)
    path.write_text(plots.line_chart(series, "One network vs two networks", "environment steps",
                                     "success rate (%)", (0.0, 100.0)))

