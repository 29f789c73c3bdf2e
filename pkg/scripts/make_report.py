"""Collect the experiment outputs under ``results/`` into ``results/REPORT.md``.

Reads only files written by ``scripts/run_experiments.py``; steps that have not
run yet are listed as missing.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
OUT = Path(os.environ.get("PUSHGRASP_OUT", ROOT / "results"))

from pushgrasp.harness import csvio, tables  # noqa: E402


def _json(path: Path):
    return json.loads(path.read_text()) if path.exists() else None


def ablation_section() -> list[str]:
    d = OUT / "ablation"
    summary = _json(d / "ablation_summary.json")
    if summary is None:
        return ["## Ablation", "", "missing: run `scripts/run_experiments.py ablate`", ""]
    lines = ["## Ablation (beveled set, final policies)", "",
             "| cell | median beveled success (%) | per seed | median final training success (%) | published |",
             "|---|---|---|---|---|"]
    rows = csvio.read_numeric(d / "ablation.csv", "ablation")
    for cell, (_, _, label) in tables.CELLS.items():
        seeds = [f"{r['beveled_success']:.1f}" for r in rows if r["cell"] == cell]
        lines.append(f"| {label} | {summary['median_beveled_success'][cell]:.1f} | {', '.join(seeds)} | "
                     f"{summary['median_final_train_success'][cell]:.1f} | {tables.PUBLISHED_BEVELED[cell][-1]} |")
    lines += ["", f"Ordering CoCo > CoSep and CoCo > SepSep > SepCo holds: **{summary['ordering_holds']}**", "",
              "Per-shape rates, pooled over seeds:", "", (d / "ablation_beveled.md").read_text(),
              "![ablation curves](ablation/ablation.svg)", ""]
    return lines


def compare_section() -> list[str]:
    summary = _json(OUT / "compare" / "compare_summary.json")
    if summary is None:
        return ["## One vs two networks", "", "missing: run `scripts/run_experiments.py compare`", ""]
    med = summary["median_steps_to_threshold"]
    rows = csvio.read_numeric(OUT / "compare" / "compare.csv", "compare")
    lines = ["## One vs two networks", "",
             f"Median environment steps to {100 * summary['threshold']:.0f}% evaluation success:", "",
             "| arm | median steps | per seed (reached?) |", "|---|---|---|"]
    for arm in ("onenet", "twonet"):
        per = ", ".join(f"{r['steps_to_threshold']} ({'yes' if r['reached'] else 'no'})"
                        for r in rows if r["arm"] == arm)
        lines.append(f"| {arm} | {med[arm]:.0f} | {per} |")
    ratio = f"{summary['ratio']:.2f}" + (" (lower bound)" if summary["ratio_is_lower_bound"] else "")
    lines += ["", f"Ratio two/one: **{ratio}**, published {summary['published_ratio']}x.", ""]
    if not summary["meets_published_ratio"]:
        lines += [f"Gap: the published {summary['published_ratio']}x speed-up is not reached at desk scale.", ""]
    lines += ["![one vs two networks](compare/compare.svg)", ""]
    return lines


def gentest_section() -> list[str]:
    lines = ["## Generalization (Co Reward & Co AC policy)", ""]
    for set_name in ("beveled", "irregular"):
        rates, tables_md = [], []
        for d in sorted(OUT.glob(f"gentest-{set_name}-seed*")):
            rows = csvio.read_numeric(d / f"gentest_{set_name}.csv", "gentest")
            rates.append(rows[-1]["rate"])
            tables_md.append(f"{d.name.rsplit('-', 1)[1]}:\n\n" + (d / f"gentest_{set_name}.md").read_text())
        if not rates:
            lines += [f"{set_name}: missing: run `scripts/run_experiments.py gentest`", ""]
            continue
        pub = tables.PUBLISHED_BEVELED if set_name == "beveled" else tables.PUBLISHED_IRREGULAR
        lines += [f"### {set_name} set: median {np.median(rates):.1f}% over seeds "
                  f"({', '.join(f'{r:.1f}' for r in rates)}); published {pub['coreward-coac'][-1]}%", ""]
        lines += tables_md
    return lines


def main() -> int:
    text = ["# Desk-scale results", "",
            "Generated by `scripts/make_report.py` from the CSV and JSON files in this directory.", ""]
    text += ablation_section() + compare_section() + gentest_section()
    (OUT / "REPORT.md").write_text("\n".join(text).rstrip() + "\n")
    print(OUT / "REPORT.md")
    return 0


if __name__ == "__main__":
    sys.exit(main())
