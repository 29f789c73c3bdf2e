"""Hand-written SVG line charts, drawn only from CSV files."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import csvio

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 50


@dataclass
class Series:
    label: str
    x: np.ndarray
    y: np.ndarray
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = np.ceil(lo / step) * step
    return [float(v) for v in np.arange(start, hi + step * 1e-9, step)]


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) >= 1e5 or abs(v) < 1e-3):
        return f"{v:.0e}".replace("e+0", "e").replace("e-0", "e-")
    return f"{v:g}"


def line_chart(series: list[Series], title: str, xlabel: str, ylabel: str,
               y_range: tuple[float, float] | None = None) -> str:
    xs = np.concatenate([s.x for s in series]) if series else np.array([0.0, 1.0])
    ys = [s.y for s in series] + [s.lo for s in series if s.lo is not None] + \
         [s.hi for s in series if s.hi is not None]
    ys = np.concatenate(ys) if ys else np.array([0.0, 1.0])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = y_range if y_range else (float(ys.min()), float(ys.max()))
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x):
        return LEFT + (x - x0) / (x1 - x0) * pw

    def py(y):
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{LEFT}" y1="{py(t):.2f}" x2="{LEFT + pw}" y2="{py(t):.2f}" stroke="#e5e5e5"/>')
        out.append(f'<text x="{LEFT - 6}" y="{py(t) + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{TOP + ph}" x2="{px(t):.2f}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{px(t):.2f}" y="{TOP + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">{escape(ylabel)}</text>')
    for i, s in enumerate(series):
        colour = PALETTE[i % len(PALETTE)]
        if s.lo is not None and s.hi is not None and len(s.x):
            pts = [(px(x), py(y)) for x, y in zip(s.x, s.hi)] + \
                  [(px(x), py(y)) for x, y in zip(s.x[::-1], s.lo[::-1])]
            path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polygon points="{path}" fill="{colour}" fill-opacity="0.18" stroke="none"/>')
        line = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.x, s.y))
        out.append(f'<polyline points="{line}" fill="none" stroke="{colour}" stroke-width="1.8"/>')
        ly = TOP + 14 + 18 * i
        out.append(f'<line x1="{LEFT + pw + 12}" y1="{ly - 4}" x2="{LEFT + pw + 32}" y2="{ly - 4}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{LEFT + pw + 36}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def grouped_series(rows: list[dict], group: str, x: str, y: str, scale: float = 1.0) -> list[Series]:
    """Median line with a min-max band per group, over the rows sharing each x."""
    by_group: dict[str, dict[float, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_group[str(r[group])][float(r[x])].append(float(r[y]) * scale)
    out = []
    for label in sorted(by_group):
        pts = by_group[label]
        xs = np.array(sorted(pts))
        vals = [np.array(pts[v]) for v in xs]
        out.append(Series(label, xs, np.array([np.median(v) for v in vals]),
                          np.array([v.min() for v in vals]), np.array([v.max() for v in vals])))
    return out


def learning_curve_svg(metric_csvs: list[str | Path], out: str | Path, title: str = "Evaluation success",
                       group: str = "cell") -> str:
    rows = [r for p in metric_csvs for r in csvio.read_numeric(p, "metrics")]
    svg = line_chart(grouped_series(rows, group, "step", "success_rate", 100.0), title,
                     "environment steps", "success rate (%)", (0.0, 100.0))
    Path(out).write_text(svg)
    return svg


def loss_curve_svg(loss_csv: str | Path, out: str | Path) -> str:
    rows = csvio.read_numeric(loss_csv, "vae_loss")
    s = Series("loss", np.array([r["epoch"] for r in rows], float), np.array([r["loss"] for r in rows], float))
    svg = line_chart([s], "VAE training loss", "epoch", "mean loss per image")
    Path(out).write_text(svg)
    return svg
