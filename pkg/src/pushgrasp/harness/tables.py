"""Per-shape success tables laid out like the published generalization tables."""

from __future__ import annotations

from ..shapes import CATEGORIES

BEVELED_COLUMNS = {
    "triangle": "Triangles", "square": "Square", "parallelogram": "Parallelogram",
    "rectangle": "Rectangle", "trapezoid": "Trapezoidal", "circle": "Circle", "oval": "Oval",
    "hexagon": "Hexagonal", "pentagon": "Pentagon", "notch": "Notch",
}
assert tuple(BEVELED_COLUMNS) == CATEGORIES

CELLS = {
    # cell id: (reward_mode, trunk, row label)
    "sepreward-sepac": ("separate", "separate", "Sep Reward & Sep AC"),
    "sepreward-coac": ("separate", "shared", "Sep Reward & Co AC"),
    "coreward-sepac": ("common", "separate", "Co Reward & Sep AC"),
    "coreward-coac": ("common", "shared", "Co Reward & Co AC"),
}

# published means (%), rows in CELLS order, columns as laid out + All
PUBLISHED_BEVELED = {
    "sepreward-sepac": (55.5, 62.5, 58.8, 54.2, 51.0, 64.2, 67.2, 51.2, 63.0, 69.7, 59.2),
    "sepreward-coac": (34.0, 40.7, 40.2, 38.3, 38.3, 44.8, 43.8, 36.5, 42.8, 43.2, 40.8),
    "coreward-sepac": (63.7, 77.0, 69.7, 70.0, 74.8, 83.3, 82.3, 76.3, 79.7, 81.3, 74.2),
    "coreward-coac": (80.2, 91.2, 86.2, 88.2, 86.3, 97.2, 95.5, 89.2, 93.0, 91.3, 86.2),
}
PUBLISHED_IRREGULAR = {
    "sepreward-sepac": (74.3, 78.3, 73.3, 83.0, 70.3, 55.7, 83.0, 77.7, 72.3, 68.3, 83.0, 75.5),
    "sepreward-coac": (44.5, 49.0, 49.3, 50.2, 42.8, 32.7, 49.7, 42.3, 46.5, 44.7, 50.0, 47.3),
    "coreward-sepac": (76.2, 75.5, 73.8, 83.8, 73.8, 63.5, 83.8, 76.3, 69.8, 67.3, 84.3, 77.7),
    "coreward-coac": (82.7, 91.3, 93.0, 100.0, 84.8, 75.8, 98.8, 83.8, 80.5, 80.8, 100.0, 90.3),
}
PUBLISHED_SPEEDUP = 2.5


def cell_id(reward_mode: str, trunk: str) -> str:
    for k, (r, t, _) in CELLS.items():
        if (r, t) == (reward_mode, trunk):
            return k
    raise ValueError(f"no ablation cell for reward={reward_mode}, trunk={trunk}")


def layout(set_name: str, shape_names: list[str]) -> tuple[str, list[str], list[str]]:
    """(first header cell, column titles, shape name per column) for a test set."""
    if set_name == "beveled":
        by_cat = {n.split("-")[0]: n for n in shape_names}
        return "Shape", list(BEVELED_COLUMNS.values()), [by_cat[c] for c in BEVELED_COLUMNS]
    if set_name == "irregular":
        ordered = sorted(shape_names, key=lambda n: int(n.split("-")[0]))
        return "Object ID", [n.split("-")[0] for n in ordered], ordered
    raise ValueError(f"no published layout for shape set {set_name!r}")


def aggregate(per_shape: dict[str, tuple[int, int]]) -> float:
    """Episode-weighted success over every shape, in percent."""
    episodes = sum(e for e, _ in per_shape.values())
    return 100.0 * sum(s for _, s in per_shape.values()) / episodes if episodes else 0.0


def rates_row(set_name: str, per_shape: dict[str, tuple[int, int]]) -> list[float]:
    _, _, names = layout(set_name, list(per_shape))
    return [100.0 * per_shape[n][1] / per_shape[n][0] for n in names] + [aggregate(per_shape)]


def markdown(set_name: str, rows: dict[str, list[float]], with_published: bool = True) -> str:
    """Rows of percentages under the published column layout, published rows appended."""
    names = _names_for(set_name)
    first, titles, _ = layout(set_name, names)
    head = [first, *titles, "All"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for label, vals in rows.items():
        lines.append("| " + " | ".join([label, *(f"{v:.1f}" for v in vals)]) + " |")
    if with_published:
        ref = PUBLISHED_BEVELED if set_name == "beveled" else PUBLISHED_IRREGULAR
        for k, vals in ref.items():
            lines.append("| " + " | ".join([f"published: {CELLS[k][2]}", *(f"{v:.1f}" for v in vals)]) + " |")
    return "\n".join(lines) + "\n"


def _names_for(set_name: str) -> list[str]:
    from ..shapes import shape_set

    return [s.name for s in shape_set(set_name)]
