"""Planar object footprints: the 80-object training set and the two test sets.

Every polygon is stored counterclockwise in an object frame whose origin is
the polygon's area centroid. ``com_offset`` displaces the centre of mass from
that centroid (non-zero only for the irregular test objects).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CATEGORIES = (
    "triangle", "square", "parallelogram", "rectangle", "trapezoid",
    "circle", "oval", "hexagon", "pentagon", "notch",
)
MIN_DIAMETER = 0.165
MAX_DIAMETER = 0.260
HEIGHT = 0.06
STRETCH = 0.05
CIRCLE_SIDES = 32

# canonical proportions, recorded in every serialized shape via the category name
RECT_ASPECT = 1.6
OVAL_ASPECT = 2.0
PARALLELOGRAM_ANGLE = math.radians(60.0)
PARALLELOGRAM_SIDE_RATIO = 1.4
TRAPEZOID_BASES = (1.8, 1.0)
NOTCH_FRACTION = 0.25


class GeometryError(ValueError):
    pass


@dataclass(eq=False)
class ObjectShape:
    category: str
    vertices: np.ndarray
    incircle_diameter: float
    height: float = HEIGHT
    beveled: bool = False
    axial_stretch: float = 0.0
    com_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    color: tuple[float, float, float] = (0.8, 0.8, 0.8)
    name: str = ""

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.com_offset = np.asarray(self.com_offset, dtype=float)
        if not self.name:
            self.name = f"{self.category}-{self.incircle_diameter * 1000:.0f}"

    @property
    def intensity(self) -> float:
        r, g, b = self.color
        return 0.299 * r + 0.587 * g + 0.114 * b

    @property
    def radius(self) -> float:
        """Largest distance from the centre of mass to a vertex."""
        return float(np.max(np.hypot(*(self.vertices - self.com_offset).T)))

    def same_as(self, other: "ObjectShape") -> bool:
        return (self.category == other.category and self.name == other.name
                and np.array_equal(self.vertices, other.vertices)
                and self.incircle_diameter == other.incircle_diameter
                and self.height == other.height and self.beveled == other.beveled
                and self.axial_stretch == other.axial_stretch
                and np.array_equal(self.com_offset, other.com_offset)
                and tuple(self.color) == tuple(other.color))


# ---------------------------------------------------------------------------
# polygon primitives


def shoelace(verts: np.ndarray) -> tuple[float, np.ndarray]:
    """Signed area and area centroid of a polygon."""
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    area = 0.5 * cross.sum()
    if abs(area) < 1e-12:
        return float(area), verts.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * area)
    cy = ((y + yn) * cross).sum() / (6.0 * area)
    return float(area), np.array([cx, cy])


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 * d2 != 0 and d3 * d4 != 0:
        return True
    return False


def is_simple(verts: np.ndarray) -> bool:
    """No two non-adjacent edges intersect (pairwise segment test)."""
    n = len(verts)
    if n < 3:
        return False
    for i in range(n):
        a1, a2 = verts[i], verts[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a1, a2, verts[j], verts[(j + 1) % n]):
                return False
    return True


def validate_polygon(verts: np.ndarray) -> None:
    area, _ = shoelace(verts)
    if abs(area) < 1e-6:
        raise GeometryError(f"degenerate polygon (area {abs(area):.3g} m^2)")
    if area < 0:
        raise GeometryError("polygon vertices must be counterclockwise")
    if not is_simple(verts):
        raise GeometryError("polygon is self-intersecting")


def ccw(verts: np.ndarray) -> np.ndarray:
    area, _ = shoelace(verts)
    return verts[::-1].copy() if area < 0 else verts


def centered(verts: np.ndarray) -> np.ndarray:
    _, c = shoelace(verts)
    return verts - c


def contains(verts: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Even-odd point-in-polygon test over arrays of points."""
    x1, y1 = verts[:, 0][:, None], verts[:, 1][:, None]
    x2, y2 = np.roll(verts[:, 0], -1)[:, None], np.roll(verts[:, 1], -1)[:, None]
    px, py = np.asarray(px)[None, :], np.asarray(py)[None, :]
    crosses = (y1 > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    hits = crosses & (px < xint)
    return (hits.sum(axis=0) % 2).astype(bool)


def boundary_distance(verts: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    a = verts[:, None, :]
    b = np.roll(verts, -1, axis=0)[:, None, :]
    p = np.stack([px, py], axis=-1)[None, :, :]
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    closest = a + t[..., None] * ab
    return np.min(np.linalg.norm(p - closest, axis=-1), axis=0)


def incircle_search(verts: np.ndarray, step: float = 1e-3) -> tuple[float, np.ndarray]:
    """Largest inscribed circle: grid search, then pattern-search refinement.

    Returns (diameter, centre).
    """
    lo, hi = verts.min(axis=0), verts.max(axis=0)
    xs = np.arange(lo[0] + step / 2, hi[0], step)
    ys = np.arange(lo[1] + step / 2, hi[1], step)
    gx, gy = (g.ravel() for g in np.meshgrid(xs, ys))
    inside = contains(verts, gx, gy)
    gx, gy = gx[inside], gy[inside]
    best_r = -1.0
    best = verts.mean(axis=0)
    for chunk in range(0, len(gx), 20000):
        d = boundary_distance(verts, gx[chunk:chunk + 20000], gy[chunk:chunk + 20000])
        k = int(np.argmax(d))
        if d[k] > best_r:
            best_r = float(d[k])
            best = np.array([gx[chunk + k], gy[chunk + k]])
    h = step
    offsets = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [1, -1], [-1, 1], [-1, -1]], float)
    while h > 1e-7:
        cand = best + h * offsets
        ok = contains(verts, cand[:, 0], cand[:, 1])
        d = np.where(ok, boundary_distance(verts, cand[:, 0], cand[:, 1]), -1.0)
        k = int(np.argmax(d))
        if d[k] > best_r:
            best_r, best = float(d[k]), cand[k]
        else:
            h *= 0.5
    return 2.0 * best_r, best


def transform(verts: np.ndarray, com_offset: np.ndarray, x: float, y: float, theta: float) -> np.ndarray:
    """Object-frame vertices to world frame for a COM pose (x, y, theta)."""
    c, s = math.cos(theta), math.sin(theta)
    local = verts - com_offset
    return np.column_stack([x + c * local[:, 0] - s * local[:, 1],
                            y + s * local[:, 0] + c * local[:, 1]])


@dataclass(frozen=True)
class PolygonProperties:
    area: float
    centroid: np.ndarray
    incircle_diameter: float
    world_com: np.ndarray | None = None


def polygon_properties(shape: ObjectShape, pose: tuple[float, float, float] | None = None,
                       incircle_step: float = 1e-3) -> PolygonProperties:
    """Exact area and centroid, grid-searched incircle, and optionally the world COM.

    ``pose`` is (x, y, theta) of the object frame origin (the centroid).
    """
    area, centroid = shoelace(shape.vertices)
    if abs(area) < 1e-6:
        raise GeometryError(f"degenerate polygon (area {abs(area):.3g} m^2)")
    diameter, _ = incircle_search(shape.vertices, incircle_step)
    world = None
    if pose is not None:
        x, y, theta = pose
        c, s = math.cos(theta), math.sin(theta)
        local = centroid + shape.com_offset
        world = np.array([x + c * local[0] - s * local[1], y + s * local[0] + c * local[1]])
    return PolygonProperties(abs(area), centroid, diameter, world)


# ---------------------------------------------------------------------------
# canonical footprints, all with inscribed-circle diameter 1


def _regular(n: int, apothem: float, phase: float) -> np.ndarray:
    r = apothem / math.cos(math.pi / n)
    ang = phase + 2.0 * math.pi * np.arange(n) / n
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def _canonical(category: str) -> np.ndarray:
    if category == "triangle":
        v = _regular(3, 0.5, math.pi / 2)
    elif category == "square":
        v = np.array([[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]])
    elif category == "rectangle":
        a = RECT_ASPECT / 2
        v = np.array([[-a, -0.5], [a, -0.5], [a, 0.5], [-a, 0.5]])
    elif category == "parallelogram":
        side = 1.0 / math.sin(PARALLELOGRAM_ANGLE)
        base = PARALLELOGRAM_SIDE_RATIO * side
        dx = side * math.cos(PARALLELOGRAM_ANGLE)
        v = np.array([[0.0, 0.0], [base, 0.0], [base + dx, 1.0], [dx, 1.0]])
    elif category == "trapezoid":
        bottom, top = TRAPEZOID_BASES
        v = np.array([[-bottom / 2, 0.0], [bottom / 2, 0.0], [top / 2, 1.0], [-top / 2, 1.0]])
    elif category == "circle":
        v = _regular(CIRCLE_SIDES, 0.5, 0.0)
    elif category == "oval":
        ang = 2.0 * math.pi * np.arange(CIRCLE_SIDES) / CIRCLE_SIDES
        v = np.column_stack([OVAL_ASPECT * np.cos(ang), np.sin(ang)])
        v *= 0.5 / _min_edge_distance(v)
    elif category == "hexagon":
        v = _regular(6, 0.5, 0.0)
    elif category == "pentagon":
        v = _regular(5, 0.5, math.pi / 2)
    elif category == "notch":
        a = RECT_ASPECT / 2
        q = NOTCH_FRACTION
        v = np.array([[-a, -0.5], [a, -0.5], [a, -q / 2], [a - q, -q / 2],
                      [a - q, q / 2], [a, q / 2], [a, 0.5], [-a, 0.5]])
    else:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    return centered(ccw(v))


def _min_edge_distance(v: np.ndarray) -> float:
    """Distance from the origin to the nearest edge line of a symmetric convex polygon."""
    a = v
    b = np.roll(v, -1, axis=0)
    cross = np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])
    return float(np.min(cross / np.linalg.norm(b - a, axis=1)))


def _color(rng: np.random.Generator) -> tuple[float, float, float]:
    # keep luminance well above the table so grey renders separate object from table
    while True:
        c = tuple(float(x) for x in rng.uniform(0.35, 1.0, 3))
        lum = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
        if 0.6 <= lum <= 0.95:
            return c


def make_shape(category: str, incircle_diameter: float, seed: int = 0) -> ObjectShape:
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}")
    if not MIN_DIAMETER - 1e-12 <= incircle_diameter <= MAX_DIAMETER + 1e-12:
        raise ValueError(f"incircle diameter {incircle_diameter} outside [{MIN_DIAMETER}, {MAX_DIAMETER}]")
    verts = _canonical(category) * incircle_diameter
    return ObjectShape(category, verts, float(incircle_diameter),
                       color=_color(np.random.default_rng(seed)))


def training_sizes() -> np.ndarray:
    return np.linspace(MIN_DIAMETER, MAX_DIAMETER, 8)


def training_set(seed: int = 0) -> list[ObjectShape]:
    """Ten categories times eight sizes."""
    shapes = []
    for ci, cat in enumerate(CATEGORIES):
        for si, d in enumerate(training_sizes()):
            shapes.append(make_shape(cat, float(d), seed=seed * 1000 + ci * 8 + si))
    return shapes


def principal_axis(verts: np.ndarray) -> np.ndarray:
    """Direction of largest second moment of area; ties resolve to +x."""
    x, y = verts[:, 0], verts[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    ixx = np.sum(cross * (x * x + x * xn + xn * xn)) / 12.0
    iyy = np.sum(cross * (y * y + y * yn + yn * yn)) / 12.0
    ixy = np.sum(cross * (x * yn + 2 * x * y + 2 * xn * yn + xn * y)) / 24.0
    scale = abs(ixx) + abs(iyy)
    if abs(ixx - iyy) < 1e-6 * scale and abs(ixy) < 1e-6 * scale:
        return np.array([1.0, 0.0])
    w, v = np.linalg.eigh(np.array([[ixx, ixy], [ixy, iyy]]))
    axis = v[:, int(np.argmax(w))]
    return axis if axis[0] >= 0 else -axis


def stretch(verts: np.ndarray, amount: float) -> np.ndarray:
    """Lengthen a footprint by ``amount`` metres along its principal axis."""
    u = principal_axis(verts)
    along = verts @ u
    extent = along.max() - along.min()
    factor = (extent + amount) / extent
    out = verts + np.outer(along * (factor - 1.0), u)
    return centered(out)


def beveled_test_set(seed: int = 0) -> list[ObjectShape]:
    """One stretched, beveled object per category with a random size."""
    rng = np.random.default_rng(seed)
    out = []
    for cat in CATEGORIES:
        d = float(rng.uniform(MIN_DIAMETER, MAX_DIAMETER))
        verts = stretch(_canonical(cat) * d, STRETCH)
        diameter, _ = incircle_search(verts)
        out.append(ObjectShape(cat, verts, diameter, beveled=True, axial_stretch=STRETCH,
                               color=_color(rng), name=f"{cat}-beveled"))
    return out


# hand-authored letter-like outlines (metres) and their centre-of-mass offsets
_IRREGULAR = [
    ("L", [(0, 0), (0.30, 0), (0.30, 0.12), (0.12, 0.12), (0.12, 0.30), (0, 0.30)], (-0.025, -0.025), False),
    ("T", [(0.10, 0), (0.22, 0), (0.22, 0.20), (0.32, 0.20), (0.32, 0.32), (0, 0.32), (0, 0.20),
           (0.10, 0.20)], (0.0, 0.035), False),
    ("U", [(0, 0), (0.32, 0), (0.32, 0.28), (0.21, 0.28), (0.21, 0.14), (0.11, 0.14), (0.11, 0.28),
           (0, 0.28)], (0.0, -0.03), False),
    ("wedge", [(0, 0), (0.34, 0), (0.34, 0.09), (0, 0.26)], (-0.03, 0.01), False),
    ("C", [(0, 0), (0.30, 0), (0.30, 0.10), (0.12, 0.10), (0.12, 0.20), (0.30, 0.20), (0.30, 0.30),
           (0, 0.30)], (-0.04, 0.0), False),
    ("F", [(0, 0), (0.11, 0), (0.11, 0.12), (0.22, 0.12), (0.22, 0.21), (0.11, 0.21), (0.11, 0.24),
           (0.30, 0.24), (0.30, 0.34), (0, 0.34)], (-0.02, 0.03), False),
    ("Z", [(0, 0), (0.32, 0), (0.32, 0.10), (0.13, 0.10), (0.32, 0.22), (0.32, 0.32), (0, 0.32),
           (0, 0.22), (0.19, 0.22), (0, 0.10)], (0.03, -0.02), False),
    ("cross", [(0.10, 0), (0.22, 0), (0.22, 0.10), (0.32, 0.10), (0.32, 0.22), (0.22, 0.22), (0.22, 0.32),
               (0.10, 0.32), (0.10, 0.22), (0, 0.22), (0, 0.10), (0.10, 0.10)], (0.02, 0.02), False),
    ("stair", [(0, 0), (0.34, 0), (0.34, 0.10), (0.22, 0.10), (0.22, 0.20), (0.10, 0.20), (0.10, 0.30),
               (0, 0.30)], (-0.03, -0.03), False),
    ("octagon", list(map(tuple, _regular(8, 0.15, math.pi / 8))), (0.0, 0.0), True),
    ("long-hexagon", [(-0.2, -0.1), (0.2, -0.1), (0.26, 0.0), (0.2, 0.1), (-0.2, 0.1), (-0.26, 0.0)],
     (0.0, 0.0), True),
]


def irregular_test_set(seed: int = 0) -> list[ObjectShape]:
    """Eleven fixed outlines; most carry a centre of mass away from the centroid."""
    rng = np.random.default_rng(seed)
    out = []
    for i, (label, pts, offset, beveled) in enumerate(_IRREGULAR, start=1):
        verts = centered(ccw(np.array(pts, dtype=float)))
        diameter, _ = incircle_search(verts)
        out.append(ObjectShape("irregular", verts, diameter, beveled=beveled,
                               com_offset=np.array(offset), color=_color(rng),
                               name=f"{i}-{label}"))
    return out


def shape_set(name: str, seed: int = 0) -> list[ObjectShape]:
    if name == "training":
        return training_set(seed)
    if name == "beveled":
        return beveled_test_set(seed)
    if name == "irregular":
        return irregular_test_set(seed)
    raise ValueError(f"unknown shape set {name!r}")


# ---------------------------------------------------------------------------
# text serialization


def dumps(shape: ObjectShape) -> str:
    lines = [
        "# pushgrasp-shape v1",
        f"category={shape.category}",
        f"name={shape.name}",
        f"incircle_diameter={shape.incircle_diameter!r}",
        f"height={shape.height!r}",
        f"beveled={int(shape.beveled)}",
        f"axial_stretch={shape.axial_stretch!r}",
        f"com_offset={float(shape.com_offset[0])!r} {float(shape.com_offset[1])!r}",
        "color=" + " ".join(repr(float(c)) for c in shape.color),
        f"vertices={len(shape.vertices)}",
    ]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in shape.vertices]
    return "\n".join(lines) + "\n"


def loads(text: str) -> ObjectShape:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "# pushgrasp-shape v1":
        raise ValueError("not a pushgrasp shape file (bad header)")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines):
        key, _, value = lines[i].partition("=")
        header[key] = value
        i += 1
        if key == "vertices":
            break
    n = int(header["vertices"])
    pts = [tuple(float(t) for t in ln.split()) for ln in lines[i:i + n]]
    if len(pts) != n:
        raise ValueError(f"expected {n} vertices, found {len(pts)}")
    return ObjectShape(
        category=header["category"],
        vertices=np.array(pts),
        incircle_diameter=float(header["incircle_diameter"]),
        height=float(header["height"]),
        beveled=bool(int(header["beveled"])),
        axial_stretch=float(header["axial_stretch"]),
        com_offset=np.array([float(t) for t in header["com_offset"].split()]),
        color=tuple(float(t) for t in header["color"].split()),
        name=header["name"],
    )


def save(shape: ObjectShape, path: str | Path) -> None:
    Path(path).write_text(dumps(shape))


def load(path: str | Path) -> ObjectShape:
    return loads(Path(path).read_text())
