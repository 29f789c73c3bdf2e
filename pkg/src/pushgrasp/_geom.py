"""Compiled planar geometry kernels used by the tabletop simulator.

Polygons are (n, 2) float64 arrays, counterclockwise. All functions are pure.
"""

import math

import numpy as np
from numba import njit

_CACHE = True


@njit(cache=_CACHE)
def wrap_angle(theta):
    # result in (-pi, pi]
    while theta > math.pi:
        theta -= 2.0 * math.pi
    while theta <= -math.pi:
        theta += 2.0 * math.pi
    return theta


@njit(cache=_CACHE)
def world_vertices(local, com_x, com_y, x, y, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    n = local.shape[0]
    out = np.empty((n, 2))
    for i in range(n):
        lx = local[i, 0] - com_x
        ly = local[i, 1] - com_y
        out[i, 0] = x + c * lx - s * ly
        out[i, 1] = y + s * lx + c * ly
    return out


@njit(cache=_CACHE)
def point_in_polygon(w, px, py):
    n = w.shape[0]
    inside = False
    j = n - 1
    for i in range(n):
        xi, yi = w[i, 0], w[i, 1]
        xj, yj = w[j, 0], w[j, 1]
        if (yi > py) != (yj > py):
            xint = xi + (py - yi) * (xj - xi) / (yj - yi)
            if px < xint:
                inside = not inside
        j = i
    return inside


@njit(cache=_CACHE)
def closest_boundary(w, px, py):
    """Closest boundary point: (cx, cy, distance, edge index)."""
    n = w.shape[0]
    best = np.inf
    bx = 0.0
    by = 0.0
    bi = 0
    for i in range(n):
        ax, ay = w[i, 0], w[i, 1]
        k = i + 1 if i + 1 < n else 0
        ex = w[k, 0] - ax
        ey = w[k, 1] - ay
        ll = ex * ex + ey * ey
        t = ((px - ax) * ex + (py - ay) * ey) / ll if ll > 0.0 else 0.0
        if t < 0.0:
            t = 0.0
        elif t > 1.0:
            t = 1.0
        qx = ax + t * ex
        qy = ay + t * ey
        d = math.hypot(px - qx, py - qy)
        if d < best:
            best = d
            bx = qx
            by = qy
            bi = i
    return bx, by, best, bi


@njit(cache=_CACHE)
def disc_penetration(w, gx, gy, radius):
    """Penetration of a disc into a polygon.

    Returns (depth, nx, ny, cx, cy): depth <= 0 means no overlap; (nx, ny) is the
    unit direction that separates the polygon from the disc (object push
    direction); (cx, cy) is the contact point on the polygon boundary.
    """
    cx, cy, dist, edge = closest_boundary(w, gx, gy)
    inside = point_in_polygon(w, gx, gy)
    if inside:
        depth = radius + dist
    else:
        depth = radius - dist
    if depth <= 0.0:
        return depth, 0.0, 0.0, cx, cy
    if dist > 1e-12:
        if inside:
            nx = (gx - cx) / dist
            ny = (gy - cy) / dist
        else:
            nx = (cx - gx) / dist
            ny = (cy - gy) / dist
    else:
        n = w.shape[0]
        k = edge + 1 if edge + 1 < n else 0
        ex = w[k, 0] - w[edge, 0]
        ey = w[k, 1] - w[edge, 1]
        ll = math.hypot(ex, ey)
        # inward normal of a counterclockwise edge
        nx = -ey / ll
        ny = ex / ll
    return depth, nx, ny, cx, cy


@njit(cache=_CACHE)
def push(local, com_x, com_y, ox, oy, theta, gx, gy, radius, slip, kappa):
    """Quasi-static resolution of a disc pusher against a polygon.

    Returns (ox, oy, theta, gx, gy, depth, nx, ny, cx, cy) after resolution;
    depth is the initial penetration (0 when there was no contact).
    """
    w = world_vertices(local, com_x, com_y, ox, oy, theta)
    depth, nx, ny, cx, cy = disc_penetration(w, gx, gy, radius)
    if depth <= 0.0:
        return ox, oy, theta, gx, gy, 0.0, 0.0, 0.0, cx, cy
    move = (1.0 - slip) * depth
    ox += move * nx
    oy += move * ny
    gx -= slip * depth * nx
    gy -= slip * depth * ny
    ax = cx - (ox - move * nx)
    ay = cy - (oy - move * ny)
    arm = math.hypot(ax, ay)
    if arm < 1e-6:
        arm = 1e-6
    cross = ax * ny - ay * nx
    theta = wrap_angle(theta + kappa * depth * cross / arm)
    # rotation or concave corners can leave residual overlap: back the pusher out
    for _ in range(16):
        w = world_vertices(local, com_x, com_y, ox, oy, theta)
        d2, n2x, n2y, _cx, _cy = disc_penetration(w, gx, gy, radius)
        if d2 <= 0.0:
            break
        gx -= (d2 + 1e-10) * n2x
        gy -= (d2 + 1e-10) * n2y
    return ox, oy, theta, gx, gy, depth, nx, ny, cx, cy


@njit(cache=_CACHE)
def min_y(w):
    m = w[0, 1]
    for i in range(1, w.shape[0]):
        if w[i, 1] < m:
            m = w[i, 1]
    return m


@njit(cache=_CACHE)
def slice_at_y(w, ys):
    """x-extent [lo, hi] of all boundary crossings of the line y = ys."""
    n = w.shape[0]
    lo = np.inf
    hi = -np.inf
    found = False
    j = n - 1
    for i in range(n):
        yi, yj = w[i, 1], w[j, 1]
        if (yi > ys) != (yj > ys):
            x = w[i, 0] + (ys - yi) * (w[j, 0] - w[i, 0]) / (yj - yi)
            lo = min(lo, x)
            hi = max(hi, x)
            found = True
        j = i
    return found, lo, hi


@njit(cache=_CACHE)
def slice_at_x(w, xs):
    """y-extent [lo, hi] of all boundary crossings of the line x = xs."""
    n = w.shape[0]
    lo = np.inf
    hi = -np.inf
    found = False
    j = n - 1
    for i in range(n):
        xi, xj = w[i, 0], w[j, 0]
        if (xi > xs) != (xj > xs):
            y = w[i, 1] + (xs - xi) * (w[j, 1] - w[i, 1]) / (xj - xi)
            lo = min(lo, y)
            hi = max(hi, y)
            found = True
        j = i
    return found, lo, hi


@njit(cache=_CACHE)
def overhang_and_slice(local, com_x, com_y, ox, oy, theta, edge_y, slice_y):
    w = world_vertices(local, com_x, com_y, ox, oy, theta)
    over = edge_y - min_y(w)
    if over < 0.0:
        over = 0.0
    found, lo, hi = slice_at_y(w, slice_y)
    return over, found, lo, hi
