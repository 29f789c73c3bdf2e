"""Small reverse-mode autodiff over float64 numpy arrays.

Every forward op records a node on the result tensor when any input requires
a gradient. ``backward`` walks the recorded graph in reverse topological order.
Only the handful of ops needed by the VAE and the actor-critic networks exist;
there is no general broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when op inputs do not satisfy the op's shape rule."""


def _shape_fail(op: str, *shapes) -> ShapeError:
    shown = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {shown}")


class Tensor:
    """A float64 array with an optional gradient and graph node."""

    __slots__ = ("data", "grad", "requires_grad", "op", "inputs", "saved", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.saved: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable, saved=()) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = tuple(inputs)
        out.saved = saved
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# graph + backward


@dataclass
class Graph:
    """Topologically ordered op nodes reachable from a loss tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, loss: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.inputs, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {id(n): n.grad for n in self.nodes if n.is_leaf}


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` on every leaf that requires a gradient; returns the traced graph."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = Graph.trace(loss)
    if loss.requires_grad:
        graph.backward(loss)
    return graph


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    for t in wrt:
        t.grad = None
    backward(loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# elementwise + linear ops


def _is_rowvec(a: Tensor, b: Tensor) -> bool:
    return b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1] and a.data.ndim > 1


def _sum_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    """Same-shape add, or add a length-D vector to every row of a (..., D) array."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))
    if _is_rowvec(a, b):
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, _sum_to_row(g)))
    if _is_rowvec(b, a):
        return _make(a.data + b.data, "add", (a, b), lambda g: (_sum_to_row(g), g))
    if b.data.size == 1 and b.data.ndim == 0:
        return _make(a.data + b.data, "add", (a, b), lambda g: (g, np.asarray(g.sum())))
    raise _shape_fail("add", a.shape, b.shape)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may also be a row vector or a python scalar."""
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        c = float(b)
        return _make(a.data * c, "scale", (a,), lambda g: (g * c,))
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))
    if _is_rowvec(a, b):
        return _make(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, _sum_to_row(g * a.data)))
    if _is_rowvec(b, a):
        return _make(a.data * b.data, "mul", (a, b), lambda g: (_sum_to_row(g * b.data), g * a.data))
    raise _shape_fail("mul", a.shape, b.shape)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_fail("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, "matmul", (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _make(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values; gradient passes only where the input is strictly inside."""
    a = as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return _make(np.clip(x, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_fail("minimum", a.shape, b.shape)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), "minimum", (a, b),
                 lambda g: (g * pick_a, g * ~pick_a))


# ---------------------------------------------------------------------------
# reductions + losses


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    if axis is None:
        shape = a.shape
        return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    if axis not in (-1, a.data.ndim - 1):
        raise ShapeError(f"sum: only the last axis may be reduced, got axis={axis}")
    return _make(a.data.sum(axis=-1), "sum", (a,), lambda g: (np.repeat(g[..., None], a.shape[-1], axis=-1),))


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[-1]
    return mul(sum(a, axis), 1.0 / n)


def mse(a, b) -> Tensor:
    """Mean of squared differences (d/dx of mse(x, 0) for a single x is 2x)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_fail("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size
    return _make(np.asarray(np.mean(diff * diff)), "mse", (a, b),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# ---------------------------------------------------------------------------
# structural ops


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise _shape_fail("reshape", old, shape) from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(old),))


def columns(a, start: int, stop: int) -> Tensor:
    """Slice ``a[:, start:stop]`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"columns: cannot take [{start}:{stop}] of shape {a.shape}")
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return _make(a.data[:, start:stop].copy(), "columns", (a,), back)


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    a = as_tensor(a)
    if a.data.ndim != 4:
        raise _shape_fail("upsample2x", a.shape)
    y = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.shape

    def back(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(y, "upsample2x", (a,), back)


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, stride 1 or 2, NCHW layout."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    if (x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3)
            or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],)):
        raise _shape_fail("conv2d", x.shape, w.shape, b.shape)
    n, c, h, wd = x.shape
    co = w.shape[0]
    xp = np.zeros((c, n, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x.data.transpose(1, 0, 2, 3)
    if stride == 1 and h * wd >= 64:
        out, back = _conv_shifted(xp, w.data, n, h, wd)
    else:
        out, back = _conv_im2col(xp, w.data, n, h, wd, stride)
    out = out + b.data[None, :, None, None]

    def back_all(g):
        gx, gw = back(g)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(np.ascontiguousarray(out), "conv2d", (x, w, b), back_all)


def _conv_im2col(xp, w, n, h, wd, stride):
    # one (co, 9c) @ (9c, n*ho*wo) product; cheapest for small or strided maps
    c, co = xp.shape[0], w.shape[0]
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    cols = np.empty((9, c, n, ho, wo))
    for k in range(9):
        ky, kx = divmod(k, 3)
        cols[k] = xp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    cols = cols.reshape(9 * c, -1)
    wm = w.transpose(0, 2, 3, 1).reshape(co, 9 * c)
    out = (wm @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3)

    def back(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        gw = (gm @ cols.T).reshape(co, 3, 3, c).transpose(0, 3, 1, 2).copy()
        gcols = (wm.T @ gm).reshape(9, c, n, ho, wo)
        gxp = np.zeros_like(xp)
        for k in range(9):
            ky, kx = divmod(k, 3)
            gxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += gcols[k]
        return gxp[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3), gw

    return out, back


def _conv_shifted(xp, w, n, h, wd):
    # Flatten the padded input to (c, n*hp*wp). Output pixel p (top-left anchored on the
    # padded grid) is sum_k W_k @ xf[:, p + off_k]: every tap is a shifted view, no copies.
    c, co = xp.shape[0], w.shape[0]
    hp, wp = h + 2, wd + 2
    xf = xp.reshape(c, -1)
    offsets = [ky * wp + kx for ky in range(3) for kx in range(3)]
    span = xf.shape[1] - offsets[-1]
    wt = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(9, co, c)
    acc = np.zeros((co, xf.shape[1]))
    tmp = np.empty((co, span))
    for k, off in enumerate(offsets):
        np.matmul(wt[k], xf[:, off:off + span], out=tmp)
        acc[:, :span] += tmp
    out = acc.reshape(co, n, hp, wp)[:, :, :h, :wd].transpose(1, 0, 2, 3)

    def back(g):
        # gradient taps: row block k of gcols is g shifted right by off_k, so
        # dW_k = g_k @ xf.T and dx = sum_k W_k.T @ g_k are each a single product
        lead = offsets[-1]
        gl = np.zeros((co, lead + xf.shape[1]))
        gl[:, lead:].reshape(co, n, hp, wp)[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
        gcols = np.empty((9, co, xf.shape[1]))
        for k, off in enumerate(offsets):
            gcols[k] = gl[:, lead - off:lead - off + xf.shape[1]]
        gcols = gcols.reshape(9 * co, -1)
        gw = (gcols @ xf.T).reshape(3, 3, co, c).transpose(2, 3, 0, 1).copy()
        gxf = wt.reshape(9 * co, c).T @ gcols
        return gxf.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3), gw

    return out, back


# ---------------------------------------------------------------------------
# Gaussian utilities


def gaussian_logprob(x, mu, log_std) -> Tensor:
    """Elementwise log N(x; mu, exp(log_std)^2). ``log_std`` may be a row vector."""
    x, mu, log_std = as_tensor(x), as_tensor(mu), as_tensor(log_std)
    if x.shape != mu.shape:
        raise _shape_fail("gaussian_logprob", x.shape, mu.shape)
    z = mul(sub(x, mu), exp(neg(log_std)))
    if log_std.shape == x.shape:
        base = neg(log_std)
    elif _is_rowvec(x, log_std):
        base = add(Tensor(np.zeros(x.shape)), neg(log_std))
    else:
        raise _shape_fail("gaussian_logprob", x.shape, log_std.shape)
    return add(add(mul(square(z), -0.5), base), Tensor(np.asarray(-0.5 * LOG_2PI)))


def kl_diag_gaussian(mu, log_std) -> Tensor:
    """KL(N(mu, sigma^2) || N(0, I)) summed over every entry."""
    mu, log_std = as_tensor(mu), as_tensor(log_std)
    if mu.shape != log_std.shape:
        raise _shape_fail("kl_diag_gaussian", mu.shape, log_std.shape)
    terms = sub(add(square(mu), exp(mul(log_std, 2.0))), mul(log_std, 2.0))
    return mul(sub(sum(terms), float(mu.data.size)), 0.5)


# ---------------------------------------------------------------------------
# parameters, init, optimisation


def orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def conv_uniform(rng: np.random.Generator, shape: tuple[int, int, int, int]) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray] | None = None) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` defaults to each parameter's ``.grad``. A parameter without a
    gradient is an error.
    """
    if grads is None:
        grads = {k: p.grad for k, p in params.items()}
    for name in params:
        if grads.get(name) is None:
            raise ValueError(f"adam_step: parameter '{name}' has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise _shape_fail(f"adam_step[{name}]", p.shape, g.shape)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(float(np.sum([np.sum(g * g) for g in grads.values()])))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return total


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
