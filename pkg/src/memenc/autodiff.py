"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph once in reverse topological order
and then releases it, so a second call on the same loss is an error.

Shapes are strict: binary elementwise ops require identical shapes, except
``add``/``sub`` which also accept an operand whose shape equals the other's
trailing dimensions (the bias-add case).  Anything else must go through an
explicit :func:`expand`.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "tensor",
    "matmul",
    "softmax",
    "tanh",
    "gelu",
    "exp",
    "log",
    "layernorm",
    "bilinear_sample",
    "avgmaxpool",
    "concat",
    "expand",
    "take_rows",
    "clip",
    "xlogx",
    "scaled_dot_product_attention",
    "mse_loss",
]

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, double backward)."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "op")
    __array_priority__ = 1000  # keep numpy from hijacking reflected operators

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --------------------------------------------------------------- backward
    def backward(self) -> None:
        """Populate ``.grad`` on every tracked tensor reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward(); rebuild it")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor with requires_grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True
        self._consumed = True

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # convenience method forms
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)

    def expand(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return expand(self, shape)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _is_suffix(small: tuple[int, ...], big: tuple[int, ...]) -> bool:
    return len(small) < len(big) and big[len(big) - len(small):] == small


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead else g


# -------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _lift(a)
        return _make(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and not (_is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape)):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} are not equal or trailing-compatible")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return add(a, -float(b))
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and not (_is_suffix(b.shape, a.shape) or _is_suffix(a.shape, b.shape)):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} are not equal or trailing-compatible")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        a = _lift(a)
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ; use expand() explicitly")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), backward, "gelu")


def xlogx(a: Tensor) -> Tensor:
    """Elementwise ``x ln x`` with the convention ``0 ln 0 = 0``."""
    x = a.data
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    out = np.where(pos, x * np.log(safe), 0.0)
    return _make(out, (a,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),), "xlogx")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------ linear
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported forms: ``[..., m, k] @ [k, n]`` (shared right matrix) and
    ``[..., m, k] @ [..., k, n]`` with identical leading dims.  A 1-D left
    operand is treated as a single row.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[-1],))
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb

        return _make(ad @ bd, (a, b), backward, "matmul")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")

    def backward_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward_batched, "bmm")


# -------------------------------------------------------------- reductions
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(tsum(a, axes, keepdims), 1.0 / count)


# ----------------------------------------------------------------- shaping
def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 (or missing leading) dims to ``shape``."""
    shape = tuple(int(s) for s in shape)
    old = a.shape
    lead = len(shape) - len(old)
    if lead < 0 or any(o != 1 and o != s for o, s in zip(old, shape[lead:])):
        raise ShapeError(f"expand: cannot broadcast {old} to {shape}")
    axes = tuple(range(lead)) + tuple(lead + i for i, o in enumerate(old) if o == 1 and shape[lead + i] != 1)

    def backward(g):
        return (np.sum(g, axis=axes).reshape(old) if axes else g,)

    return _make(np.broadcast_to(a.data, shape), (a,), backward, "expand")


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    advanced = _has_advanced(idx)

    def backward(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward, "getitem")


def _has_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[ax] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def take_rows(weight: Tensor, index) -> Tensor:
    """Embedding lookup: ``weight[index]`` with scatter-add backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = weight.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(weight.data[index], (weight,), backward, "take_rows")


# ------------------------------------------------------------ nonlinear ops
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("softmax received non-finite input")
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (a,), backward, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} must be ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd, bd = gamma.data, beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return dx, np.sum(flat_g * xhat.reshape(-1, d), axis=0), flat_g.sum(axis=0)

    return _make(xhat * gd + bd, (x, gamma, beta), backward, "layernorm")


def _interp_matrices(u: np.ndarray, height: int, width: int):
    """Dense bilinear weights ``S`` and their derivatives w.r.t. u,

    each of shape [N, height*width] (align-corners convention).
    """
    n = u.shape[0]
    x = (u[:, 0] + 1.0) * 0.5 * (width - 1)
    y = (u[:, 1] + 1.0) * 0.5 * (height - 1)
    x0 = np.clip(np.floor(x), 0, max(width - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(y), 0, max(height - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0 if width > 1 else np.zeros(n)
    fy = y - y0 if height > 1 else np.zeros(n)

    rows = np.repeat(np.arange(n), 4)
    cols = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1).reshape(-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1).reshape(-1)
    dwx = np.stack([-(1 - fy), (1 - fy), -fy, fy], axis=1).reshape(-1)
    dwy = np.stack([-(1 - fx), -fx, (1 - fx), fx], axis=1).reshape(-1)

    cells = height * width
    s = np.zeros((n, cells))
    sx = np.zeros((n, cells))
    sy = np.zeros((n, cells))
    np.add.at(s, (rows, cols), w)
    np.add.at(sx, (rows, cols), dwx)
    np.add.at(sy, (rows, cols), dwy)
    return s, sx * (0.5 * (width - 1)), sy * (0.5 * (height - 1))


def bilinear_sample(grid: Tensor, u: Tensor) -> Tensor:
    """Sample ``grid[..., H, W, C]`` at normalized locations ``u``.

    ``u`` is ``[2]`` or ``[N, 2]`` with ``u[:, 0]`` along W and ``u[:, 1]``
    along H, both in [-1, 1]; -1/+1 hit the corner cells exactly.  Returns
    ``[..., C]`` or ``[..., N, C]``.
    """
    single = u.ndim == 1
    ud = u.data.reshape(1, 2) if single else u.data
    if ud.ndim != 2 or ud.shape[1] != 2:
        raise ShapeError(f"bilinear_sample: u must be [2] or [N, 2], got {u.shape}")
    if grid.ndim < 3:
        raise ShapeError(f"bilinear_sample: grid must be [..., H, W, C], got {grid.shape}")
    if np.any(np.abs(ud) > 1.0):
        raise ValueError("bilinear_sample: u outside [-1, 1]; clamp before sampling")
    *lead, height, width, ch = grid.shape
    s, sx, sy = _interp_matrices(ud, height, width)
    flat = grid.data.reshape(*lead, height * width, ch)
    out = s @ flat

    gshape = grid.shape

    def backward(g):
        n = ud.shape[0]
        g2 = g.reshape(*lead, n, ch)
        g_grid = (s.T @ g2).reshape(gshape)
        # corr[n, k] = sum over batch and channels of g[., n, .] * grid[., k, .]
        gl = np.moveaxis(g2.reshape(-1, n, ch), 1, 0).reshape(n, -1)
        fl = np.moveaxis(flat.reshape(-1, height * width, ch), 1, 0).reshape(height * width, -1)
        corr = gl @ fl.T
        g_u = np.stack([np.sum(sx * corr, axis=1), np.sum(sy * corr, axis=1)], axis=1)
        return g_grid, g_u.reshape(u.shape)

    if single:
        out = out.reshape(*lead, ch)
    return _make(out, (grid, u), backward, "bilinear_sample")


def avgmaxpool(m: Tensor) -> Tensor:
    """Global average pool concatenated with global max pool: [..., H, W, C] -> [..., 2C]."""
    if m.ndim < 3:
        raise ShapeError(f"avgmaxpool: expected [..., H, W, C], got {m.shape}")
    *lead, height, width, ch = m.shape
    cells = height * width
    flat = m.data.reshape(*lead, cells, ch)
    avg = flat.mean(axis=-2)
    arg = np.argmax(flat, axis=-2)  # first occurrence in row-major order
    mx = np.take_along_axis(flat, arg[..., None, :], axis=-2)[..., 0, :]
    mshape = m.shape

    def backward(g):
        g_avg = g[..., :ch]
        g_max = g[..., ch:]
        full = np.broadcast_to(g_avg[..., None, :] / cells, flat.shape).copy()
        # add the max branch at the argmax cell only
        picked = np.take_along_axis(full, arg[..., None, :], axis=-2) + g_max[..., None, :]
        np.put_along_axis(full, arg[..., None, :], picked, axis=-2)
        return (full.reshape(mshape),)

    return _make(np.concatenate([avg, mx], axis=-1), (m,), backward, "avgmaxpool")


# ------------------------------------------------------------- composites
def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the last two axes, built from primitives."""
    d = q.shape[-1]
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, axes)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _lift(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return tmean(diff * diff)


# ------------------------------------------------------------ grad checking
def numerical_grad(fn: Callable[[], Tensor], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``arr`` (mutated in place, restored)."""
    out = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    with no_grad():
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + h
            fp = fn().item()
            arr[i] = orig - h
            fm = fn().item()
            arr[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, floor: float = 1e-6) -> float:
    """Max elementwise relative error between backprop and finite differences.

    The error of element i is ``|a_i - n_i| / max(|a_i|, |n_i|, floor)``.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t.data, h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
