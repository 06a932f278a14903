"""Dense float64 tensors with a reverse-mode autodiff graph.

Only the primitives the aligner needs are provided. Every primitive records a
closure mapping the output gradient to one gradient per parent; ``backward``
replays those closures in reverse creation order, which is a valid
topological order because a node is always created after its inputs.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from saa.errors import ContractError, DimensionError, NumericalError

#: additive bias used for masked attention positions; finite on purpose
MASK_VALUE = -1e9

_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Run a block without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seen = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        for p in node._parents:
            if p.requires_grad and p._id not in seen:
                stack.append(p)
    grads = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(seen, reverse=True):
        node = seen[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold the batch axes into one product
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, (a, b), fn)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # two-branch form keeps exp from overflowing for large |x|
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


# -- shape manipulation -----------------------------------------------------
def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError("reshape", src, tuple(shape)) from None
    return _make(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape
    basic = _is_basic_index(idx)

    def fn(g):
        out = np.zeros(src)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError("concat", *[t.shape for t in tensors])
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=ax)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError("stack", *[t.shape for t in tensors])
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(out, tensors, lambda g: tuple(np.moveaxis(g, axis, 0)[i] for i in range(n)))


# -- reductions -------------------------------------------------------------
def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    lse = m + np.log(np.sum(np.exp(d - m), axis=axis, keepdims=True))
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(d - lse),)

    return _make(out, (x,), fn)


# -- normalization / attention pieces --------------------------------------
def softmax(x: Tensor, bias=None, axis: int = -1) -> Tensor:
    """Softmax of ``x + bias`` along ``axis``; ``bias`` is an additive mask."""
    if bias is not None:
        x = add(x, bias)
    d = x.data
    e = np.exp(d - np.max(d, axis=axis, keepdims=True))
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    m = np.max(d, axis=axis, keepdims=True)
    lse = m + np.log(np.sum(np.exp(d - m), axis=axis, keepdims=True))
    y = d - lse
    return _make(y, (x,), lambda g: (g - np.exp(y) * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale and shift.

    A zero-variance row normalizes to exactly zero before the affine part.
    """
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError("layer_norm", x.shape, gamma.shape, beta.shape)
    d = x.data
    centered = d - d.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    gd = gamma.data

    def fn(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(xhat * gd + beta.data, (x, gamma, beta), fn)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- lookups ----------------------------------------------------------------
def embedding(ids, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise DimensionError("embedding", ids.shape, table.shape)
    rows = table.shape

    def fn(g):
        out = np.zeros(rows)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, rows[1]))
        return (out,)

    return _make(table.data[ids], (table,), fn)


def gather(x: Tensor, idx, axis: int = -1) -> Tensor:
    """``take_along_axis``; repeated indices accumulate in the gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != x.ndim:
        raise DimensionError("gather", x.shape, idx.shape)
    src = x.shape
    ax = axis % x.ndim

    def fn(g):
        out = np.zeros(src)
        grid = list(np.indices(idx.shape, sparse=True))
        grid[ax] = idx
        np.add.at(out, tuple(grid), g)
        return (out,)

    return _make(np.take_along_axis(x.data, idx, axis=ax), (x,), fn)


def nll_gather(log_probs: Tensor, targets, mask=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``log_probs`` rows."""
    t = np.asarray(targets, dtype=np.int64)[..., None]
    picked = gather(log_probs, t)[..., 0]
    if mask is not None:
        picked = mul(picked, np.asarray(mask, dtype=np.float64))
    return neg(sum_(picked))


# -- convolution / pooling --------------------------------------------------
def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=(1, 1)) -> Tensor:
    """Zero same-padded 2-D convolution on channels-last input.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout). Output spatial size is
    ceil(size / stride); the first output element is centred on input 0.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError("conv2d", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[3],):
        raise DimensionError("conv2d", w.shape, b.shape)
    B, H, W, _ = x.shape
    kh, kw, cin, cout = w.shape
    sh, sw = stride
    Ho, Wo = -(-H // sh), -(-W // sw)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    Hp, Wp = (Ho - 1) * sh + kh, (Wo - 1) * sw + kw
    xp = np.zeros((B, max(Hp, H + ph), max(Wp, W + pw), cin))
    xp[:, ph:ph + H, pw:pw + W] = x.data
    wd = w.data
    cols = np.empty((B, Ho, Wo, kh, kw, cin))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw]
    cols = cols.reshape(-1, kh * kw * cin)
    w2 = wd.reshape(-1, cout)
    out = (cols @ w2).reshape(B, Ho, Wo, cout)
    if b is not None:
        out += b.data

    def fn(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wd.shape)
        gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += gcols[:, :, :, i, j]
        grads = [gxp[:, ph:ph + H, pw:pw + W], gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, fn)


def max_pool_time(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping max pooling over axis 1 with window == stride.

    A trailing partial window pools over the elements it has.
    """
    if x.ndim != 3:
        raise DimensionError("max_pool_time", x.shape)
    B, U, D = x.shape
    Uo = -(-U // stride)
    padded = np.full((B, Uo * stride, D), -np.inf)
    padded[:, :U] = x.data
    win = padded.reshape(B, Uo, stride, D)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def fn(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[:, :, None, :], g[:, :, None, :], axis=2)
        return (gw.reshape(B, Uo * stride, D)[:, :U],)

    return _make(out, (x,), fn)


def primitive_set() -> dict:
    """Name -> callable for every differentiable primitive."""
    return {
        "matmul": matmul, "add": add, "multiply": mul, "concat": concat,
        "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax,
        "log_softmax": log_softmax, "layer_norm": layer_norm, "embedding": embedding,
        "conv2d": conv2d, "max_pool_time": max_pool_time, "dropout": dropout,
        "logsumexp": logsumexp, "sum": sum_, "mean": mean, "nll_gather": nll_gather,
        "gather": gather, "getitem": getitem, "reshape": reshape, "transpose": transpose,
        "stack": stack, "exp": exp, "log": log, "neg": neg,
    }


# -- finite-difference checking --------------------------------------------
@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-4,
    tol: Optional[float] = None,
    floor: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    The per-coordinate error is |a - n| / max(|a|, |n|, floor); the floor keeps
    coordinates with near-zero gradient from reporting pure rounding noise.
    ``x`` is perturbed in place and restored. When ``tol`` is given a failing
    check raises ``NumericalError``.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    out = f(x)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    analytic = x.grad.copy()
    x.requires_grad = was
    x.grad = np.zeros_like(x.data) if was else None

    coords = list(np.ndindex(x.shape))
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = None
    with no_grad():
        for c in coords:
            orig = x.data[c]
            x.data[c] = orig + step
            fp = f(x).item()
            x.data[c] = orig - step
            fm = f(x).item()
            x.data[c] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"grad_check: non-finite value of f at coordinate {c}")
            num = (fp - fm) / (2 * step)
            a = analytic[c]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            if worst is None or err > worst.max_rel_error:
                worst = GradCheckReport(err, c, float(a), float(num), len(coords))
    if worst is None:
        worst = GradCheckReport(0.0, (), 0.0, 0.0, 0)
    if tol is not None and not worst.passed(tol):
        raise NumericalError(
            f"grad_check: relative error {worst.max_rel_error:.3e} at {worst.worst_index} "
            f"(analytic {worst.analytic:.6e}, numeric {worst.numeric:.6e})"
        )
    return worst
