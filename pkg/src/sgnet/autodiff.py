"""N-dimensional tensors with reverse-mode automatic differentiation.

Values live in contiguous numpy buffers (float32 by default, float64 under
``precision("float64")`` for verification).  Every differentiable operation
records its inputs and a backward closure; ``grad``/``backward`` walk the
resulting graph in reverse topological order.

Backward closures are written in terms of the same differentiable primitives,
so calling ``grad(..., create_graph=True)`` yields gradients that are
themselves graph-connected.  That recursion is what powers second-order
quantities (gradients of saliency-map losses w.r.t. model parameters) without
a dedicated higher-order mode: masks from relu/maxpool/dropout are captured as
constants, which is the usual double-backprop convention.

Shapes follow the (batch, channels, *spatial) layout throughout.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor", "GradientMap", "as_tensor", "precision", "default_dtype",
    "no_grad", "checked", "is_checked", "grad", "backward", "detach",
    "add", "sub", "mul", "div", "neg", "matmul", "reshape", "flatten",
    "transpose2", "moveaxis", "flip", "getitem", "relu", "exp", "log",
    "sqrt", "absolute", "clip", "tsum", "tmean", "softmax", "dense",
    "dropout", "conv_same", "correlate", "maxpool", "batchnorm",
    "BatchNormState", "l1_diff", "sum_squares", "finite_diff_check",
]

_DTYPE: np.dtype = np.dtype(np.float32)
_GRAD_ENABLED: bool = True
_CHECK_FINITE: bool = False


def default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the element type ("float32" or "float64")."""
    global _DTYPE
    new = np.dtype(name)
    if new not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported element type {name!r}")
    old = _DTYPE
    _DTYPE = new
    try:
        yield
    finally:
        _DTYPE = old


def set_default_dtype(name: str) -> None:
    """Process-wide variant of ``precision`` (used by the CLI's --f64 flag)."""
    global _DTYPE
    new = np.dtype(name)
    if new not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported element type {name!r}")
    _DTYPE = new


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def _grad_mode(flag: bool):
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = flag
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def checked(flag: bool = True):
    """Enable NaN/Inf screening after every primitive (off by default)."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = flag
    try:
        yield
    finally:
        _CHECK_FINITE = old


def is_checked() -> bool:
    return _CHECK_FINITE


class Tensor:
    """A numpy buffer plus optional linkage into the differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_bwd", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # ndarrays already in a supported float type are adopted as-is so a
        # float64 graph keeps its precision regardless of the global default
        if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable | None = None

    # -- inspection ------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad_tag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DTYPE))


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor with no graph linkage; gradients stop here."""
    return Tensor(x.data)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced by a primitive op")
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed element types in one op: {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# broadcast helpers
# ---------------------------------------------------------------------------

def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def _broadcast_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    data = np.broadcast_to(g.data, shape)

    def bwd(og, needs):
        return (_sum_to(og, g.shape),) if needs[0] else (None,)

    return _node(np.ascontiguousarray(data), (g,), bwd)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)

    def bwd(g, needs):
        return (
            _sum_to(g, a.shape) if needs[0] else None,
            _sum_to(g, b.shape) if needs[1] else None,
        )

    return _node(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)

    def bwd(g, needs):
        return (
            _sum_to(g, a.shape) if needs[0] else None,
            _sum_to(neg(g), b.shape) if needs[1] else None,
        )

    return _node(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)

    def bwd(g, needs):
        return (
            _sum_to(mul(g, b), a.shape) if needs[0] else None,
            _sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _node(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)

    def bwd(g, needs):
        ga = _sum_to(div(g, b), a.shape) if needs[0] else None
        gb = _sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _node(a.data / b.data, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, needs):
        return (neg(g),) if needs[0] else (None,)

    return _node(-a.data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g, needs):
        return (mul(g, Tensor(out_data)),) if needs[0] else (None,)

    return _node(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g, needs):
        return (div(g, a),) if needs[0] else (None,)

    return _node(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        # d sqrt(x) = 0.5 / sqrt(x); recompute through `a` to stay graph-linked
        return (mul(g, mul(Tensor(np.asarray(0.5, a.data.dtype)), div(Tensor(np.ones((), a.data.dtype)), sqrt(a)))),)

    return _node(out_data, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(a.data.dtype)

    def bwd(g, needs):
        # mask treated as locally constant (double-backprop convention)
        return (mul(g, Tensor(mask)),) if needs[0] else (None,)

    return _node(a.data * mask, (a,), bwd)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def bwd(g, needs):
        return (mul(g, Tensor(sign)),) if needs[0] else (None,)

    return _node(np.abs(a.data), (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    mask = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def bwd(g, needs):
        return (mul(g, Tensor(mask)),) if needs[0] else (None,)

    return _node(np.clip(a.data, lo, hi), (a,), bwd)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def bwd(g, needs):
        return (reshape(g, a.shape),) if needs[0] else (None,)

    return _node(a.data.reshape(shape), (a,), bwd)


def flatten(a) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1) if a.ndim > 1 else a.shape)


def transpose2(a) -> Tensor:
    """Swap the first two axes."""
    a = as_tensor(a)

    def bwd(g, needs):
        return (transpose2(g),) if needs[0] else (None,)

    return _node(np.ascontiguousarray(np.swapaxes(a.data, 0, 1)), (a,), bwd)


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = as_tensor(a)

    def bwd(g, needs):
        return (moveaxis(g, dst, src),) if needs[0] else (None,)

    return _node(np.ascontiguousarray(np.moveaxis(a.data, src, dst)), (a,), bwd)


def flip(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)

    def bwd(g, needs):
        return (flip(g, axes),) if needs[0] else (None,)

    return _node(np.ascontiguousarray(np.flip(a.data, axes)), (a,), bwd)


def getitem(a, idx) -> Tensor:
    """Basic (slice/integer) indexing; gradient scatters back into zeros."""
    a = as_tensor(a)
    out_data = a.data[idx]

    def bwd(g, needs):
        return (_scatter(g, idx, a.shape),) if needs[0] else (None,)

    return _node(np.ascontiguousarray(out_data), (a,), bwd)


def _scatter(g: Tensor, idx, shape: tuple[int, ...]) -> Tensor:
    data = np.zeros(shape, dtype=g.data.dtype)
    data[idx] = g.data

    def bwd(og, needs):
        return (getitem(og, idx),) if needs[0] else (None,)

    return _node(data, (g,), bwd)


# ---------------------------------------------------------------------------
# reductions and linear algebra
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g, needs):
        if not needs[0]:
            return (None,)
        if axis is None:
            return (_broadcast_to(reshape(g, (1,) * a.ndim), a.shape),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        if keepdims:
            return (_broadcast_to(g, a.shape),)
        kept = [1 if i in axes else s for i, s in enumerate(a.shape)]
        return (_broadcast_to(reshape(g, kept), a.shape),)

    return _node(np.asarray(out_data), (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.ndim] for ax in axes]))
    total = tsum(a, axis=axis, keepdims=keepdims)
    return mul(total, Tensor(np.asarray(1.0 / count, a.data.dtype)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def bwd(g, needs):
        ga = matmul(g, transpose2(b)) if needs[0] else None
        gb = matmul(transpose2(a), g) if needs[1] else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), bwd)


def dense(x, w, b) -> Tensor:
    """Affine map: (batch, f_in) @ (f_in, f_out) + bias."""
    return add(matmul(x, w), b)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = np.max(a.data, axis=axis, keepdims=True)  # constant; cancels in the ratio
    e = exp(sub(a, Tensor(shift)))
    return div(e, tsum(e, axis=axis, keepdims=True))


def sum_squares(a) -> Tensor:
    a = as_tensor(a)
    return tsum(mul(a, a))


def l1_diff(a, b, axis=None) -> Tensor:
    """Sum of absolute elementwise differences (optionally per-axis)."""
    return tsum(absolute(sub(a, b)), axis=axis)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Training-mode Bernoulli mask scaled by 1/(1-p); identity otherwise."""
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {p}")
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _corr_value(xd: np.ndarray, wd: np.ndarray, pb: tuple[int, ...], pa: tuple[int, ...]) -> np.ndarray:
    r = xd.ndim - 2
    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple(zip(pb, pa))) if any(pb) or any(pa) else xd
    k = wd.shape[2:]
    out_sp = tuple(xp.shape[2 + i] - k[i] + 1 for i in range(r))
    cols = _kernels.extract_patches(xp, k)  # (B, *out, C, *k)
    mat = cols.reshape(xd.shape[0] * int(np.prod(out_sp)), -1) @ wd.reshape(wd.shape[0], -1).T
    out = mat.reshape((xd.shape[0],) + out_sp + (wd.shape[0],))
    return np.ascontiguousarray(np.moveaxis(out, -1, 1))


def correlate(x, w, pad_before: Sequence[int], pad_after: Sequence[int]) -> Tensor:
    """Stride-1 cross-correlation of (B, C, *S) with kernels (O, C, *K).

    Zero-pads each spatial axis by (pad_before, pad_after).  Both gradients
    are themselves correlations, so the op is differentiable to any order.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_same_dtype(x, w)
    r = x.ndim - 2
    if r not in (1, 2, 3):
        raise ShapeError(f"correlate supports 1-3 spatial axes, got input shape {x.shape}")
    if w.ndim != x.ndim:
        raise ShapeError(f"kernel rank {w.ndim} does not match input rank {x.ndim}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"kernel expects {w.shape[1]} channels, input has {x.shape[1]}")
    pb, pa = tuple(pad_before), tuple(pad_after)
    k = w.shape[2:]
    for ext, kk, b, a_ in zip(x.shape[2:], k, pb, pa):
        if ext + b + a_ < kk:
            raise ShapeError(f"spatial extent {ext} too small for kernel {kk} with padding {(b, a_)}")

    def bwd(g, needs):
        gx = gw = None
        if needs[0]:
            wf = transpose2(flip(w, tuple(range(2, 2 + r))))
            gx = correlate(g, wf, [kk - 1 - b for kk, b in zip(k, pb)],
                           [kk - 1 - a_ for kk, a_ in zip(k, pa)])
        if needs[1]:
            gw = transpose2(correlate(transpose2(x), transpose2(g), pb, pa))
        return gx, gw

    return _node(_corr_value(x.data, w.data, pb, pa), (x, w), bwd)


def conv_same(x, kernel, bias) -> Tensor:
    """Multi-channel stride-1 convolution padded to preserve spatial extents.

    Even kernel extents pad asymmetrically: floor((k-1)/2) before, ceil after.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    r = x.ndim - 2
    if r not in (2, 3):
        raise ShapeError(f"conv_same expects 2 or 3 spatial axes, got input shape {x.shape}")
    if bias.size != kernel.shape[0]:
        raise ShapeError(f"bias length {bias.size} != {kernel.shape[0]} output channels")
    k = kernel.shape[2:]
    pb = [(kk - 1) // 2 for kk in k]
    pa = [kk // 2 for kk in k]
    out = correlate(x, kernel, pb, pa)
    return add(out, reshape(bias, (1, -1) + (1,) * r))


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool(x, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; odd trailing elements are dropped.

    Gradient routes to the argmax position of each window only (first
    occurrence on ties).
    """
    x = as_tensor(x)
    r = x.ndim - 2
    if r < 1:
        raise ShapeError(f"maxpool needs at least one spatial axis, got shape {x.shape}")
    spatial = x.shape[2:]
    if any(s < window for s in spatial):
        raise ShapeError(f"spatial extents {spatial} smaller than pooling window {window}")
    even = tuple(s - s % window for s in spatial)
    idx = (slice(None), slice(None)) + tuple(slice(0, e) for e in even)
    cropped = getitem(x, idx) if even != spatial else x
    return _pool_max(cropped, window)


def _pool_max(x: Tensor, window: int) -> Tensor:
    out_data, arg = _kernels.pool_forward(x.data, window)

    def bwd(g, needs):
        return (_pool_scatter(g, arg, x.shape, window),) if needs[0] else (None,)

    return _node(out_data, (x,), bwd)


def _pool_scatter(g: Tensor, arg: np.ndarray, in_shape: tuple[int, ...], window: int) -> Tensor:
    data = _kernels.pool_scatter(g.data, arg, in_shape, window)

    def bwd(og, needs):
        return (_pool_gather(og, arg, window),) if needs[0] else (None,)

    return _node(data, (g,), bwd)


def _pool_gather(g: Tensor, arg: np.ndarray, window: int) -> Tensor:
    data = _kernels.pool_gather(g.data, arg, window)

    def bwd(og, needs):
        return (_pool_scatter(og, arg, g.shape, window),) if needs[0] else (None,)

    return _node(data, (g,), bwd)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running per-channel statistics, updated by exponential moving average."""

    __slots__ = ("mean", "var")

    def __init__(self, channels: int, dtype=None):
        dt = dtype or _DTYPE
        self.mean = np.zeros(channels, dtype=dt)
        self.var = np.ones(channels, dtype=dt)

    def copy(self) -> "BatchNormState":
        out = BatchNormState(len(self.mean), dtype=self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


_BN_EPS = 1e-5
_BN_MOMENTUM = 0.9


def batchnorm(x, scale, shift, state: BatchNormState, training: bool,
              update_stats: bool | None = None) -> Tensor:
    """Per-channel normalization over batch+spatial axes.

    Training mode normalizes with batch statistics (epsilon floor 1e-5) and,
    when ``update_stats``, folds them into the running averages with momentum
    0.9.  Inference mode normalizes with the running statistics.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(
            f"scale/shift length must match {channels} channels, got {scale.shape}/{shift.shape}")
    if update_stats is None:
        update_stats = training
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, channels) + (1,) * (x.ndim - 2)
    eps = Tensor(np.asarray(_BN_EPS, x.data.dtype))
    if training:
        mu = tmean(x, axis=axes, keepdims=True)
        centered = sub(x, mu)
        var = tmean(mul(centered, centered), axis=axes, keepdims=True)
        xhat = div(centered, sqrt(add(var, eps)))
        if update_stats:
            # population (biased) batch variance feeds the running average so
            # inference converges to training-mode output on a repeated batch
            with no_grad():
                state.mean *= _BN_MOMENTUM
                state.mean += (1.0 - _BN_MOMENTUM) * mu.data.reshape(channels)
                state.var *= _BN_MOMENTUM
                state.var += (1.0 - _BN_MOMENTUM) * var.data.reshape(channels)
        return add(mul(xhat, reshape(scale, bshape)), reshape(shift, bshape))
    # inference: fold the constant running stats into a per-channel affine map
    # (two large elementwise ops; channel-sized arithmetic stays tiny)
    rm = Tensor(state.mean.astype(x.data.dtype))
    rv = Tensor(state.var.astype(x.data.dtype))
    a = div(scale, sqrt(add(rv, eps)))
    b = sub(shift, mul(rm, a))
    return add(mul(x, reshape(a, bshape)), reshape(b, bshape))


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before consumers


def grad(output: Tensor, wrt: Iterable[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    Unreachable targets get zero gradients.  With ``create_graph`` the
    returned tensors are graph-connected and can be differentiated again.
    """
    wrt = list(wrt)
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"loss must be scalar, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape, dtype=output.data.dtype))
    order = _topo(output)
    wanted = {id(t): i for i, t in enumerate(wrt)}

    relevant: set[int] = set()
    for node in order:  # parents-first: relevance propagates upward
        if id(node) in wanted or any(id(p) in relevant for p in node._parents):
            relevant.add(id(node))

    results: list[Tensor | None] = [None] * len(wrt)
    grads: dict[int, Tensor] = {id(output): grad_output}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                i = wanted[id(node)]
                results[i] = g if results[i] is None else add(results[i], g)
            if node._bwd is None:
                continue
            needs = tuple(p.requires_grad and id(p) in relevant for p in node._parents)
            if not any(needs):
                continue
            pgrads = node._bwd(g, needs)
            for p, pg in zip(node._parents, pgrads):
                if pg is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    for i, t in enumerate(wrt):
        if results[i] is None:
            results[i] = Tensor(np.zeros(t.shape, dtype=t.data.dtype))
        if results[i].shape != t.shape:
            raise ShapeError(f"gradient shape {results[i].shape} != variable shape {t.shape}")
    return results  # type: ignore[return-value]


class GradientMap:
    """Associates graph leaves with their gradients (identity-keyed)."""

    def __init__(self, pairs: list[tuple[Tensor, Tensor]]):
        self._refs = [t for t, _ in pairs]
        self._by_id = {id(t): g for t, g in pairs}

    def __getitem__(self, t: Tensor) -> Tensor:
        return self._by_id[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def tensors(self) -> list[Tensor]:
        return list(self._refs)


def backward(loss: Tensor, create_graph: bool = False) -> GradientMap:
    """Gradients of a scalar loss w.r.t. every requires_grad leaf it touches."""
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    leaves = [n for n in _topo(loss) if n._bwd is None and n.requires_grad]
    gs = grad(loss, leaves, create_graph=create_graph)
    return GradientMap(list(zip(leaves, gs)))


# ---------------------------------------------------------------------------
# verification harness
# ---------------------------------------------------------------------------

def finite_diff_check(fn: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      floor: float = 1e-6) -> float:
    """Max relative error between backward() and central finite differences.

    Perturbs every element of ``x``; requires the float64 element type because
    the subtraction eats roughly half the mantissa at h=1e-5.
    """
    if x.data.dtype != np.float64:
        raise ContractError("finite_diff_check requires the float64 element type")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = fn(probe)
    if out.size != 1:
        raise ContractError("finite_diff_check expects a scalar-valued function")
    g = grad(out, [probe])[0].data
    fd = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    fd_flat = fd.reshape(-1)
    # probes keep recording enabled and requires_grad set: fn may take
    # gradients internally (higher-order checks)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(Tensor(x.data.copy(), requires_grad=True)).item()
        flat[i] = orig - h
        lo = fn(Tensor(x.data.copy(), requires_grad=True)).item()
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(g)), floor)
    return float(np.max(np.abs(fd - g) / denom))
