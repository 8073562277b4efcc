"""Hot value-level kernels: patch extraction for convolution and 2-per-axis
max pooling.

Each kernel has a numba-jitted fast path and a pure-numpy fallback producing
bit-identical results (same element order feeding the same GEMM), so the
engine stays deterministic regardless of which path runs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a soft dependency
    numba = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# patch extraction: padded input -> (B, *out_spatial, C, *kernel) contiguous
# ---------------------------------------------------------------------------

def extract_patches_np(xp: np.ndarray, k: tuple[int, ...]) -> np.ndarray:
    r = xp.ndim - 2
    view = sliding_window_view(xp, k, axis=tuple(range(2, 2 + r)))
    return np.ascontiguousarray(np.moveaxis(view, 1, 1 + r))


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _patches2d(xp, out, H, W, kh, kw):  # pragma: no cover - jitted
        B, C = xp.shape[0], xp.shape[1]
        for b in range(B):
            for i in range(H):
                for j in range(W):
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                out[b, i, j, c, p, q] = xp[b, c, i + p, j + q]

    @numba.njit(cache=True)
    def _patches3d(xp, out, D, H, W, kd, kh, kw):  # pragma: no cover - jitted
        B, C = xp.shape[0], xp.shape[1]
        for b in range(B):
            for d in range(D):
                for i in range(H):
                    for j in range(W):
                        for c in range(C):
                            for s in range(kd):
                                for p in range(kh):
                                    for q in range(kw):
                                        out[b, d, i, j, c, s, p, q] = xp[b, c, d + s, i + p, j + q]


def extract_patches(xp: np.ndarray, k: tuple[int, ...]) -> np.ndarray:
    r = xp.ndim - 2
    if not HAVE_NUMBA or r not in (2, 3):
        return extract_patches_np(xp, k)
    out_sp = tuple(xp.shape[2 + i] - k[i] + 1 for i in range(r))
    out = np.empty((xp.shape[0],) + out_sp + (xp.shape[1],) + k, dtype=xp.dtype)
    if r == 2:
        _patches2d(xp, out, out_sp[0], out_sp[1], k[0], k[1])
    else:
        _patches3d(xp, out, out_sp[0], out_sp[1], out_sp[2], k[0], k[1], k[2])
    return out


# ---------------------------------------------------------------------------
# max pooling, window 2 per spatial axis; args hold the flat in-window index
# (row-major within the window, first occurrence wins ties)
# ---------------------------------------------------------------------------

def _block_view(data: np.ndarray, window: int) -> np.ndarray:
    """(B, C, w*h1, ...) -> (B, C, h1, ..., window**r) preserving window order."""
    r = data.ndim - 2
    shape = data.shape
    split = [shape[0], shape[1]]
    for s in shape[2:]:
        split.extend([s // window, window])
    v = data.reshape(split)
    order = [0, 1] + [2 + 2 * i for i in range(r)] + [3 + 2 * i for i in range(r)]
    v = np.ascontiguousarray(v.transpose(order))
    return v.reshape(v.shape[: 2 + r] + (window ** r,))


def _unblock(blocks: np.ndarray, out_shape: tuple[int, ...], window: int) -> np.ndarray:
    r = len(out_shape) - 2
    pooled = out_shape[:2] + tuple(s // window for s in out_shape[2:])
    v = blocks.reshape(pooled + (window,) * r)
    order = [0, 1]
    for i in range(r):
        order.extend([2 + i, 2 + r + i])
    return np.ascontiguousarray(v.transpose(order).reshape(out_shape))


def pool_forward_np(x: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    blocks = _block_view(x, window)
    args = blocks.argmax(axis=-1).astype(np.int8)
    vals = np.take_along_axis(blocks, args[..., None].astype(np.int64), axis=-1)[..., 0]
    return np.ascontiguousarray(vals), args


def pool_scatter_np(g: np.ndarray, args: np.ndarray, in_shape: tuple[int, ...],
                    window: int) -> np.ndarray:
    r = len(in_shape) - 2
    blocks = np.zeros(g.shape + (window ** r,), dtype=g.dtype)
    np.put_along_axis(blocks, args[..., None].astype(np.int64), g[..., None], axis=-1)
    return _unblock(blocks, in_shape, window)


def pool_gather_np(g: np.ndarray, args: np.ndarray, window: int) -> np.ndarray:
    blocks = _block_view(g, window)
    return np.ascontiguousarray(
        np.take_along_axis(blocks, args[..., None].astype(np.int64), axis=-1)[..., 0])


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _pool2d_fwd(x, vals, args):  # pragma: no cover - jitted
        B, C, Ho, Wo = vals.shape
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        best = x[b, c, 2 * i, 2 * j]
                        bi = 0
                        v = x[b, c, 2 * i, 2 * j + 1]
                        if v > best:
                            best = v
                            bi = 1
                        v = x[b, c, 2 * i + 1, 2 * j]
                        if v > best:
                            best = v
                            bi = 2
                        v = x[b, c, 2 * i + 1, 2 * j + 1]
                        if v > best:
                            best = v
                            bi = 3
                        vals[b, c, i, j] = best
                        args[b, c, i, j] = bi

    @numba.njit(cache=True)
    def _pool2d_scatter(g, args, out):  # pragma: no cover - jitted
        B, C, Ho, Wo = g.shape
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        bi = args[b, c, i, j]
                        out[b, c, 2 * i + bi // 2, 2 * j + bi % 2] = g[b, c, i, j]

    @numba.njit(cache=True)
    def _pool2d_gather(g, args, out):  # pragma: no cover - jitted
        B, C, Ho, Wo = out.shape
        for b in range(B):
            for c in range(C):
                for i in range(Ho):
                    for j in range(Wo):
                        bi = args[b, c, i, j]
                        out[b, c, i, j] = g[b, c, 2 * i + bi // 2, 2 * j + bi % 2]

    @numba.njit(cache=True)
    def _pool3d_fwd(x, vals, args):  # pragma: no cover - jitted
        B, C, Do, Ho, Wo = vals.shape
        for b in range(B):
            for c in range(C):
                for d in range(Do):
                    for i in range(Ho):
                        for j in range(Wo):
                            best = x[b, c, 2 * d, 2 * i, 2 * j]
                            bi = 0
                            n = 0
                            for dd in range(2):
                                for pp in range(2):
                                    for qq in range(2):
                                        v = x[b, c, 2 * d + dd, 2 * i + pp, 2 * j + qq]
                                        if v > best:
                                            best = v
                                            bi = n
                                        n += 1
                            vals[b, c, d, i, j] = best
                            args[b, c, d, i, j] = bi

    @numba.njit(cache=True)
    def _pool3d_scatter(g, args, out):  # pragma: no cover - jitted
        B, C, Do, Ho, Wo = g.shape
        for b in range(B):
            for c in range(C):
                for d in range(Do):
                    for i in range(Ho):
                        for j in range(Wo):
                            bi = args[b, c, d, i, j]
                            out[b, c, 2 * d + bi // 4, 2 * i + (bi // 2) % 2, 2 * j + bi % 2] = \
                                g[b, c, d, i, j]

    @numba.njit(cache=True)
    def _pool3d_gather(g, args, out):  # pragma: no cover - jitted
        B, C, Do, Ho, Wo = out.shape
        for b in range(B):
            for c in range(C):
                for d in range(Do):
                    for i in range(Ho):
                        for j in range(Wo):
                            bi = args[b, c, d, i, j]
                            out[b, c, d, i, j] = \
                                g[b, c, 2 * d + bi // 4, 2 * i + (bi // 2) % 2, 2 * j + bi % 2]


def _use_fast(x: np.ndarray, window: int) -> bool:
    return HAVE_NUMBA and window == 2 and x.ndim in (4, 5)


def pool_forward(x: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    if not _use_fast(x, window):
        return pool_forward_np(x, window)
    pooled = x.shape[:2] + tuple(s // 2 for s in x.shape[2:])
    vals = np.empty(pooled, dtype=x.dtype)
    args = np.empty(pooled, dtype=np.int8)
    (_pool2d_fwd if x.ndim == 4 else _pool3d_fwd)(x, vals, args)
    return vals, args


def pool_scatter(g: np.ndarray, args: np.ndarray, in_shape: tuple[int, ...],
                 window: int) -> np.ndarray:
    if not _use_fast(g, window):
        return pool_scatter_np(g, args, in_shape, window)
    out = np.zeros(in_shape, dtype=g.dtype)
    (_pool2d_scatter if g.ndim == 4 else _pool3d_scatter)(g, args, out)
    return out


def pool_gather(g: np.ndarray, args: np.ndarray, window: int) -> np.ndarray:
    if not _use_fast(g, window):
        return pool_gather_np(g, args, window)
    pooled = args.shape
    out = np.empty(pooled, dtype=g.dtype)
    (_pool2d_gather if g.ndim == 4 else _pool3d_gather)(g, args, out)
    return out
