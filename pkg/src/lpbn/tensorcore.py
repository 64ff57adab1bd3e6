"""Dense tensor arithmetic used throughout the package.

Tensors are plain ``numpy.ndarray`` objects.  The default compute precision is
float32; float64 inputs are carried through unchanged so that gradient checks
and loop oracles can run at double precision.

Two execution modes exist.  The default mode hands matrix products to BLAS.
Strict mode (``strict_mode()``) accumulates every inner product term by term in
a fixed order, which makes ``matmul`` and ``conv2d`` bit-identical to naive
loop implementations, and pins BLAS to a single thread.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from threadpoolctl import threadpool_limits

DEFAULT_DTYPE = np.float32

_state = threading.local()


class NonFiniteError(ValueError):
    """Raised when a public operation produces or receives NaN/Inf."""


def is_strict() -> bool:
    return getattr(_state, "strict", False)


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Sequential, fixed-order arithmetic for bit-exact tests."""
    previous = is_strict()
    _state.strict = enabled
    try:
        if enabled:
            with threadpool_limits(limits=1):
                yield
        else:
            yield
    finally:
        _state.strict = previous


@contextlib.contextmanager
def sequential():
    """Single-threaded BLAS; results are reproducible bit-for-bit across runs."""
    with threadpool_limits(limits=1):
        yield


def as_tensor(x, dtype=None) -> np.ndarray:
    t = np.asarray(x)
    if dtype is not None:
        return t.astype(dtype, copy=False)
    if t.dtype in (np.float32, np.float64):
        return t
    return t.astype(DEFAULT_DTYPE)


def check_finite(t: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(t)):
        bad = np.flatnonzero(~np.isfinite(np.ravel(t)))
        raise NonFiniteError(f"{what}: non-finite value at flat index {int(bad[0])}")
    return t


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator: numpy's PCG64, stable across platforms for a fixed seed."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    dtype = np.result_type(a, b)
    if not is_strict():
        return check_finite(a @ b, "matmul")
    # one rounding per product and per addition, k ascending: same as a triple loop
    out = np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return check_finite(out, "matmul")


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Rows are (batch, out_y, out_x); columns are (channel, ky, kx)."""
    b, c, h, w = x.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    cols = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)
    return cols, oh, ow


def col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = shape
    oh, ow = _out_size(h, kh, stride, pad), _out_size(w, kw, stride, pad)
    cols = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: np.ndarray, kernel: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding. ``x`` is (b,c,h,w), ``kernel`` is (o,c,kh,kw)."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {kernel.shape}")
    o, _, kh, kw = kernel.shape
    cols, oh, ow = im2col(x, kh, kw, stride, pad)
    out = matmul(cols, kernel.reshape(o, -1).T)
    return out.reshape(x.shape[0], oh, ow, o).transpose(0, 3, 1, 2)


def conv2d_backward(x, kernel, grad_out, stride=1, pad=0):
    """Returns (grad_input, grad_kernel) for ``conv2d(x, kernel, stride, pad)``."""
    o, _, kh, kw = kernel.shape
    cols, oh, ow = im2col(x, kh, kw, stride, pad)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_kernel = matmul(cols.T, g).T.reshape(kernel.shape)
    grad_cols = matmul(g, kernel.reshape(o, -1))
    return col2im(grad_cols, x.shape, kh, kw, stride, pad), grad_kernel


def reduce(t: np.ndarray, axes, kind: str = "mean", keepdims: bool = False):
    """Reduce over ``axes``. ``kind`` is mean, var (divide by n), sum, or max.

    For ``max`` the result is ``(values, indices)`` where indices address the
    flattened reduced axes.
    """
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    for ax in axes:
        if not -t.ndim <= ax < t.ndim:
            raise ValueError(f"axis {ax} out of range for shape {t.shape}")
    axes = tuple(sorted(ax % t.ndim for ax in axes))
    if any(t.shape[ax] == 0 for ax in axes):
        raise ValueError("empty reduction axis")
    if kind in ("mean", "var", "sum"):
        # float32 inputs accumulate in float64, then round once
        acc = np.float64 if t.dtype == np.float32 else None
        r = getattr(t, kind)(axis=axes, keepdims=keepdims, dtype=acc)
        return r.astype(t.dtype, copy=False) if acc else r
    if kind == "max":
        keep = [ax for ax in range(t.ndim) if ax not in axes]
        moved = np.moveaxis(t, keep + list(axes), range(t.ndim))
        flat = moved.reshape(moved.shape[: len(keep)] + (-1,))
        idx = flat.argmax(axis=-1)
        vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if keepdims:
            for ax in axes:
                vals = np.expand_dims(vals, ax)
                idx = np.expand_dims(idx, ax)
        return vals, idx
    raise ValueError(f"unknown reduction kind {kind!r}")


def _pool_windows(x, size, stride, pad, fill):
    b, c, h, w = x.shape
    oh, ow = _out_size(h, size, stride, pad), _out_size(w, size, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else x
    win = np.empty((b, c, oh, ow, size * size), dtype=x.dtype)
    for i in range(size):
        for j in range(size):
            win[..., i * size + j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return win


def max_pool2d(x, size, stride, pad=0):
    """Returns (output, argmax indices within each window)."""
    win = _pool_windows(x, size, stride, pad, -np.inf)
    idx = win.argmax(axis=-1)
    return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0], idx


def max_pool2d_backward(grad_out, idx, in_shape, size, stride, pad=0):
    b, c, h, w = in_shape
    oh, ow = grad_out.shape[2:]
    gp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for i in range(size):
        for j in range(size):
            sel = np.where(idx == i * size + j, grad_out, 0)
            gp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += sel
    return gp[:, :, pad : pad + h, pad : pad + w] if pad else gp


def avg_pool2d(x, size, stride, pad=0):
    # padding zeros count toward the window size
    return _pool_windows(x, size, stride, pad, 0.0).sum(axis=-1) / (size * size)


def avg_pool2d_backward(grad_out, in_shape, size, stride, pad=0):
    b, c, h, w = in_shape
    oh, ow = grad_out.shape[2:]
    share = grad_out / (size * size)
    gp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=grad_out.dtype)
    for i in range(size):
        for j in range(size):
            gp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += share
    return gp[:, :, pad : pad + h, pad : pad + w] if pad else gp
