"""Batch normalization split into normalization N and affine transform A.

Training stores only a quantized copy of N(x) (packed codes) plus per-feature
statistics.  The affine output and the backward pass both use the dequantized
values, so the forward computation and the gradient see the same numbers.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quantizers as qz
from .tensorcore import check_finite, reduce

DEFAULT_EPS = 1e-5


def stat_axes(x: np.ndarray) -> tuple[int, ...]:
    """Axes reduced per feature: batch for (b, f); batch and space for (b, c, h, w)."""
    if x.ndim == 2:
        return (0,)
    if x.ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"batch norm expects a 2-D or 4-D tensor, got shape {x.shape}")


def _bshape(x: np.ndarray) -> tuple[int, ...]:
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


@dataclass
class NormStats:
    mean: np.ndarray
    var: np.ndarray
    eps: float = DEFAULT_EPS
    inv_std: np.ndarray = field(init=False)

    def __post_init__(self):
        if np.any(self.var < 0):
            raise ValueError("negative variance")
        self.inv_std = 1.0 / np.sqrt(self.var + self.eps)
        check_finite(self.inv_std, "inv_std")

    @property
    def nbytes(self) -> int:
        return self.mean.nbytes + self.var.nbytes


@dataclass
class BNParams:
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def identity(cls, features: int, dtype=np.float32) -> "BNParams":
        return cls(np.ones(features, dtype=dtype), np.zeros(features, dtype=dtype))


@dataclass
class BNSavedState:
    """What training keeps for one BN module: packed N(x) (or N(x) itself in fp32 mode)."""

    stats: NormStats
    shape: tuple
    dtype: np.dtype
    packed: qz.PackedCodes | None = None
    n_full: np.ndarray | None = None

    @property
    def scheme(self):
        return self.packed.scheme if self.packed is not None else None

    def values(self) -> np.ndarray:
        """The normalized values as used by forward and backward."""
        if self.packed is not None:
            return qz.dequantize(self.packed, self.dtype).reshape(self.shape)
        return self.n_full

    @property
    def activation_bytes(self) -> int:
        return self.packed.nbytes if self.packed is not None else self.n_full.nbytes

    @property
    def nbytes(self) -> int:
        return self.activation_bytes + self.stats.nbytes


@dataclass
class RunningStats:
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float | None = 0.1  # None: cumulative average over all updates
    count: int = 0

    def __post_init__(self):
        if self.momentum is not None and not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")

    @property
    def populated(self) -> bool:
        return self.mean is not None and self.var is not None

    def update(self, stats: NormStats):
        self.count += 1
        if not self.populated:
            self.mean, self.var = stats.mean.copy(), stats.var.copy()
            return
        m = 1.0 / self.count if self.momentum is None else self.momentum
        self.mean = (1 - m) * self.mean + m * stats.mean
        self.var = (1 - m) * self.var + m * stats.var


def normalize_forward(x: np.ndarray, eps: float = DEFAULT_EPS) -> tuple[np.ndarray, NormStats]:
    axes = stat_axes(x)
    count = int(np.prod([x.shape[a] for a in axes]))
    if count < 2:
        raise ValueError("cannot normalize: fewer than 2 values per feature")
    check_finite(x, "normalize_forward input")
    mean = reduce(x, axes, "mean")
    var = reduce(x, axes, "var")
    stats = NormStats(mean, var, eps)
    n = (x - mean.reshape(_bshape(x))) * stats.inv_std.reshape(_bshape(x))
    return n.astype(x.dtype, copy=False), stats


def _quantize_normalized(n: np.ndarray, scheme) -> tuple[np.ndarray, qz.PackedCodes | None]:
    if scheme is None:
        return n, None
    codes, q = qz.quantize_array(scheme, n, dtype=n.dtype)
    return q, qz.pack(scheme, codes)


def bn_forward_train(x, params: BNParams, scheme=None, eps: float = DEFAULT_EPS, running: RunningStats | None = None):
    """y = a*q + b with q = Q(N(x)) (or q = N(x) when ``scheme`` is None)."""
    n, stats = normalize_forward(x, eps)
    q, packed = _quantize_normalized(n, scheme)
    y = params.a.reshape(_bshape(x)) * q + params.b.reshape(_bshape(x))
    if running is not None:
        running.update(stats)
    saved = BNSavedState(stats, x.shape, x.dtype, packed, None if packed is not None else n)
    return check_finite(y, "bn_forward_train"), saved


def norm_backward(saved: BNSavedState, grad_n: np.ndarray) -> np.ndarray:
    """Gradient through N, with the stored (possibly quantized) values in place of N(x)."""
    if saved is None:
        raise ValueError("missing saved state")
    q = saved.values()
    axes = stat_axes(q)
    bs = _bshape(q)
    centred = grad_n - grad_n.mean(axis=axes).reshape(bs)
    grad_x = (centred - q * (q * grad_n).mean(axis=axes).reshape(bs)) * saved.stats.inv_std.reshape(bs)
    return grad_x.astype(saved.dtype, copy=False)


def bn_backward(saved: BNSavedState, params: BNParams, grad_y: np.ndarray):
    """Returns (grad_x, grad_a, grad_b)."""
    if saved is None:
        raise ValueError("missing saved state")
    if grad_y.shape != tuple(saved.shape):
        raise ValueError(f"grad_y shape {grad_y.shape} does not match saved shape {saved.shape}")
    q = saved.values()
    axes = stat_axes(q)
    grad_a = (grad_y * q).sum(axis=axes)
    grad_b = grad_y.sum(axis=axes)
    grad_n = params.a.reshape(_bshape(q)) * grad_y
    return norm_backward(saved, grad_n), grad_a, grad_b


def normalize_eval(x, running: RunningStats, eps: float = DEFAULT_EPS) -> np.ndarray:
    if running is None or not running.populated:
        raise ValueError("running statistics are not populated")
    bs = _bshape(x)
    inv = 1.0 / np.sqrt(running.var + eps)
    return ((x - running.mean.reshape(bs)) * inv.reshape(bs)).astype(x.dtype, copy=False)


def bn_forward_eval(x, params: BNParams, running: RunningStats, scheme=None, eps: float = DEFAULT_EPS):
    n = normalize_eval(x, running, eps)
    q, _ = _quantize_normalized(n, scheme)
    bs = _bshape(x)
    return check_finite(params.a.reshape(bs) * q + params.b.reshape(bs), "bn_forward_eval")
