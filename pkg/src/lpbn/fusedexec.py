"""Multiplication-free Affine-ReLU-Linear execution on log-scale codes.

For an input feature i with affine parameters (a_i, b_i) and a weight w_ij,

    ReLU(a_i*q_i + b_i) * w_ij = (a_i w_ij) * q_i + (b_i w_ij)   when active, else 0.

With q_i = +-2**k the product (a_i w_ij) * q_i is an integer addition on the
float exponent field plus a sign-bit XOR.  Schemes with base sqrt(2) keep a
second copy of the products pre-multiplied by sqrt(2) and pick one by the
parity of the exponent.

Also here: folding eval-mode normalization into the preceding learnt layer.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quantizers as qz
from .normcore import DEFAULT_EPS, RunningStats

_FLOAT_LAYOUT = {
    np.dtype(np.float32): (np.int32, 23, 0xFF),
    np.dtype(np.float64): (np.int64, 52, 0x7FF),
}


# ---------------------------------------------------------------------------
# op counting
# ---------------------------------------------------------------------------


@dataclass
class OpCount:
    """Inner-product work. ``accumulate`` is the running-sum addition both paths share."""

    float_mul: int = 0
    float_add: int = 0
    int_add: int = 0
    accumulate: int = 0


class OpCounter:
    """Tallies elementwise ufunc work done on instrumented arrays, by kind and dtype."""

    def __init__(self):
        self.float_mul = 0
        self.float_add = 0
        self.int_add = 0
        self.other = 0

    def record(self, ufunc, dtype, n: int):
        name = ufunc.__name__
        floating = np.issubdtype(dtype, np.floating)
        if name in ("multiply", "divide", "true_divide") and floating:
            self.float_mul += n
        elif name in ("add", "subtract"):
            if floating:
                self.float_add += n
            else:
                self.int_add += n
        else:
            self.other += n

    def watch(self, arr: np.ndarray) -> np.ndarray:
        out = np.asarray(arr).view(_Counted)
        out.counter = self
        return out


class _Counted(np.ndarray):
    counter: OpCounter | None = None

    def __array_finalize__(self, obj):
        self.counter = getattr(obj, "counter", None)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        counter = next((x.counter for x in inputs if isinstance(x, _Counted) and x.counter), None)
        plain = [np.asarray(x).view(np.ndarray) if isinstance(x, _Counted) else x for x in inputs]
        if "out" in kwargs:
            kwargs["out"] = tuple(o.view(np.ndarray) if isinstance(o, _Counted) else o for o in kwargs["out"])
        result = getattr(ufunc, method)(*plain, **kwargs)
        if counter is not None:
            if method == "at":
                n = int(np.size(plain[2])) if len(plain) > 2 else int(np.size(plain[1]))
                dtype = np.result_type(plain[0])
            else:
                first = result[0] if isinstance(result, tuple) else result
                n, dtype = int(np.size(first)), np.result_type(first)
            counter.record(ufunc, dtype, n)
        if method == "at" or result is None:
            return result
        if isinstance(result, tuple):
            return tuple(counter.watch(r) if counter else r for r in result)
        return counter.watch(result) if counter and isinstance(result, np.ndarray) else result


def count_ops(mode: str, n_in: int, n_out: int, batch: int = 1, active=None) -> OpCount:
    """Analytic inner-product op counts for a dense layer.

    ``active`` is an optional (batch, n_in) boolean mask of inputs that pass the
    ReLU gate; by default every input is active.
    """
    if n_in < 0 or n_out < 0 or batch < 0:
        raise ValueError("dimensions must be non-negative")
    pairs = (batch * n_in if active is None else int(np.count_nonzero(active))) * n_out
    if mode == "naive":
        return OpCount(float_mul=pairs, accumulate=pairs)
    if mode == "fused":
        return OpCount(int_add=pairs, float_add=pairs, accumulate=pairs)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# exponent arithmetic
# ---------------------------------------------------------------------------


def scale_by_pow2(v, k, negate=None):
    """v * 2**k by adding k to the float exponent field.

    ``negate`` optionally flips signs through the sign bit.  Zeros stay zero.
    Non-normal inputs and results outside the normal range raise
    ``FloatingPointError``.  Scalars in, scalar out.
    """
    scalar = np.ndim(v) == 0 and np.ndim(k) == 0
    arr = np.asanyarray(v)
    if arr.dtype not in _FLOAT_LAYOUT:
        arr = arr.astype(np.float64)
    itype, mant, mask = _FLOAT_LAYOUT[arr.dtype]
    k = np.asarray(k)
    if np.any(np.abs(k) > mask):
        raise FloatingPointError("exponent shift out of range")
    bits = arr.view(itype)
    exp_field = (bits >> mant) & mask
    magnitude = bits & np.array(np.iinfo(itype).max, dtype=itype)
    zero = magnitude == 0
    if np.any(~zero & ((exp_field == 0) | (exp_field == mask))):
        raise FloatingPointError("scale_by_pow2 needs normal inputs")
    if negate is not None:
        bits = bits ^ (np.asarray(negate).astype(itype) << (8 * np.dtype(itype).itemsize - 1))
    out_bits = bits + (k.astype(itype) << mant)
    new_exp = (out_bits >> mant) & mask
    wrapped = (out_bits < 0) != (bits < 0)
    if np.any(~zero & (wrapped | (new_exp == 0) | (new_exp == mask))):
        raise FloatingPointError("scale_by_pow2 result leaves the normal float range")
    out = np.where(zero, bits, out_bits).view(arr.dtype)
    return out.item() if scalar else out


# ---------------------------------------------------------------------------
# fused layer
# ---------------------------------------------------------------------------


@dataclass
class FusedLayerSpec:
    scheme: qz.QuantScheme
    aw: np.ndarray  # (in, out) a_i * w_ij
    bw: np.ndarray  # (in, out) b_i * w_ij
    threshold: np.ndarray  # (in,) -b_i/a_i, nan where a_i == 0
    direction: np.ndarray  # (in,) +1: active when q > threshold, -1: when q < threshold, 0: constant
    active_table: np.ndarray  # (in, n_codes) exact ReLU gate per code
    aw_sqrt2: np.ndarray | None = None  # (in, out) aw * sqrt(2), for sqrt(2)-base schemes
    code_shift: np.ndarray = field(default=None)  # per code: power-of-two shift
    code_negative: np.ndarray = field(default=None)  # per code: sign bit
    code_companion: np.ndarray = field(default=None)  # per code: use aw_sqrt2


def fuse_affine_relu_linear(a, b, W, scheme="L4") -> FusedLayerSpec:
    """Precompute products, thresholds and per-code gates for the fused path."""
    s = qz.get_scheme(scheme)
    if not s.is_log:
        raise ValueError(f"fused execution needs a log-scale scheme, got {s.id}")
    W = np.asarray(W)
    dtype = W.dtype if W.dtype in _FLOAT_LAYOUT else np.float64
    W = W.astype(dtype, copy=False)
    a = np.asarray(a, dtype=dtype).reshape(-1)
    b = np.asarray(b, dtype=dtype).reshape(-1)
    if W.ndim != 2 or a.size != W.shape[0] or b.size != W.shape[0]:
        raise ValueError(f"affine size {a.size}/{b.size} does not match weight shape {W.shape}")

    aw = a[:, None] * W
    bw = b[:, None] * W
    with np.errstate(divide="ignore", invalid="ignore"):
        threshold = np.where(a != 0, -b / a, np.nan)
    direction = np.sign(a).astype(np.int8)

    # gate evaluated the way the float path does it, once per (input, code)
    values = qz.codebook(s).astype(dtype)
    active_table = (a[:, None] * values[None, :] + b[:, None]) > 0

    signs, exps = qz._sqrt2_exponents(s.id)
    companion = exps % 2 != 0
    shift = (exps - companion) // 2
    aw_sqrt2 = aw * np.asarray(qz.SQRT2, dtype=dtype) if companion.any() else None
    return FusedLayerSpec(
        s, aw, bw, threshold, direction, active_table, aw_sqrt2,
        code_shift=shift.astype(np.int32), code_negative=signs < 0, code_companion=companion,
    )


def _codes_2d(codes) -> np.ndarray:
    if isinstance(codes, qz.PackedCodes):
        arr = codes.codes().reshape(codes.shape)
    else:
        arr = np.asarray(codes)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def fused_forward(codes, spec: FusedLayerSpec, counter: OpCounter | None = None) -> np.ndarray:
    """Evaluate ReLU(a*q + b) @ W from codes using only exponent and float additions.

    ``codes`` is a PackedCodes (shape (batch, in) or (in,)) or an integer array.
    Accumulation runs over inputs in ascending order for each output.
    """
    if isinstance(codes, qz.PackedCodes) and codes.scheme != spec.scheme:
        raise ValueError(f"codes use {codes.scheme.id}, layer was fused for {spec.scheme.id}")
    c = _codes_2d(codes).astype(np.intp)
    if c.shape[1] != spec.aw.shape[0]:
        raise ValueError(f"got {c.shape[1]} input codes for a layer with {spec.aw.shape[0]} inputs")

    aw, bw, aw2 = spec.aw, spec.bw, spec.aw_sqrt2
    if counter is not None:
        aw, bw = counter.watch(aw), counter.watch(bw)
        aw2 = counter.watch(aw2) if aw2 is not None else None

    gate = spec.active_table[np.arange(c.shape[1])[None, :], c]
    rows, cols = np.nonzero(gate)
    pc = c[rows, cols]
    base = aw[cols]
    if aw2 is not None:
        pick = spec.code_companion[pc]
        base[pick] = aw2[cols[pick]]
    scaled = scale_by_pow2(base, spec.code_shift[pc][:, None], negate=spec.code_negative[pc][:, None])
    terms = scaled + bw[cols]

    out = np.zeros((c.shape[0], spec.aw.shape[1]), dtype=spec.aw.dtype)
    np.add.at(out, rows, terms)
    return out


def naive_forward(q, a, b, W, counter: OpCounter | None = None) -> np.ndarray:
    """Reference float path ReLU(a*q + b) @ W, products formed per active pair."""
    q = np.atleast_2d(q)
    h = np.maximum(a[None, :] * q + b[None, :], 0)
    Wc = counter.watch(W) if counter is not None else W
    rows, cols = np.nonzero(h > 0)
    terms = h[rows, cols][:, None] * Wc[cols]
    out = np.zeros((q.shape[0], W.shape[1]), dtype=W.dtype)
    np.add.at(out, rows, terms)
    return out


def expanded_forward(q, a, b, W, counter: OpCounter | None = None) -> np.ndarray:
    """Float path in the distributed form (a_i w_ij) q_i + b_i w_ij per active pair.

    Same gate and accumulation order as ``fused_forward`` but with genuine float
    multiplications by q; the fused path must reproduce it bit for bit.
    """
    q = np.atleast_2d(q)
    W = np.asarray(W)
    aw, bw = a[:, None] * W, b[:, None] * W
    if counter is not None:
        aw = counter.watch(aw)
    rows, cols = np.nonzero(a[None, :] * q + b[None, :] > 0)
    terms = aw[cols] * q[rows, cols][:, None] + bw[cols]
    out = np.zeros((q.shape[0], W.shape[1]), dtype=W.dtype)
    np.add.at(out, rows, terms)
    return out


# ---------------------------------------------------------------------------
# folding
# ---------------------------------------------------------------------------


def fold_norm_into_learnt(W, bias, running: RunningStats, eps: float = DEFAULT_EPS):
    """Fold eval-mode normalization of a layer's output into the layer itself.

    ``W`` is (in, out) for a linear layer or (out, c, kh, kw) for a conv layer;
    the returned layer emits (y - mean) / sqrt(var + eps) directly.
    """
    if running is None or not running.populated:
        raise ValueError("running statistics are not populated")
    sigma = np.sqrt(np.asarray(running.var, dtype=np.float64) + eps)
    if np.any(sigma == 0):
        raise ZeroDivisionError("zero standard deviation for some feature")
    W = np.asarray(W)
    if W.ndim == 2:
        W_f = W / sigma[None, :]
    elif W.ndim == 4:
        W_f = W / sigma[:, None, None, None]
    else:
        raise ValueError(f"unsupported weight shape {W.shape}")
    bias_f = (np.asarray(bias) - running.mean) / sigma
    return W_f.astype(W.dtype), bias_f.astype(W.dtype)
