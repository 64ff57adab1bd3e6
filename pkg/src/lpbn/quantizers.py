"""Activation and gradient quantizers with bit-packed storage.

Each scheme maps a real number to one of ``2**bits`` representable values.
The log schemes (L2, L3, L4, L5) produce signed powers of 2 or of sqrt(2);
U4/U5/U8 are uniform grids offset by half a step; O4 is a shifted log grid
with base 1.29.  GRAD8 is the 8-bit gradient set ``{+-2**(k/2) : k=-127..0}``.

Codes index the ascending codebook, so code 0 is always the most negative
value.  Packed buffers store codes little-endian within and across bytes.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensorcore import NonFiniteError

SQRT2 = math.sqrt(2.0)  # nearest double above sqrt(2): m >= SQRT2 <=> m >= sqrt(2) exactly


@dataclass(frozen=True)
class QuantScheme:
    id: str
    bits: int
    kind: str  # log | uniform | other | gradient
    scale: float  # 1.034 / 1.316 / 1.36 / 1.177, uniform step count s, or alpha for O4
    lo: int  # clamp range of the integer exponent / step index
    hi: int
    half_base: bool = False  # exponent counted in powers of sqrt(2)
    half_offset: bool = False  # exponent carries +1/2 (L2)
    code_id: int = 0  # scheme byte in the on-disk packed form

    @property
    def is_log(self) -> bool:
        return self.kind == "log"

    def __str__(self):
        return self.id


SCHEMES: dict[str, QuantScheme] = {
    s.id: s
    for s in (
        QuantScheme("L2", 2, "log", 1.034, -1, 0, half_offset=True, code_id=0),
        QuantScheme("L3", 3, "log", 1.316, -1, 2, code_id=1),
        QuantScheme("L4", 4, "log", 1.36, -3, 4, code_id=2),
        QuantScheme("L5", 5, "log", 1.177, -6, 9, half_base=True, code_id=3),
        QuantScheme("U4", 4, "uniform", 2.0, -8, 7, code_id=4),
        QuantScheme("U5", 5, "uniform", 3.0, -16, 15, code_id=5),
        QuantScheme("U8", 8, "uniform", 8.0, -128, 127, code_id=6),
        QuantScheme("O4", 4, "other", 1.29, 0, 7, code_id=7),
        QuantScheme("GRAD8", 8, "gradient", 1.0, -127, 0, half_base=True, code_id=8),
    )
}
ACTIVATION_SCHEMES = ("L2", "L3", "L4", "L5", "U4", "U5", "U8", "O4")
_BY_CODE_ID = {s.code_id: s for s in SCHEMES.values()}


def get_scheme(scheme) -> QuantScheme:
    if isinstance(scheme, QuantScheme):
        return scheme
    try:
        return SCHEMES[str(scheme).upper()]
    except KeyError:
        raise ValueError(f"unknown quantization scheme {scheme!r}; expected one of {sorted(SCHEMES)}") from None


# ---------------------------------------------------------------------------
# codebooks
# ---------------------------------------------------------------------------


def _pow_sqrt2(e: int) -> float:
    """sqrt(2)**e with a single rounding."""
    return math.ldexp(1.0, e // 2) if e % 2 == 0 else math.ldexp(SQRT2, (e - 1) // 2)


def _magnitudes(s: QuantScheme) -> np.ndarray:
    ks = range(s.lo, s.hi + 1)
    if s.kind in ("log", "gradient"):
        if s.half_offset:  # 2**(1/2 + k)
            return np.array([_pow_sqrt2(2 * k + 1) for k in ks])
        if s.half_base:
            return np.array([_pow_sqrt2(k) for k in ks])
        return np.array([math.ldexp(1.0, k) for k in ks])
    if s.kind == "other":
        return np.array([s.scale ** (k + 0.5) - 1.0 for k in ks])
    raise AssertionError(s.kind)


@lru_cache(maxsize=None)
def _codebook(scheme_id: str) -> np.ndarray:
    s = SCHEMES[scheme_id]
    if s.kind == "uniform":
        values = (0.5 + np.arange(s.lo, s.hi + 1)) / s.scale
    else:
        mags = _magnitudes(s)
        values = np.concatenate([-mags[::-1], mags])
    values.setflags(write=False)
    assert values.size == 2**s.bits
    return values


def codebook(scheme) -> np.ndarray:
    """Ascending float64 array of every representable value of ``scheme``."""
    return _codebook(get_scheme(scheme).id)


@dataclass(frozen=True)
class ExponentCode:
    """A log-scheme value written as ``sign * base**k``."""

    sign: int
    k: int
    base: float

    @property
    def value(self) -> float:
        return self.sign * (_pow_sqrt2(self.k) if self.base != 2.0 else math.ldexp(1.0, self.k))


@lru_cache(maxsize=None)
def _sqrt2_exponents(scheme_id: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-code (sign, e) with value == sign * sqrt(2)**e."""
    s = SCHEMES[scheme_id]
    if s.kind not in ("log", "gradient"):
        raise ValueError(f"{scheme_id} is not a log-scale scheme")
    ks = np.arange(s.lo, s.hi + 1)
    if s.half_offset:
        e = 2 * ks + 1
    elif s.half_base:
        e = ks
    else:
        e = 2 * ks
    signs = np.concatenate([-np.ones(e.size, dtype=np.int8), np.ones(e.size, dtype=np.int8)])
    exps = np.concatenate([e[::-1], e]).astype(np.int32)
    return signs, exps


def exponent_code(scheme, code: int) -> ExponentCode:
    s = get_scheme(scheme)
    signs, exps = _sqrt2_exponents(s.id)
    e = int(exps[code])
    if s.half_base or s.half_offset:
        return ExponentCode(int(signs[code]), e, SQRT2)
    return ExponentCode(int(signs[code]), e // 2, 2.0)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------


def floor_log2(y: np.ndarray) -> np.ndarray:
    """floor(log2 y) for positive normal float64 values, read off the exponent field.

    Zero and subnormals report -1023, which every scheme clamps away.
    """
    bits = np.asarray(y, dtype=np.float64).view(np.uint64)
    return ((bits >> np.uint64(52)) & np.uint64(0x7FF)).astype(np.int64) - 1023


def _mantissa(y: np.ndarray) -> np.ndarray:
    """y / 2**floor(log2 y), in [1, 2), by overwriting the exponent field."""
    bits = np.asarray(y, dtype=np.float64).view(np.uint64)
    bits = (bits & np.uint64(0x000FFFFFFFFFFFFF)) | np.uint64(0x3FF0000000000000)
    return bits.view(np.float64)


def floor_log_sqrt2(y: np.ndarray) -> np.ndarray:
    """floor(log_sqrt2 y) = 2*floor(log2 y) + [mantissa >= sqrt 2]."""
    e = floor_log2(y)
    return 2 * e + (_mantissa(y) >= SQRT2)


def _check_finite(x: np.ndarray):
    if not np.all(np.isfinite(x)):
        idx = int(np.flatnonzero(~np.isfinite(x.ravel()))[0])
        raise NonFiniteError(f"non-finite input at flat index {idx}")


def quantize_codes(scheme, x) -> np.ndarray:
    """Elementwise codes (uint8) of ``x`` under ``scheme``. sign(0) counts as +1."""
    s = get_scheme(scheme)
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x)
    if s.kind == "uniform":
        j = np.clip(np.floor(s.scale * x), s.lo, s.hi)
        return (j - s.lo).astype(np.uint8)
    if s.kind == "gradient" and np.any(x == 0):
        raise ValueError("zero has no GRAD8 code; use quantize_gradient for gradients")
    if s.kind == "other":
        k = np.floor(np.log1p(np.abs(x)) / math.log(s.scale))
    else:
        y = np.abs(s.scale * x)
        k = floor_log_sqrt2(y) if s.half_base else floor_log2(y)
    idx = np.clip(k, s.lo, s.hi).astype(np.int64) - s.lo
    half = 2 ** (s.bits - 1)
    return np.where(x < 0, half - 1 - idx, half + idx).astype(np.uint8)


def quantize_array(scheme, x, dtype=None) -> tuple[np.ndarray, np.ndarray]:
    """(codes, values) for every element; values are in ``dtype`` (default: x's float dtype)."""
    x = np.asarray(x)
    codes = quantize_codes(scheme, x)
    if dtype is None:
        dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    return codes, codebook(scheme).astype(dtype)[codes]


def quantize_value(scheme, x: float) -> tuple[int, float]:
    code = int(quantize_codes(scheme, np.array([x]))[0])
    return code, float(codebook(scheme)[code])


def quantize_gradient(g):
    """Map gradients onto {0} U {+-2**(k/2) : k = -127..0}.

    Exact zeros pass through; magnitudes at or above 1 saturate at 1.
    Accepts scalars or arrays, returning the same kind.
    """
    arr = np.asarray(g)
    work = arr.astype(np.float64)
    _check_finite(work)
    k = np.clip(floor_log_sqrt2(np.abs(work)), -127, 0)
    mags = np.ldexp(np.where(k % 2 == 0, 1.0, SQRT2), (k - (k % 2)) // 2)
    out = np.where(work == 0, 0.0, np.copysign(mags, work))
    if np.ndim(g) == 0:
        return float(out)
    return out.astype(arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64)


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack integer codes, ``bits`` each, little-endian within and across bytes."""
    codes = np.asarray(codes, dtype=np.uint8).ravel()
    if codes.size and int(codes.max()) >= 1 << bits:
        raise ValueError(f"code does not fit in {bits} bits")
    bitplanes = np.unpackbits(codes[:, None], axis=1, count=bits, bitorder="little")
    return np.packbits(bitplanes.ravel(), bitorder="little").tobytes()


def unpack_codes(buf: bytes, count: int, bits: int) -> np.ndarray:
    need = math.ceil(count * bits / 8)
    if len(buf) < need:
        raise ValueError(f"truncated buffer: {len(buf)} bytes, need {need} for {count} codes")
    flat = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=need), bitorder="little")
    planes = flat[: count * bits].reshape(count, bits)
    return np.packbits(planes, axis=1, bitorder="little")[:, 0]


@dataclass(frozen=True)
class PackedCodes:
    scheme: QuantScheme
    count: int
    buffer: bytes
    shape: tuple = ()

    @property
    def nbytes(self) -> int:
        return len(self.buffer)

    def codes(self) -> np.ndarray:
        return unpack_codes(self.buffer, self.count, self.scheme.bits)

    def to_bytes(self) -> bytes:
        """1 byte scheme id, 8-byte little-endian count, then the bit buffer."""
        return struct.pack("<BQ", self.scheme.code_id, self.count) + self.buffer

    @classmethod
    def from_bytes(cls, data: bytes, shape=None) -> "PackedCodes":
        if len(data) < 9:
            raise ValueError("truncated header")
        scheme_id, count = struct.unpack_from("<BQ", data)
        if scheme_id not in _BY_CODE_ID:
            raise ValueError(f"unknown scheme id {scheme_id}")
        scheme = _BY_CODE_ID[scheme_id]
        buf = data[9:]
        need = math.ceil(count * scheme.bits / 8)
        if len(buf) != need:
            raise ValueError(f"buffer holds {len(buf)} bytes, expected {need}")
        return cls(scheme, count, bytes(buf), tuple(shape) if shape is not None else (count,))


def pack(scheme, codes: np.ndarray) -> PackedCodes:
    s = get_scheme(scheme)
    codes = np.asarray(codes)
    return PackedCodes(s, int(codes.size), pack_codes(codes, s.bits), codes.shape)


def quantize_tensor(scheme, t) -> PackedCodes:
    """Quantize every element (row-major order) and pack the codes."""
    return pack(scheme, quantize_codes(scheme, t))


def dequantize(p: PackedCodes, dtype=np.float32) -> np.ndarray:
    values = codebook(p.scheme).astype(dtype)[p.codes()]
    return values.reshape(p.shape) if p.shape else values
