"""IEEE binary16 helpers.

Half-precision values are carried around as ``uint16`` bit patterns. Every
half-precision operation widens to float32 (exact), computes there and rounds
back once with round-to-nearest-even, keeping subnormals and signed zero.

Two routes are provided: scalar pure-Python bit manipulation
(``float_to_half``/``half_to_float``) and vectorised numpy conversions. The
scalar pair does not touch numpy's float16 and is what tests use to check the
array path.
"""

from __future__ import annotations

import math

import numpy as np

HALF_MAX = 65504.0
HALF_MIN_NORMAL = 2.0**-14
HALF_MIN_SUBNORMAL = 2.0**-24

_POS_INF = 0x7C00
_QNAN = 0x7E00


def half_to_float(bits: int) -> float:
    """Value of a 16-bit pattern as a Python float (exact)."""
    bits &= 0xFFFF
    sign = -1.0 if bits & 0x8000 else 1.0
    exp = (bits >> 10) & 0x1F
    man = bits & 0x3FF
    if exp == 0x1F:
        return math.nan if man else sign * math.inf
    if exp == 0:
        return sign * math.ldexp(man, -24)
    return sign * math.ldexp(1024 + man, exp - 25)


def float_to_half(x: float) -> int:
    """Round ``x`` to the nearest binary16 pattern, ties to even."""
    if math.isnan(x):
        return _QNAN
    sign = 0x8000 if math.copysign(1.0, x) < 0 else 0
    a = abs(x)
    if a == 0.0:
        return sign
    if math.isinf(a):
        return sign | _POS_INF
    _, e = math.frexp(a)  # a = m * 2**e, m in [0.5, 1)
    unbiased = e - 1
    if unbiased < -14:
        q = round(math.ldexp(a, 24))  # subnormal quantum 2**-24
        return sign | q  # q == 1024 lands exactly on the smallest normal
    q = round(math.ldexp(a, 10 - unbiased))  # in [1024, 2048]
    bits = ((unbiased + 15) << 10) + q - 1024
    if bits >= _POS_INF:
        return sign | _POS_INF
    return sign | bits


def to_half_bits(values) -> np.ndarray:
    """Round an array of reals to binary16 patterns (RNE)."""
    with np.errstate(over="ignore"):
        return np.asarray(values).astype(np.float16).view(np.uint16)


def from_half_bits(bits) -> np.ndarray:
    """Widen binary16 patterns to float32 (exact)."""
    return np.asarray(bits, dtype=np.uint16).view(np.float16).astype(np.float32)


def half_mul(a_bits, b_bits) -> np.ndarray:
    """Elementwise product of two half arrays, single-rounded to half."""
    prod = from_half_bits(a_bits) * from_half_bits(b_bits)
    with np.errstate(over="ignore"):
        return prod.astype(np.float16).view(np.uint16)


def half_mul_scalar(a_bits: int, b_bits: int) -> int:
    """Pure-Python counterpart of :func:`half_mul` for one element.

    The product of two halves has at most 22 significant bits, so it is exact
    in float32 (and float64); one rounding to half is all that happens.
    """
    return float_to_half(half_to_float(a_bits) * half_to_float(b_bits))
