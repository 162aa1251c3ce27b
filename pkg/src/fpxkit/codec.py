"""Scalar minifloat arithmetic and row-wise quantization.

A minifloat ("FPx") here has one sign bit, ``exp_bits`` exponent bits and
``man_bits`` mantissa bits laid out ``S|E|M`` from the most significant bit.
There are no infinities or NaNs: the all-ones exponent is an ordinary binade.

``dequantize_reference`` is the semantic ground truth for every bit-level path
in the package.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidCodeError,
    InvalidFormatError,
    InvalidValueError,
    LayoutError,
    ScaleOverflowError,
)
from .half import HALF_MAX, from_half_bits, to_half_bits

TILE = 64
HALF_BIAS = 15


@dataclass(frozen=True)
class FpxFormat:
    exp_bits: int
    man_bits: int

    def __post_init__(self) -> None:
        if not 1 <= self.exp_bits <= 5:
            raise InvalidFormatError(f"exp_bits must be in 1..5, got {self.exp_bits}")
        if not 0 <= self.man_bits <= 6:
            raise InvalidFormatError(f"man_bits must be in 0..6, got {self.man_bits}")
        if not 3 <= self.total_bits <= 8:
            raise InvalidFormatError(
                f"1+E+M must be in 3..8, got {self.total_bits} for {self.name}"
            )

    @classmethod
    def parse(cls, name: str) -> "FpxFormat":
        """Build a format from a name such as ``"e3m2"``."""
        m = re.fullmatch(r"\s*e(\d)m(\d)\s*", name.lower())
        if m is None:
            raise InvalidFormatError(f"cannot parse format name {name!r}; expected eXmY")
        return cls(int(m.group(1)), int(m.group(2)))

    @property
    def name(self) -> str:
        return f"e{self.exp_bits}m{self.man_bits}"

    @property
    def total_bits(self) -> int:
        return 1 + self.exp_bits + self.man_bits

    @property
    def bias(self) -> int:
        return 2 ** (self.exp_bits - 1) - 1

    @property
    def n_codes(self) -> int:
        return 1 << self.total_bits

    @property
    def sign_mask(self) -> int:
        return 1 << (self.total_bits - 1)

    @property
    def max_code(self) -> int:
        """Largest positive code (all exponent and mantissa bits set)."""
        return self.sign_mask - 1

    @property
    def max_value(self) -> float:
        top = (1 << self.exp_bits) - 1
        return math.ldexp(2.0 - math.ldexp(1.0, -self.man_bits), top - self.bias)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, 1 - self.bias)

    @property
    def half_exponent_shift(self) -> int:
        """Power of two restored after a bias-deferred cast to half."""
        return HALF_BIAS - self.bias

    def __str__(self) -> str:
        return self.name


E3M2 = FpxFormat(3, 2)
E2M3 = FpxFormat(2, 3)
E2M2 = FpxFormat(2, 2)
E3M1 = FpxFormat(3, 1)
E2M0 = FpxFormat(2, 0)
FP6 = E3M2


# ---------------------------------------------------------------------------
# Scalar encode / decode
# ---------------------------------------------------------------------------


def decode_scalar(code: int, fmt: FpxFormat = E3M2) -> float:
    code = int(code)
    if not 0 <= code < fmt.n_codes:
        raise InvalidCodeError(f"code {code} out of range for {fmt.name}")
    sign = -1.0 if code & fmt.sign_mask else 1.0
    exp = (code >> fmt.man_bits) & ((1 << fmt.exp_bits) - 1)
    man = code & ((1 << fmt.man_bits) - 1)
    if exp == 0:
        return sign * math.ldexp(man, 1 - fmt.bias - fmt.man_bits)
    return sign * math.ldexp((1 << fmt.man_bits) + man, exp - fmt.bias - fmt.man_bits)


def encode_scalar(value: float, fmt: FpxFormat = E3M2) -> int:
    """Nearest code to ``value``; ties go to the even mantissa, overflow saturates."""
    value = float(value)
    if math.isnan(value):
        raise InvalidValueError("cannot encode NaN")
    sign = fmt.sign_mask if math.copysign(1.0, value) < 0 else 0
    a = abs(value)
    if a >= fmt.max_value:
        return sign | fmt.max_code
    M = fmt.man_bits
    if a < fmt.min_normal:
        # subnormal grid; q == 2**M is the smallest normal code
        return sign | round(math.ldexp(a, fmt.bias - 1 + M))
    unbiased = math.frexp(a)[1] - 1
    q = round(math.ldexp(a, M - unbiased))  # in [2**M, 2**(M+1)]
    return sign | (((unbiased + fmt.bias) << M) + q - (1 << M))


def decode_table(fmt: FpxFormat) -> np.ndarray:
    """float32 value of every code, indexed by code."""
    return np.array([decode_scalar(c, fmt) for c in range(fmt.n_codes)], dtype=np.float32)


def _magnitudes(fmt: FpxFormat) -> np.ndarray:
    return decode_table(fmt)[: fmt.sign_mask].astype(np.float64)


def encode_array(values, fmt: FpxFormat = E3M2) -> np.ndarray:
    """Vectorised :func:`encode_scalar` (nearest-neighbour search on the code grid)."""
    x = np.asarray(values, dtype=np.float64)
    if np.isnan(x).any():
        raise InvalidValueError("cannot encode NaN")
    grid = _magnitudes(fmt)
    a = np.abs(x)
    hi = np.clip(np.searchsorted(grid, a, side="left"), 1, len(grid) - 1)
    lo = hi - 1
    d_lo = a - grid[lo]
    d_hi = grid[hi] - a
    # codes on the magnitude grid are consecutive integers, so an even
    # mantissa is an even code index
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    mag = np.where(pick_hi, hi, lo)
    mag = np.where(a >= grid[-1], len(grid) - 1, mag)
    sign = np.signbit(x).astype(np.int64) * fmt.sign_mask
    return (mag + sign).astype(np.uint8)


def code_spacing(value: float, fmt: FpxFormat = E3M2) -> float:
    """Distance between adjacent codes in the binade containing ``|value|``."""
    a = abs(value)
    if a < fmt.min_normal:
        return math.ldexp(1.0, 1 - fmt.bias - fmt.man_bits)
    unbiased = math.frexp(a)[1] - 1
    top = (1 << fmt.exp_bits) - 1 - fmt.bias
    return math.ldexp(1.0, min(unbiased, top) - fmt.man_bits)


# ---------------------------------------------------------------------------
# Matrices
# ---------------------------------------------------------------------------

_DTYPES = {"fp32": np.float32, "fp16": np.uint16}


@dataclass
class ScalarMatrix:
    """Dense matrix of fp32 values or fp16 bit patterns in a stated layout."""

    rows: int
    cols: int
    dtype: str
    layout: str
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.dtype not in _DTYPES:
            raise LayoutError(f"dtype must be fp32 or fp16, got {self.dtype!r}")
        if self.layout not in ("row", "col"):
            raise LayoutError(f"layout must be 'row' or 'col', got {self.layout!r}")
        if self.rows <= 0 or self.cols <= 0:
            raise LayoutError(f"dims must be positive, got {self.rows}x{self.cols}")
        self.data = np.ascontiguousarray(np.asarray(self.data).reshape(-1), dtype=_DTYPES[self.dtype])
        if self.data.size != self.rows * self.cols:
            raise LayoutError(
                f"data has {self.data.size} elements, expected {self.rows}x{self.cols}"
            )

    @classmethod
    def from_array(cls, arr, dtype: str = "fp32", layout: str = "row") -> "ScalarMatrix":
        """Wrap a 2-D array given in logical (rows, cols) orientation.

        For ``dtype="fp16"`` float input is rounded to half; integer input is
        taken as bit patterns.
        """
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise LayoutError(f"expected a 2-D array, got shape {arr.shape}")
        if dtype == "fp16" and arr.dtype != np.uint16:
            arr = to_half_bits(arr)
        flat = arr.T.reshape(-1) if layout == "col" else arr.reshape(-1)
        return cls(arr.shape[0], arr.shape[1], dtype, layout, flat)

    def to_array(self) -> np.ndarray:
        """Logical (rows, cols) array of the stored elements (bit patterns for fp16)."""
        if self.layout == "col":
            return self.data.reshape(self.cols, self.rows).T
        return self.data.reshape(self.rows, self.cols)

    def values(self) -> np.ndarray:
        """Logical (rows, cols) float32 values."""
        a = self.to_array()
        return from_half_bits(a) if self.dtype == "fp16" else a.astype(np.float32)


@dataclass
class QuantizedMatrix:
    """Row-major grid of FPx codes with one fp16 scale per row.

    ``rows``/``cols`` are padded to multiples of 64; ``orig_rows``/``orig_cols``
    remember the pre-padding shape.
    """

    format: FpxFormat
    codes: np.ndarray
    scales: np.ndarray
    orig_rows: int = 0
    orig_cols: int = 0
    rows: int = field(init=False)
    cols: int = field(init=False)

    def __post_init__(self) -> None:
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.uint16).reshape(-1)
        if self.codes.ndim != 2:
            raise LayoutError(f"codes must be 2-D, got shape {self.codes.shape}")
        self.rows, self.cols = self.codes.shape
        if self.rows % TILE or self.cols % TILE or not self.rows or not self.cols:
            raise LayoutError(
                f"quantized dims {self.rows}x{self.cols} must be positive multiples of {TILE}"
            )
        if self.scales.size != self.rows:
            raise LayoutError(f"{self.scales.size} scales for {self.rows} rows")
        if self.codes.size and int(self.codes.max()) >= self.format.n_codes:
            raise InvalidCodeError(f"codes exceed {self.format.total_bits} bits")
        self.orig_rows = self.orig_rows or self.rows
        self.orig_cols = self.orig_cols or self.cols
        if not (0 < self.orig_rows <= self.rows and 0 < self.orig_cols <= self.cols):
            raise LayoutError("original dims must fit inside the padded dims")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedMatrix):
            return NotImplemented
        return (
            self.format == other.format
            and (self.orig_rows, self.orig_cols) == (other.orig_rows, other.orig_cols)
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
        )


def padded(n: int, tile: int = TILE) -> int:
    return -(-n // tile) * tile


def check_scales(scales_bits: np.ndarray, fmt: FpxFormat) -> None:
    """Reject scales whose bias-folded form does not fit in half precision."""
    s = from_half_bits(scales_bits).astype(np.float64)
    if not np.isfinite(s).all():
        raise ScaleOverflowError("row scale is not finite in fp16")
    folded = s * 2.0**fmt.half_exponent_shift
    bad = np.flatnonzero(np.abs(folded) > HALF_MAX)
    if bad.size:
        limit = HALF_MAX / 2.0**fmt.half_exponent_shift
        raise ScaleOverflowError(
            f"row {bad[0]}: scale {s[bad[0]]} exceeds {limit} "
            f"({fmt.name} folds 2^{fmt.half_exponent_shift} into the scale)"
        )


def quantize_matrix(m, fmt: FpxFormat = E3M2) -> QuantizedMatrix:
    """Row-wise absmax quantization with zero padding to 64-multiples."""
    if isinstance(m, ScalarMatrix):
        w = m.values()
    else:
        w = np.asarray(m, dtype=np.float32)
    if w.ndim != 2:
        raise LayoutError(f"expected a 2-D weight matrix, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise InvalidValueError("weights contain NaN or infinity")
    r0, c0 = w.shape
    full = np.zeros((padded(r0), padded(c0)), dtype=np.float64)
    full[:r0, :c0] = w

    absmax = np.abs(full).max(axis=1)
    scale_bits = to_half_bits(absmax / fmt.max_value)
    scale_bits[absmax == 0] = to_half_bits(1.0)
    check_scales(scale_bits, fmt)
    scales = from_half_bits(scale_bits).astype(np.float64)
    under = np.flatnonzero(scales == 0)
    if under.size:
        raise ScaleOverflowError(
            f"row {under[0]}: absmax {absmax[under[0]]:g} underflows the fp16 scale"
        )
    codes = encode_array(full / scales[:, None], fmt)
    return QuantizedMatrix(fmt, codes, scale_bits, r0, c0)


def dequantize_reference(q: QuantizedMatrix) -> np.ndarray:
    """fp16 patterns of ``decode(code) * scale`` for the full padded grid.

    The FPx value times the fp16 scale is exact in float32, so the product is
    rounded to half exactly once.
    """
    vals = decode_table(q.format)[q.codes]
    s = from_half_bits(q.scales)[:, None]
    return (vals * s).astype(np.float16).view(np.uint16)


def dequantize_matrix(q: QuantizedMatrix, dtype: str = "fp16") -> ScalarMatrix:
    """Reference de-quantization trimmed to the original shape."""
    bits = dequantize_reference(q)[: q.orig_rows, : q.orig_cols]
    if dtype == "fp16":
        return ScalarMatrix.from_array(bits, "fp16")
    return ScalarMatrix.from_array(from_half_bits(bits), "fp32")
