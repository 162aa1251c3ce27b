"""Word-parallel FP6 -> FP16 de-quantization.

Software model of the in-register runtime: 2-bit and 4-bit segments are
stitched back into 6-bit codes four at a time, then turned into four fp16
values with a handful of masks and shifts. The fp16 exponent field is copied
from the FP6 exponent unchanged; the missing ``2**(15 - bias)`` factor is
folded into the per-row scale.

Functions accept Python ints or numpy ``uint32`` arrays (any leading shape).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import E3M2, FpxFormat, decode_table
from .half import from_half_bits, half_mul, to_half_bits
from .prepack import (
    CHUNKS,
    CODES_PER_SLICE,
    PAIRS,
    SLICES,
    WARP,
    FP6_SPLIT,
    PackedWeights,
    SplitScheme,
    merge_segments,
)

FRAG1_MASK = 0xC0C0C0C0
FRAG2_MASK = 0xF0F0F0F0
SIGN_MASK = 0x80808080
BODY_MASK = 0x1F1F1F1F
HIGH_PAIR_MASK = 0x9F009F00
LOW_PAIR_MASK = 0x009F009F
WORD_MASK = 0xFFFFFFFF

ITERATIONS = 8
REGS_PER_SLICE = 2 * ITERATIONS
FRAG1_WORDS = 2
FRAG2_WORDS = 4


def stitch_step(r_frag1, r_frag2):
    """Four 6-bit codes at bits [7:2] of each byte lane."""
    return (r_frag1 & FRAG1_MASK) | ((r_frag2 & FRAG2_MASK) >> 2)


def dequant4(stitched):
    """Bias-deferred cast of four stitched FP6 codes.

    Returns two words, each holding two fp16 patterns: the first carries byte
    lanes 1 and 3, the second lanes 0 and 2.
    """
    sign = stitched & SIGN_MASK
    body = (stitched >> 2) & BODY_MASK
    v = sign | body
    r1 = v & HIGH_PAIR_MASK
    r2 = ((v & LOW_PAIR_MASK) << 8) & WORD_MASK
    return r1, r2


def new_cast(code: int) -> int:
    """fp16 pattern produced for one e3m2 code (exponent field copied as-is)."""
    r1, r2 = dequant4((code & 0x3F) << 2)  # code in byte lane 0
    return r2 & 0xFFFF


def effective_scales(scale_bits, fmt: FpxFormat = E3M2) -> np.ndarray:
    """Row scales with ``2**(15 - bias)`` folded in, rounded once to half."""
    s = from_half_bits(scale_bits).astype(np.float64)
    return to_half_bits(s * 2.0**fmt.half_exponent_shift)


def apply_scales(deq_words, eff_scales) -> np.ndarray:
    """Multiply both halves of each word by its scale (half RNE semantics)."""
    w = np.asarray(deq_words, dtype=np.uint32)
    s = np.asarray(eff_scales, dtype=np.uint16)
    lo = half_mul((w & 0xFFFF).astype(np.uint16), s).astype(np.uint32)
    hi = half_mul((w >> 16).astype(np.uint16), s).astype(np.uint32)
    return lo | (hi << 16)


def dequant_words(frag1, frag2, eff_scales) -> np.ndarray:
    """Run the eight-iteration stitch/de-quantize loop for one slice.

    ``frag1`` (..., 2) and ``frag2`` (..., 4) are a thread's 2-bit and 4-bit
    words for the slice, ``eff_scales`` (..., 16) the folded scale of each
    output register. Returns (..., 16) output registers.
    """
    f1 = np.array(frag1, dtype=np.uint32, copy=True)
    f2 = np.array(frag2, dtype=np.uint32, copy=True)
    scales = np.asarray(eff_scales, dtype=np.uint16)
    out = np.empty(f1.shape[:-1] + (REGS_PER_SLICE,), dtype=np.uint32)
    p1 = p2 = 0
    for i in range(ITERATIONS):
        r1 = stitch_step(f1[..., p1], f2[..., p2])
        if i % 4 == 3:
            p1 += 1
        else:
            f1[..., p1] <<= np.uint32(2)
        if i % 2 == 1:
            p2 += 1
        else:
            f2[..., p2] <<= np.uint32(4)
        lo_pair, hi_pair = dequant4(r1)
        out[..., 2 * i] = apply_scales(lo_pair, scales[..., 2 * i])
        out[..., 2 * i + 1] = apply_scales(hi_pair, scales[..., 2 * i + 1])
    return out


def registers_to_halves(regs) -> np.ndarray:
    """Split (..., 16) output registers into (..., 32) fp16 patterns, low half first."""
    r = np.asarray(regs, dtype=np.uint32)
    halves = np.stack([r & 0xFFFF, r >> 16], axis=-1).astype(np.uint16)
    return halves.reshape(r.shape[:-1] + (2 * r.shape[-1],))


def register_rows() -> np.ndarray:
    """(32, 16) tile row feeding each thread's output register in a slice.

    Register ``r`` carries pair ``r % 4`` of chunk ``r // 4``; the row does not
    depend on the slice.
    """
    t = np.arange(WARP)[:, None]
    r = np.arange(CHUNKS * PAIRS)[None, :]
    chunk, pair = divmod(r, PAIRS)
    return 16 * chunk + 8 * (pair & 1) + t // 4


@dataclass
class WarpSliceState:
    """Register inputs of one warp for one 64x16 slice."""

    frag1: np.ndarray  # (32, 2) words of 2-bit segments
    frag2: np.ndarray  # (32, 4) words of 4-bit segments
    scales: np.ndarray  # (32, 16) folded fp16 scales, one per output register

    def __post_init__(self) -> None:
        self.frag1 = np.asarray(self.frag1, dtype=np.uint32)
        self.frag2 = np.asarray(self.frag2, dtype=np.uint32)
        self.scales = np.asarray(self.scales, dtype=np.uint16)
        if self.frag1.shape != (WARP, FRAG1_WORDS) or self.frag2.shape != (WARP, FRAG2_WORDS):
            raise ValueError(
                f"fragment shapes {self.frag1.shape}, {self.frag2.shape}; expected (32, 2), (32, 4)"
            )
        if self.scales.shape != (WARP, REGS_PER_SLICE):
            raise ValueError(f"scales shape {self.scales.shape}; expected (32, 16)")

    @classmethod
    def load(cls, p: PackedWeights, tile_row: int, tile_col: int, slice_: int) -> "WarpSliceState":
        if p.format != E3M2 or p.split != FP6_SPLIT:
            raise ValueError(f"word-parallel path needs e3m2 with a 2+4 split, got {p.format.name} {p.split.widths}")
        f1 = p.thread_words(0, tile_row, tile_col)[:, FRAG1_WORDS * slice_ : FRAG1_WORDS * (slice_ + 1)]
        f2 = p.thread_words(1, tile_row, tile_col)[:, FRAG2_WORDS * slice_ : FRAG2_WORDS * (slice_ + 1)]
        eff = effective_scales(p.scales, p.format)
        return cls(f1, f2, eff[64 * tile_row + register_rows()])


def dequant_slice(state: WarpSliceState) -> np.ndarray:
    """(32, 32) fp16 patterns per thread, in fragment consumption order."""
    return registers_to_halves(dequant_words(state.frag1, state.frag2, state.scales))


def dequant_slice_scalar(
    words: list[np.ndarray], split: SplitScheme, fmt: FpxFormat, row_scales, slice_: int
) -> np.ndarray:
    """Fallback for formats without a word-parallel kernel.

    ``words`` are the full per-thread word arrays of one tile (one (32, n)
    array per segment); ``row_scales`` (32, 16) are plain fp16 row scales per
    output pair. Returns (32, 32) fp16 patterns like :func:`dequant_slice`.
    """
    codes = merge_segments(words, split)[:, CODES_PER_SLICE * slice_ : CODES_PER_SLICE * (slice_ + 1)]
    vals = decode_table(fmt)[codes]
    s = np.repeat(from_half_bits(row_scales), 2, axis=-1)
    return (vals * s).astype(np.float16).view(np.uint16)

