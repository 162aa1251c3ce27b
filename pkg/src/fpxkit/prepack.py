"""Ahead-of-time weight pre-packing.

Pipeline per 64x64 tile:

1. gather: pick each thread's 128 codes in the order the tensor-core
   A-fragments consume them (slice, chunk, pair, lane);
2. split each code into power-of-two wide segments (2+4 for FP6);
3. place segments into 32-bit words at the byte-lane positions the runtime
   mask/shift sequence expects;
4. interleave the warp's words in jagged order (word ``j`` of thread ``i`` at
   position ``32*j + i``).

Every step is a fixed permutation, precomputed once as index tables and
applied to all tiles of a matrix at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .codec import TILE, E3M2, FpxFormat, QuantizedMatrix, check_scales
from .errors import LayoutError

WARP = 32
SLICES = 4
CHUNKS = 4
PAIRS = 4
LANES = 2
SLICE_K = TILE // SLICES  # 16 columns per slice
CODES_PER_THREAD = SLICES * CHUNKS * PAIRS * LANES  # 128
CODES_PER_SLICE = CODES_PER_THREAD // SLICES  # 32
CODES_PER_ITER = 4

# Byte lane that holds the weight at offset o (0..3) of a 4-weight group.
# The runtime emits lanes (1, 3) as its first register and (0, 2) as the
# second, so reading lanes from the top byte down gives offsets 1, 3, 0, 2.
OFFSET_TO_LANE = (1, 3, 0, 2)
LANE_TO_OFFSET = (2, 0, 3, 1)

_SEGMENT_WIDTHS = (1, 2, 4)


# ---------------------------------------------------------------------------
# Fragment layout
# ---------------------------------------------------------------------------


def fragment_coords(slice_: int, chunk: int, thread: int, pair: int, lane: int) -> tuple[int, int]:
    """(row, col) inside a 64x64 tile of one A-fragment element.

    Slices are 64x16 column slabs, chunks 16x16 row blocks of a slice. Inside a
    chunk, pair ``p`` lives in 8x8 quadrant (row ``p & 1``, col ``p >> 1``) and
    thread ``t`` holds row ``t // 4``, columns ``2*(t % 4) + lane``.
    """
    for name, v, n in (
        ("slice", slice_, SLICES),
        ("chunk", chunk, CHUNKS),
        ("thread", thread, WARP),
        ("pair", pair, PAIRS),
        ("lane", lane, LANES),
    ):
        if not 0 <= v < n:
            raise LayoutError(f"{name} index {v} out of range 0..{n - 1}")
    row = 16 * chunk + 8 * (pair & 1) + thread // 4
    col = SLICE_K * slice_ + 8 * (pair >> 1) + 2 * (thread % 4) + lane
    return row, col


@lru_cache(maxsize=None)
def gather_index() -> tuple[np.ndarray, np.ndarray]:
    """Row and column tables of shape (32, 128) in per-thread consumption order."""
    rows = np.empty((WARP, CODES_PER_THREAD), dtype=np.intp)
    cols = np.empty_like(rows)
    for t in range(WARP):
        n = 0
        for s in range(SLICES):
            for c in range(CHUNKS):
                for p in range(PAIRS):
                    for l in range(LANES):
                        rows[t, n], cols[t, n] = fragment_coords(s, c, t, p, l)
                        n += 1
    rows.flags.writeable = False
    cols.flags.writeable = False
    return rows, cols


def _tile_grid(codes: np.ndarray) -> np.ndarray:
    r, c = codes.shape
    return codes.reshape(r // TILE, TILE, c // TILE, TILE).transpose(0, 2, 1, 3)


def gather_per_thread(q: QuantizedMatrix, tile_row: int, tile_col: int) -> np.ndarray:
    """The (32, 128) codes each thread consumes from one tile."""
    tr, tc = q.rows // TILE, q.cols // TILE
    if not (0 <= tile_row < tr and 0 <= tile_col < tc):
        raise LayoutError(f"tile ({tile_row}, {tile_col}) outside {tr}x{tc} grid")
    tile = q.codes[tile_row * TILE : (tile_row + 1) * TILE, tile_col * TILE : (tile_col + 1) * TILE]
    rows, cols = gather_index()
    return tile[rows, cols]


# ---------------------------------------------------------------------------
# Segment split and bit placement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitScheme:
    """Segment widths, most significant segment first."""

    widths: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.widths or any(w not in _SEGMENT_WIDTHS for w in self.widths):
            raise LayoutError(f"segment widths must be drawn from {_SEGMENT_WIDTHS}, got {self.widths}")

    @property
    def total_bits(self) -> int:
        return sum(self.widths)

    def shifts(self) -> tuple[int, ...]:
        """Right shift that brings each segment to bit 0 of the code."""
        out, rem = [], self.total_bits
        for w in self.widths:
            rem -= w
            out.append(rem)
        return tuple(out)

    def words_per_thread(self, width: int) -> int:
        return CODES_PER_THREAD * width // 32

    @classmethod
    def default_for(cls, fmt: FpxFormat) -> "SplitScheme":
        if fmt.total_bits == 6:
            return cls((2, 4))
        widths, rem = [], fmt.total_bits
        for w in (4, 2, 1):
            while rem >= w:
                widths.append(w)
                rem -= w
        return cls(tuple(widths))


FP6_SPLIT = SplitScheme((2, 4))


def word_path_supported(fmt: FpxFormat, split: SplitScheme) -> bool:
    """Only e3m2 with the 2+4 split has a word-parallel dequantizer."""
    return fmt == E3M2 and split == FP6_SPLIT


@lru_cache(maxsize=None)
def segment_layout(width: int) -> tuple[np.ndarray, np.ndarray]:
    """Where each of a thread's 128 segments of ``width`` bits lives.

    Returns ``(word, bit)`` tables of length 128, indexed by consumption order.
    Each slice owns ``width`` words. Iteration ``i`` of a slice handles codes
    ``4i..4i+3``; its segments sit in group ``g = i % (8 // width)`` of word
    ``i // (8 // width)``, occupying bits ``[7 - width*g : 8 - width*(g+1)]`` of
    every byte lane, with lanes assigned through ``OFFSET_TO_LANE``.
    """
    if width not in _SEGMENT_WIDTHS:
        raise LayoutError(f"unsupported segment width {width}")
    groups = 8 // width
    n = np.arange(CODES_PER_THREAD)
    s, m = divmod(n, CODES_PER_SLICE)
    i, o = divmod(m, CODES_PER_ITER)
    lane = np.asarray(OFFSET_TO_LANE)[o]
    word = s * width + i // groups
    bit = 8 * lane + 8 - width * (i % groups + 1)
    return word, bit


@lru_cache(maxsize=None)
def _word_members(width: int) -> tuple[np.ndarray, np.ndarray]:
    """Per word, which consumption indices it carries and at what bit offsets."""
    word, bit = segment_layout(width)
    order = np.lexsort((bit, word))
    per = 32 // width
    return order.reshape(-1, per), bit[order].reshape(-1, per)


def split_and_reorder(thread_codes, split: SplitScheme = FP6_SPLIT) -> list[np.ndarray]:
    """Turn codes in consumption order into one uint32 word array per segment.

    ``thread_codes`` has trailing dimension 128; leading dimensions (threads,
    tiles) are carried through.
    """
    codes = np.asarray(thread_codes, dtype=np.uint32)
    if codes.shape[-1] != CODES_PER_THREAD:
        raise LayoutError(f"expected {CODES_PER_THREAD} codes per thread, got {codes.shape[-1]}")
    out = []
    for w, sh in zip(split.widths, split.shifts()):
        seg = (codes >> np.uint32(sh)) & np.uint32((1 << w) - 1)
        members, bits = _word_members(w)
        placed = seg[..., members] << bits.astype(np.uint32)
        out.append(np.bitwise_or.reduce(placed, axis=-1))
    return out


def merge_segments(words: list[np.ndarray], split: SplitScheme = FP6_SPLIT) -> np.ndarray:
    """Inverse of :func:`split_and_reorder`: codes in consumption order."""
    codes = None
    for seg_words, w, sh in zip(words, split.widths, split.shifts()):
        word, bit = segment_layout(w)
        seg = (np.asarray(seg_words, dtype=np.uint32)[..., word] >> bit.astype(np.uint32)) & np.uint32(
            (1 << w) - 1
        )
        part = seg << np.uint32(sh)
        codes = part if codes is None else codes | part
    return codes.astype(np.uint8)


# ---------------------------------------------------------------------------
# Warp assembly
# ---------------------------------------------------------------------------


def assemble_warp(per_thread_words) -> bytes:
    """Jagged interleave of a (32, n) word array, serialised little-endian."""
    try:
        words = np.asarray(per_thread_words, dtype=np.uint32)
    except ValueError:
        raise LayoutError("threads contribute different word counts") from None
    if words.ndim != 2 or words.shape[0] != WARP:
        raise LayoutError(f"expected {WARP} equal-length word lists, got shape {words.shape}")
    return np.ascontiguousarray(words.T).astype("<u4").tobytes()


def disassemble_warp(stream: bytes | np.ndarray) -> np.ndarray:
    """Inverse of :func:`assemble_warp`: back to (32, n) words."""
    words = np.frombuffer(stream, dtype="<u4") if isinstance(stream, (bytes, bytearray)) else np.asarray(stream)
    if words.size % WARP:
        raise LayoutError(f"stream of {words.size} words is not a whole number of warp rows")
    return words.reshape(-1, WARP).T.astype(np.uint32)


# ---------------------------------------------------------------------------
# Whole-matrix pack / unpack
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PackedWeights:
    """Pre-packed weights: one little-endian uint32 stream per segment.

    Streams hold tiles in row-major tile order; tile ``k`` of segment width
    ``w`` starts at word ``k * 128 * w`` (byte ``k * 512 * w``).
    """

    format: FpxFormat
    split: SplitScheme
    rows: int
    cols: int
    orig_rows: int
    orig_cols: int
    scales: np.ndarray
    streams: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if self.split.total_bits != self.format.total_bits:
            raise LayoutError(
                f"split {self.split.widths} does not cover {self.format.total_bits}-bit {self.format.name}"
            )
        if self.rows % TILE or self.cols % TILE:
            raise LayoutError(f"packed dims {self.rows}x{self.cols} are not multiples of {TILE}")
        self.scales = np.asarray(self.scales, dtype=np.uint16).reshape(-1)
        self.streams = tuple(np.asarray(s, dtype="<u4").reshape(-1) for s in self.streams)
        if len(self.streams) != len(self.split.widths):
            raise LayoutError(f"{len(self.streams)} streams for {len(self.split.widths)} segments")
        for w, s in zip(self.split.widths, self.streams):
            if s.nbytes != self.stream_nbytes(w):
                raise LayoutError(f"{w}-bit stream has {s.nbytes} bytes, expected {self.stream_nbytes(w)}")
        if self.scales.size != self.rows:
            raise LayoutError(f"{self.scales.size} scales for {self.rows} rows")

    @property
    def tile_grid(self) -> tuple[int, int]:
        return self.rows // TILE, self.cols // TILE

    @property
    def n_tiles(self) -> int:
        tr, tc = self.tile_grid
        return tr * tc

    def stream_nbytes(self, width: int) -> int:
        return self.rows * self.cols * width // 8

    @staticmethod
    def tile_words(width: int) -> int:
        return WARP * CODES_PER_THREAD * width // 32

    def tile_stream(self, segment: int, tile_row: int, tile_col: int) -> np.ndarray:
        """Words of one tile's sub-stream (jagged order)."""
        n = self.tile_words(self.split.widths[segment])
        k = tile_row * self.tile_grid[1] + tile_col
        return self.streams[segment][k * n : (k + 1) * n]

    def thread_words(self, segment: int, tile_row: int, tile_col: int) -> np.ndarray:
        """(32, n) per-thread words of one tile."""
        return disassemble_warp(self.tile_stream(segment, tile_row, tile_col))

    def stream_bytes(self, segment: int) -> bytes:
        return self.streams[segment].tobytes()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PackedWeights):
            return NotImplemented
        return (
            self.format == other.format
            and self.split == other.split
            and (self.rows, self.cols, self.orig_rows, self.orig_cols)
            == (other.rows, other.cols, other.orig_rows, other.orig_cols)
            and np.array_equal(self.scales, other.scales)
            and all(np.array_equal(a, b) for a, b in zip(self.streams, other.streams))
        )


def pack(q: QuantizedMatrix, split: SplitScheme | None = None) -> PackedWeights:
    split = split or SplitScheme.default_for(q.format)
    if q.rows % TILE or q.cols % TILE:
        raise LayoutError("quantized dims must be padded to multiples of 64 at quantize time")
    check_scales(q.scales, q.format)
    rows, cols = gather_index()
    gathered = _tile_grid(q.codes)[..., rows, cols]  # (TR, TC, 32, 128)
    streams = []
    for words in split_and_reorder(gathered, split):
        # (TR, TC, 32, n) -> jagged (TR, TC, n, 32)
        streams.append(np.ascontiguousarray(np.swapaxes(words, -1, -2)).reshape(-1).astype("<u4"))
    return PackedWeights(q.format, split, q.rows, q.cols, q.orig_rows, q.orig_cols, q.scales.copy(), tuple(streams))


def unpack(p: PackedWeights) -> QuantizedMatrix:
    tr, tc = p.tile_grid
    words = [
        np.swapaxes(s.astype(np.uint32).reshape(tr, tc, -1, WARP), -1, -2) for s in p.streams
    ]
    gathered = merge_segments(words, p.split)  # (TR, TC, 32, 128)
    rows, cols = gather_index()
    tiles = np.zeros((tr, tc, TILE, TILE), dtype=np.uint8)
    tiles[..., rows, cols] = gathered
    codes = tiles.transpose(0, 2, 1, 3).reshape(p.rows, p.cols)
    return QuantizedMatrix(p.format, codes, p.scales.copy(), p.orig_rows, p.orig_cols)
