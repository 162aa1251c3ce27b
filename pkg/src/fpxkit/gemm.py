"""Warp-level tiled GEMM simulator.

``gemm_packed`` walks the packed weights tile by tile and slice by slice the
way one warp would: load the slice's words from a shared-memory image of the
tile (recording bank usage), de-quantize them with the word-parallel runtime,
and feed tensor-core fragments to an emulated ``mma``. ``gemm_reference``
reaches the same numbers through the scalar de-quantizer. Both accumulate in
the same fp32 order, so their outputs must agree bit for bit.

Asynchronous copies and double buffering only exist in the analytical
``pipeline_schedule``; the numeric path is sequential.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .codec import TILE, QuantizedMatrix, ScalarMatrix, dequantize_reference
from .errors import LayoutError, TraceError
from .half import from_half_bits
from .prepack import CODES_PER_SLICE, SLICE_K, SLICES, WARP, PackedWeights, gather_index, word_path_supported
from .runtime import dequant_slice_scalar, dequant_words, effective_scales, register_rows, registers_to_halves

N_PANEL = 8
BANKS = 32
BANK_WIDTH = 4


# ---------------------------------------------------------------------------
# mma
# ---------------------------------------------------------------------------


def _mma_accumulate(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    # c[i, j] += a[i, k] * b[k, j] one k at a time, all in fp32. Rows of a and
    # columns of b never interact, so stacking several 16x16 chunks or 16x8
    # panels into one call yields the same bits as issuing them separately.
    for k in range(a.shape[1]):
        c += a[:, k, None] * b[None, k, :]
    return c


def mma_emulate(a_frag, b_frag, c_frag) -> np.ndarray:
    """m16n8k16 multiply-accumulate: fp16 inputs (bit patterns), fp32 accumulator."""
    a = np.asarray(a_frag, dtype=np.uint16)
    b = np.asarray(b_frag, dtype=np.uint16)
    c = np.array(c_frag, dtype=np.float32, copy=True)
    if a.shape != (16, 16) or b.shape != (16, 8) or c.shape != (16, 8):
        raise LayoutError(f"mma shapes {a.shape} x {b.shape} + {c.shape}; expected 16x16, 16x8, 16x8")
    return _mma_accumulate(from_half_bits(a), from_half_bits(b), c)


# ---------------------------------------------------------------------------
# Shared-memory bank model
# ---------------------------------------------------------------------------


def bank_conflicts(addresses) -> int:
    """Threads minus distinct 4-byte banks touched by one warp-wide load."""
    addr = np.asarray(addresses, dtype=np.int64)
    return int(addr.size - np.unique((addr // BANK_WIDTH) % BANKS).size)


def slice_load_addresses(p: PackedWeights, slice_: int, layout: str = "jagged") -> list[np.ndarray]:
    """Byte addresses of each load step for one slice of a tile in shared memory.

    A tile's segment sub-streams sit back to back in shared memory. Step ``j``
    loads word ``j`` of every thread. ``layout="thread-major"`` models the
    naive alternative where each thread's words are contiguous.
    """
    steps = []
    base = 0
    t = np.arange(WARP)
    for w in p.split.widths:
        n = PackedWeights.tile_words(w) // WARP
        for j in range(slice_ * w, (slice_ + 1) * w):
            if layout == "jagged":
                word = j * WARP + t
            elif layout == "thread-major":
                word = t * n + j
            else:
                raise ValueError(f"unknown layout {layout!r}")
            steps.append(base + BANK_WIDTH * word)
        base += BANK_WIDTH * PackedWeights.tile_words(w)
    return steps


def bank_conflict_report(p: PackedWeights, layout: str = "jagged") -> np.ndarray:
    """Conflict count of every load step over all tiles and slices."""
    per_tile = [bank_conflicts(a) for s in range(SLICES) for a in slice_load_addresses(p, s, layout)]
    return np.tile(np.asarray(per_tile, dtype=np.int64), p.n_tiles)


# ---------------------------------------------------------------------------
# GEMM
# ---------------------------------------------------------------------------


def _activations(b, k_padded: int) -> tuple[np.ndarray, int]:
    """fp32 view of B zero-padded to (K_padded, multiple of 8) plus original N."""
    if isinstance(b, ScalarMatrix):
        if b.dtype != "fp16":
            raise LayoutError("activations must be fp16")
        vals = from_half_bits(b.to_array())
    else:
        arr = np.asarray(b)
        vals = from_half_bits(arr) if arr.dtype == np.uint16 else arr.astype(np.float16).astype(np.float32)
    if vals.ndim != 2:
        raise LayoutError(f"activations must be 2-D, got shape {vals.shape}")
    k, n = vals.shape
    if k > k_padded or k < k_padded - TILE + 1:
        raise LayoutError(f"activation rows {k} do not match weight columns {k_padded}")
    n_pad = -(-n // N_PANEL) * N_PANEL
    out = np.zeros((k_padded, n_pad), dtype=np.float32)
    out[:k, :n] = vals
    return out, n


def _threads() -> int:
    env = os.environ.get("FPX_THREADS")
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ValueError(f"FPX_THREADS must be an integer, got {env!r}") from None


@dataclass
class GemmStats:
    """Side information gathered while simulating."""

    load_steps: int = 0
    bank_conflicts: int = 0
    slices: int = 0


def _tile_row_product(p: PackedWeights, tr: int, b32: np.ndarray, stats: GemmStats) -> np.ndarray:
    _, tc_count = p.tile_grid
    rows, cols = gather_index()
    word_path = word_path_supported(p.format, p.split)
    row_idx = TILE * tr + register_rows()
    if word_path:
        scales = effective_scales(p.scales, p.format)[row_idx]
    else:
        scales = p.scales[row_idx]
    acc = np.zeros((TILE, b32.shape[1]), dtype=np.float32)
    for tc in range(tc_count):
        # shared-memory image of the tile: segment sub-streams back to back
        smem = np.concatenate([p.tile_stream(i, tr, tc) for i in range(len(p.split.widths))])
        full_words = None
        for s in range(SLICES):
            frags = []
            steps = iter(slice_load_addresses(p, s))
            for w in p.split.widths:
                loads = []
                for _ in range(w):
                    addr = next(steps)
                    stats.load_steps += 1
                    stats.bank_conflicts += bank_conflicts(addr)
                    loads.append(smem[addr // 4])
                frags.append(np.stack(loads, axis=1))
            if word_path:
                halves = registers_to_halves(dequant_words(frags[0], frags[1], scales))
            else:
                if full_words is None:
                    full_words = [p.thread_words(i, tr, tc) for i in range(len(p.split.widths))]
                halves = dequant_slice_scalar(full_words, p.split, p.format, scales, s)
            sl = slice(CODES_PER_SLICE * s, CODES_PER_SLICE * (s + 1))
            a_slab = np.zeros((TILE, SLICE_K), dtype=np.uint16)
            a_slab[rows[:, sl], cols[:, sl] - SLICE_K * s] = halves
            k0 = TILE * tc + SLICE_K * s
            _mma_accumulate(from_half_bits(a_slab), b32[k0 : k0 + SLICE_K], acc)
            stats.slices += 1
    return acc


def gemm_packed(p: PackedWeights, b, *, stats: GemmStats | None = None) -> np.ndarray:
    """C = A @ B through the packed path; returns (orig_rows, N) float32."""
    b32, n = _activations(b, p.cols)
    tr_count, _ = p.tile_grid
    out = np.zeros((p.rows, b32.shape[1]), dtype=np.float32)
    per_row = [GemmStats() for _ in range(tr_count)]
    workers = min(_threads(), tr_count)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda tr: _tile_row_product(p, tr, b32, per_row[tr]), range(tr_count)))
    else:
        parts = [_tile_row_product(p, tr, b32, per_row[tr]) for tr in range(tr_count)]
    for tr, part in enumerate(parts):
        out[TILE * tr : TILE * (tr + 1)] = part
    if stats is not None:
        for s in per_row:
            stats.load_steps += s.load_steps
            stats.bank_conflicts += s.bank_conflicts
            stats.slices += s.slices
    return out[: p.orig_rows, :n]


def gemm_reference(q: QuantizedMatrix, b) -> np.ndarray:
    """Same product via the scalar de-quantizer and the same accumulation order."""
    b32, n = _activations(b, q.cols)
    a = from_half_bits(dequantize_reference(q))
    c = np.zeros((q.rows, b32.shape[1]), dtype=np.float32)
    _mma_accumulate(a, b32, c)
    return c[: q.orig_rows, :n]


# ---------------------------------------------------------------------------
# Pipeline schedule
# ---------------------------------------------------------------------------

COPY = "copy-async"
DEQUANT = "dequant+lds"
MMA = "mma"
SYNC = "sync"
_ENGINE_ORDER = {COPY: 0, DEQUANT: 1, MMA: 2, SYNC: 3}


class Event(NamedTuple):
    time: int
    engine: str
    tile: int
    slice: int  # -1 for whole-tile events (copy, sync)


class PipelineTrace(list):
    """Time-ordered list of :class:`Event`."""

    def of(self, engine: str) -> list[Event]:
        return [e for e in self if e.engine == engine]

    def to_csv(self) -> str:
        lines = ["time,engine,tile,slice"]
        lines += [f"{e.time},{e.engine},{e.tile},{'' if e.slice < 0 else e.slice}" for e in self]
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        by_time: dict[int, list[str]] = {}
        for e in self:
            tag = f"{e.engine}(t{e.tile})" if e.slice < 0 else f"{e.engine}(t{e.tile},k{e.slice})"
            by_time.setdefault(e.time, []).append(tag)
        return "".join(f"{t:4d}: {' | '.join(v)}\n" for t, v in sorted(by_time.items()))


def pipeline_schedule(tiles: int, slices: int = SLICES) -> PipelineTrace:
    """Static overlap schedule of the main loop.

    The prologue copies tile 0 and synchronises. From then on slice ``k`` of a
    tile is de-quantized while the tensor cores work on slice ``k - 1``; the
    copy of the next tile is issued with the first slice of the current one
    and the barrier for it follows slice ``slices - 2``.
    """
    if tiles < 0 or slices < 2:
        raise ValueError("need tiles >= 0 and slices >= 2")
    ev: list[Event] = []
    if tiles:
        ev += [Event(0, COPY, 0, -1), Event(0, SYNC, 0, -1)]
    for t in range(tiles):
        start = 1 + slices * t
        if t + 1 < tiles:
            ev.append(Event(start, COPY, t + 1, -1))
            ev.append(Event(start + slices - 2, SYNC, t + 1, -1))
        for k in range(slices):
            ev.append(Event(start + k, DEQUANT, t, k))
            ev.append(Event(start + k + 1, MMA, t, k))
    trace = PipelineTrace(sorted(ev, key=lambda e: (e.time, _ENGINE_ORDER[e.engine], e.tile, e.slice)))
    validate_trace(trace, tiles, slices)
    return trace


def validate_trace(trace: PipelineTrace, tiles: int, slices: int = SLICES) -> None:
    """Raise :class:`TraceError` unless the dependency rules hold."""
    pos = {(e.engine, e.tile, e.slice): i for i, e in enumerate(trace)}
    if len(pos) != len(trace):
        raise TraceError("duplicate events in trace")
    expected = 2 * tiles * slices + (2 * tiles if tiles else 0)
    if len(trace) != expected:
        raise TraceError(f"{len(trace)} events, expected {expected}")

    def at(engine: str, tile: int, k: int = -1) -> Event:
        try:
            return trace[pos[(engine, tile, k)]]
        except KeyError:
            raise TraceError(f"missing {engine} event for tile {tile}, slice {k}") from None

    for t in range(tiles):
        copy, sync = at(COPY, t), at(SYNC, t)
        if pos[(COPY, t, -1)] > pos[(SYNC, t, -1)]:
            raise TraceError(f"sync for tile {t} precedes its copy")
        if pos[(SYNC, t, -1)] > pos[(DEQUANT, t, 0)] or sync.time >= at(DEQUANT, t, 0).time:
            raise TraceError(f"tile {t} de-quantized before its barrier")
        if t > 0:
            guard = at(DEQUANT, t - 1, slices - 2)
            if sync.time != guard.time or pos[(SYNC, t, -1)] < pos[(DEQUANT, t - 1, slices - 2)]:
                raise TraceError(f"barrier for tile {t} is not at the end of slice {slices - 2}")
            if copy.time > at(DEQUANT, t - 1, 0).time:
                raise TraceError(f"copy of tile {t} not issued with the first slice of tile {t - 1}")
        for k in range(slices):
            d, m = at(DEQUANT, t, k), at(MMA, t, k)
            if m.time <= d.time:
                raise TraceError(f"mma({t},{k}) does not follow its de-quantization")
            if k + 1 < slices and at(DEQUANT, t, k + 1).time != m.time:
                raise TraceError(f"dequant({t},{k + 1}) not co-scheduled with mma({t},{k})")
