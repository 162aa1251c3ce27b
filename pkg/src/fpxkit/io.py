"""Binary containers for matrices and packed weights.

All multi-byte fields are little-endian.

MatrixFile::

    "FPXMAT1\\0" | u32 dtype (0 fp32, 1 fp16) | u32 rows | u32 cols
    | u8 layout (0 row-major, 1 col-major) | 3 pad bytes | elements

PackFile::

    "FPXPACK1" | u16 version | u8 exp_bits | u8 man_bits | u8 n_segments
    | n_segments x u8 width (high segment first)
    | u32 orig_rows, orig_cols, padded_rows, padded_cols | u32 tile_m, tile_k
    | u8 scale granularity (0 = per row) | padded_rows x fp16 scales
    | per segment: u64 byte length, stream bytes
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .codec import TILE, FpxFormat, ScalarMatrix
from .errors import CorruptFileError, FpxError
from .prepack import PackedWeights, SplitScheme

MATRIX_MAGIC = b"FPXMAT1\0"
PACK_MAGIC = b"FPXPACK1"
PACK_VERSION = 1

_MAT_HEADER = struct.Struct("<8sIIIB3x")
_DTYPE_CODES = {"fp32": 0, "fp16": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}
_ELEM = {"fp32": np.dtype("<f4"), "fp16": np.dtype("<u2")}
_LAYOUT_CODES = {"row": 0, "col": 1}
_LAYOUT_NAMES = {v: k for k, v in _LAYOUT_CODES.items()}


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptFileError(
                f"truncated {what}: need {n} bytes, {len(self.buf) - self.pos} left", offset=self.pos
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))


# ---------------------------------------------------------------------------
# MatrixFile
# ---------------------------------------------------------------------------


def matrix_to_bytes(m: ScalarMatrix) -> bytes:
    header = _MAT_HEADER.pack(MATRIX_MAGIC, _DTYPE_CODES[m.dtype], m.rows, m.cols, _LAYOUT_CODES[m.layout])
    return header + m.data.astype(_ELEM[m.dtype]).tobytes()


def matrix_from_bytes(buf: bytes) -> ScalarMatrix:
    r = _Reader(buf)
    magic, dtype, rows, cols, layout = r.unpack(_MAT_HEADER.format, "matrix header")
    if magic != MATRIX_MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}, expected {MATRIX_MAGIC!r}", offset=0)
    if dtype not in _DTYPE_NAMES:
        raise CorruptFileError(f"unknown dtype code {dtype}", offset=8)
    if layout not in _LAYOUT_NAMES:
        raise CorruptFileError(f"unknown layout code {layout}", offset=20)
    if rows == 0 or cols == 0:
        raise CorruptFileError(f"empty matrix {rows}x{cols}", offset=12)
    name = _DTYPE_NAMES[dtype]
    payload = r.take(rows * cols * _ELEM[name].itemsize, "matrix payload")
    if r.pos != len(buf):
        raise CorruptFileError(f"{len(buf) - r.pos} trailing bytes after payload", offset=r.pos)
    data = np.frombuffer(payload, dtype=_ELEM[name])
    return ScalarMatrix(rows, cols, name, _LAYOUT_NAMES[layout], data)


def write_matrix(path, m: ScalarMatrix) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def read_matrix(path) -> ScalarMatrix:
    return matrix_from_bytes(Path(path).read_bytes())


def read_raw(path, rows: int, cols: int, dtype: str = "fp32") -> ScalarMatrix:
    """Ingest a headerless row-major little-endian blob."""
    buf = Path(path).read_bytes()
    need = rows * cols * _ELEM[dtype].itemsize
    if len(buf) != need:
        raise CorruptFileError(f"raw blob has {len(buf)} bytes, expected {need} for {rows}x{cols} {dtype}")
    return ScalarMatrix(rows, cols, dtype, "row", np.frombuffer(buf, dtype=_ELEM[dtype]))


# ---------------------------------------------------------------------------
# PackFile
# ---------------------------------------------------------------------------


def pack_to_bytes(p: PackedWeights) -> bytes:
    widths = p.split.widths
    parts = [
        PACK_MAGIC,
        struct.pack("<HBBB", PACK_VERSION, p.format.exp_bits, p.format.man_bits, len(widths)),
        bytes(widths),
        struct.pack("<IIIIII", p.orig_rows, p.orig_cols, p.rows, p.cols, TILE, TILE),
        struct.pack("<B", 0),
        p.scales.astype("<u2").tobytes(),
    ]
    for s in p.streams:
        parts.append(struct.pack("<Q", s.nbytes))
        parts.append(s.astype("<u4").tobytes())
    return b"".join(parts)


def pack_from_bytes(buf: bytes) -> PackedWeights:
    r = _Reader(buf)
    magic = r.take(8, "magic")
    if magic != PACK_MAGIC:
        raise CorruptFileError(f"bad magic {magic!r}, expected {PACK_MAGIC!r}", offset=0)
    at = r.pos
    version, e, m, nseg = r.unpack("<HBBB", "pack header")
    if version != PACK_VERSION:
        raise CorruptFileError(f"unsupported version {version}", offset=at)
    try:
        fmt = FpxFormat(e, m)
        at = r.pos
        split = SplitScheme(tuple(r.take(nseg, "segment widths")))
    except FpxError as exc:
        if isinstance(exc, CorruptFileError):
            raise
        raise CorruptFileError(exc.message, offset=at) from None
    if split.total_bits != fmt.total_bits:
        raise CorruptFileError(f"segment widths {split.widths} do not sum to {fmt.total_bits}", offset=at)
    at = r.pos
    orig_r, orig_c, rows, cols, tile_m, tile_k = r.unpack("<IIIIII", "dims")
    if (tile_m, tile_k) != (TILE, TILE):
        raise CorruptFileError(f"tile {tile_m}x{tile_k} unsupported", offset=at + 16)
    if rows % TILE or cols % TILE or not rows or not cols:
        raise CorruptFileError(f"padded dims {rows}x{cols} not positive multiples of {TILE}", offset=at + 8)
    if not (0 < orig_r <= rows and 0 < orig_c <= cols) or rows - orig_r >= TILE or cols - orig_c >= TILE:
        raise CorruptFileError(f"original dims {orig_r}x{orig_c} inconsistent with {rows}x{cols}", offset=at)
    at = r.pos
    (gran,) = r.unpack("<B", "scale granularity")
    if gran != 0:
        raise CorruptFileError(f"unsupported scale granularity {gran}", offset=at)
    scales = np.frombuffer(r.take(2 * rows, "scales"), dtype="<u2")
    streams = []
    for w in split.widths:
        at = r.pos
        (n,) = r.unpack("<Q", "stream length")
        expect = rows * cols * w // 8
        if n != expect:
            raise CorruptFileError(f"{w}-bit stream length {n}, expected {expect}", offset=at)
        streams.append(np.frombuffer(r.take(n, f"{w}-bit stream"), dtype="<u4"))
    if r.pos != len(buf):
        raise CorruptFileError(f"{len(buf) - r.pos} trailing bytes", offset=r.pos)
    return PackedWeights(fmt, split, rows, cols, orig_r, orig_c, scales, tuple(streams))


def write_pack(path, p: PackedWeights) -> None:
    Path(path).write_bytes(pack_to_bytes(p))


def read_pack(path) -> PackedWeights:
    return pack_from_bytes(Path(path).read_bytes())
