import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fpxkit.codec import E3M2, FpxFormat, QuantizedMatrix
from fpxkit.errors import LayoutError
from fpxkit.prepack import (
    FP6_SPLIT,
    LANE_TO_OFFSET,
    PackedWeights,
    SplitScheme,
    assemble_warp,
    disassemble_warp,
    fragment_coords,
    gather_per_thread,
    merge_segments,
    pack,
    split_and_reorder,
    unpack,
)

from conftest import ALL_FORMATS


def random_q(rng, fmt=E3M2, rows=128, cols=128):
    return QuantizedMatrix(
        fmt, rng.integers(0, fmt.n_codes, size=(rows, cols)), rng.integers(0x2000, 0x3C00, size=rows)
    )


# -- fragment layout ---------------------------------------------------------


@pytest.mark.parametrize(
    "idx, rc",
    [((0, 0, 0, 0, 0), (0, 0)), ((0, 0, 1, 0, 1), (0, 3)), ((3, 3, 31, 3, 1), (63, 63)), ((0, 0, 4, 1, 0), (9, 0))],
)
def test_fragment_coords_examples(idx, rc):
    assert fragment_coords(*idx) == rc


def test_fragment_coords_bijective():
    seen = {
        fragment_coords(s, c, t, p, l)
        for s in range(4)
        for c in range(4)
        for t in range(32)
        for p in range(4)
        for l in range(2)
    }
    assert seen == {(r, c) for r in range(64) for c in range(64)}


def test_fragment_quadrants_follow_mma_a_layout():
    # inside every 8x8 quadrant thread t owns row t//4, cols 2*(t%4) and +1
    for t in range(32):
        for p in range(4):
            r0, c0 = fragment_coords(1, 2, t, p, 0)
            r1, c1 = fragment_coords(1, 2, t, p, 1)
            assert r0 % 8 == t // 4 and r1 == r0
            assert c0 % 8 == 2 * (t % 4) and c1 == c0 + 1


def test_fragment_coords_range_check():
    with pytest.raises(LayoutError):
        fragment_coords(4, 0, 0, 0, 0)
    with pytest.raises(LayoutError):
        fragment_coords(0, 0, 32, 0, 0)


# -- gathering ---------------------------------------------------------------


def test_gather_thread0_prefix():
    r, c = np.indices((64, 64))
    q = QuantizedMatrix(E3M2, (r * 64 + c) % 64, np.zeros(64))
    g = gather_per_thread(q, 0, 0)
    # codes equal the column index: (0,0),(0,1),(8,0),(8,1)
    assert g[0, :4].tolist() == [0, 1, 0, 1]
    assert g.shape == (32, 128)


def test_gather_positions_thread0():
    r, c = np.indices((64, 64))
    codes_r = QuantizedMatrix(FpxFormat(4, 3), r, np.zeros(64))
    codes_c = QuantizedMatrix(FpxFormat(4, 3), c, np.zeros(64))
    rows = gather_per_thread(codes_r, 0, 0)[0, :4]
    cols = gather_per_thread(codes_c, 0, 0)[0, :4]
    assert list(zip(rows, cols)) == [(0, 0), (0, 1), (8, 0), (8, 1)]


def test_gather_constant_tile():
    q = QuantizedMatrix(E3M2, np.full((64, 64), 17), np.zeros(64))
    g = gather_per_thread(q, 0, 0)
    assert (g == g[0]).all() and (g == 17).all()


def test_gather_is_a_permutation(rng):
    q = random_q(rng, rows=128, cols=192)
    g = gather_per_thread(q, 1, 2)
    assert sorted(g.ravel()) == sorted(q.codes[64:128, 128:192].ravel())


def test_gather_bad_tile(rng):
    with pytest.raises(LayoutError):
        gather_per_thread(random_q(rng), 2, 0)


# -- split and reorder -------------------------------------------------------


def test_split_constant_code():
    w2, w4 = split_and_reorder(np.full(128, 0b011100), FP6_SPLIT)
    assert w2.shape == (8,) and w4.shape == (16,)
    assert (w2 == 0x55555555).all()
    assert (w4 == 0xCCCCCCCC).all()


def test_split_zero_codes():
    for words in split_and_reorder(np.zeros(128, dtype=np.uint8)):
        assert not words.any()


def test_split_needs_128_codes():
    with pytest.raises(LayoutError):
        split_and_reorder(np.zeros(127))


def _stitch_python(w2, w4):
    """Replay the runtime's mask/shift loop on plain ints and read the codes back."""
    out = []
    f1, f2 = [int(x) for x in w2], [int(x) for x in w4]
    p1 = p2 = 0
    for _ in range(4):  # four slices
        for i in range(8):
            r1 = (f1[p1] & 0xC0C0C0C0) | ((f2[p2] & 0xF0F0F0F0) >> 2)
            if i % 4 == 3:
                p1 += 1
            else:
                f1[p1] = (f1[p1] << 2) & 0xFFFFFFFF
            if i % 2 == 1:
                p2 += 1
            else:
                f2[p2] = (f2[p2] << 4) & 0xFFFFFFFF
            lanes = [(r1 >> (8 * l + 2)) & 0x3F for l in range(4)]
            group = [None] * 4
            for lane, off in enumerate(LANE_TO_OFFSET):
                group[off] = lanes[lane]
            out += group
    return out


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 63), min_size=128, max_size=128))
def test_split_feeds_stitching_in_gather_order(codes):
    w2, w4 = split_and_reorder(np.array(codes), FP6_SPLIT)
    assert _stitch_python(w2, w4) == codes


def test_lane_order_matches_documented_ordering():
    # top byte down to byte 0 carries weights #2, #4, #1, #3 (1-based)
    assert [LANE_TO_OFFSET[l] + 1 for l in (3, 2, 1, 0)] == [2, 4, 1, 3]


@pytest.mark.parametrize("widths", [(2, 4), (4, 1), (2, 1), (4, 2, 1), (4, 4), (1, 1, 1)])
def test_merge_inverts_split(widths, rng):
    split = SplitScheme(widths)
    codes = rng.integers(0, 1 << split.total_bits, size=(3, 32, 128))
    assert np.array_equal(merge_segments(split_and_reorder(codes, split), split), codes)


def test_split_scheme_validation():
    with pytest.raises(LayoutError):
        SplitScheme((3, 3))
    assert SplitScheme.default_for(E3M2).widths == (2, 4)
    assert SplitScheme.default_for(FpxFormat(2, 2)).widths == (4, 1)
    assert SplitScheme.default_for(FpxFormat(1, 1)).widths == (2, 1)
    assert SplitScheme((2, 4)).shifts() == (4, 0)


# -- warp assembly -----------------------------------------------------------


def test_assemble_definition():
    words = np.stack([np.arange(32), 100 + np.arange(32)], axis=1)
    stream = np.frombuffer(assemble_warp(words), dtype="<u4")
    assert stream.tolist() == list(range(32)) + list(range(100, 132))


def test_assemble_empty():
    assert assemble_warp(np.zeros((32, 0), dtype=np.uint32)) == b""


def test_assemble_little_endian():
    words = np.zeros((32, 1), dtype=np.uint32)
    words[0, 0] = 0x11223344
    assert assemble_warp(words)[:4] == b"\x44\x33\x22\x11"


def test_assemble_rejects_ragged():
    with pytest.raises(LayoutError):
        assemble_warp(np.zeros((31, 2)))
    with pytest.raises(LayoutError):
        assemble_warp([[1, 2]] * 31 + [[1]])


def test_disassemble_inverts(rng):
    words = rng.integers(0, 2**32, size=(32, 24), dtype=np.uint64).astype(np.uint32)
    assert np.array_equal(disassemble_warp(assemble_warp(words)), words)


# -- pack / unpack -----------------------------------------------------------


def pack_oracle(q, split):
    """Element-by-element packer written straight from the layout rules."""
    tr, tc = q.rows // 64, q.cols // 64
    streams = []
    shifts = split.shifts()
    for w, sh in zip(split.widths, shifts):
        groups = 8 // w
        per_tile = 32 * 4 * w
        words = [0] * (tr * tc * per_tile)
        for ti in range(tr):
            for tj in range(tc):
                base = (ti * tc + tj) * per_tile
                for t in range(32):
                    n = 0
                    for s in range(4):
                        for c in range(4):
                            for p in range(4):
                                for l in range(2):
                                    r_, c_ = fragment_coords(s, c, t, p, l)
                                    code = int(q.codes[64 * ti + r_, 64 * tj + c_])
                                    seg = (code >> sh) & ((1 << w) - 1)
                                    m = n % 32
                                    i, off = divmod(m, 4)
                                    lane = LANE_TO_OFFSET.index(off)
                                    j = s * w + i // groups  # thread's word index
                                    g = i % groups
                                    bit = 8 * lane + (8 - w * (g + 1))
                                    words[base + 32 * j + t] |= seg << bit
                                    n += 1
        streams.append(np.array(words, dtype="<u4").tobytes())
    return streams


@pytest.mark.parametrize("fmt", [E3M2, FpxFormat(2, 2), FpxFormat(1, 1), FpxFormat(4, 3)], ids=str)
def test_pack_matches_elementwise_oracle(fmt, rng):
    q = random_q(rng, fmt, rows=64, cols=128)
    p = pack(q)
    assert [p.stream_bytes(i) for i in range(len(p.streams))] == pack_oracle(q, p.split)


def test_pack_zero_sizes():
    q = QuantizedMatrix(E3M2, np.zeros((64, 64)), np.full(64, 0x3C00))
    p = pack(q)
    assert [s.nbytes for s in p.streams] == [1024, 2048]
    assert not any(s.any() for s in p.streams)


@pytest.mark.parametrize("fmt", ALL_FORMATS, ids=str)
def test_round_trip(fmt, rng):
    q = random_q(rng, fmt, rows=128, cols=192)
    assert unpack(pack(q)) == q


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from(ALL_FORMATS), st.integers(0, 2**32 - 1))
def test_round_trip_property(tr, tc, fmt, seed):
    rng = np.random.default_rng(seed)
    q = random_q(rng, fmt, rows=64 * tr, cols=64 * tc)
    p = pack(q)
    assert unpack(p) == q
    # size law and 128-byte tile alignment
    assert sum(s.nbytes for s in p.streams) == q.rows * q.cols * fmt.total_bits // 8
    for w in p.split.widths:
        assert (512 * w) % 128 == 0
        assert PackedWeights.tile_words(w) * 4 == 512 * w


def test_pack_is_deterministic(rng):
    q = random_q(rng)
    a, b = pack(q), pack(q)
    assert a == b
    assert all(a.stream_bytes(i) == b.stream_bytes(i) for i in range(2))


def test_pack_keeps_original_dims(rng):
    q = random_q(rng)
    q.orig_rows, q.orig_cols = 100, 70
    assert unpack(pack(q)) == q


def test_tile_stream_offsets(rng):
    q = random_q(rng, rows=128, cols=128)
    p = pack(q)
    for seg, w in enumerate(p.split.widths):
        for ti in range(2):
            for tj in range(2):
                words = p.tile_stream(seg, ti, tj)
                start = (words.__array_interface__["data"][0] - p.streams[seg].__array_interface__["data"][0])
                assert start % 128 == 0
                assert start == (ti * 2 + tj) * 512 * w


def test_packed_weights_validation(rng):
    p = pack(random_q(rng))
    with pytest.raises(LayoutError):
        PackedWeights(p.format, p.split, p.rows, p.cols, p.orig_rows, p.orig_cols, p.scales, (p.streams[0][:-1], p.streams[1]))
    with pytest.raises(LayoutError):
        PackedWeights(p.format, SplitScheme((4, 1)), p.rows, p.cols, p.orig_rows, p.orig_cols, p.scales, p.streams)
