"""Command-line front end: ``fpxkit <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from . import io
from .codec import E3M2, FpxFormat, QuantizedMatrix, ScalarMatrix, decode_scalar, dequantize_matrix, quantize_matrix
from .errors import FpxError
from .gemm import GemmStats, bank_conflict_report, gemm_packed, gemm_reference, pipeline_schedule
from .half import float_to_half, half_mul_scalar
from .prepack import pack, unpack


def _dims(text: str) -> tuple[int, int]:
    try:
        r, c = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROWS,COLS, got {text!r}") from None
    return r, c


def _load_matrix(path: str, raw: tuple[int, int] | None, raw_dtype: str) -> ScalarMatrix:
    if raw is not None:
        return io.read_raw(path, raw[0], raw[1], raw_dtype)
    return io.read_matrix(path)


def cmd_pack(args) -> int:
    m = _load_matrix(args.input, args.raw, args.raw_dtype)
    fmt = FpxFormat.parse(args.format)
    p = pack(quantize_matrix(m, fmt))
    io.write_pack(args.output, p)
    print(f"packed {m.rows}x{m.cols} -> {p.rows}x{p.cols} {fmt.name} split {p.split.widths}")
    return 0


def cmd_unpack(args) -> int:
    q = unpack(io.read_pack(args.input))
    io.write_matrix(args.output, dequantize_matrix(q, args.dtype))
    return 0


def cmd_inspect(args) -> int:
    p = io.read_pack(args.input)
    tr, tc = p.tile_grid
    print(f"format        {p.format.name} (bias {p.format.bias})")
    print(f"split         {'+'.join(map(str, p.split.widths))}")
    print(f"dims          {p.orig_rows}x{p.orig_cols} (padded {p.rows}x{p.cols})")
    print(f"tiles         {tr}x{tc} of 64x64")
    for w, s in zip(p.split.widths, p.streams):
        print(f"stream {w}-bit  {s.nbytes} bytes, {np.count_nonzero(s)} nonzero words")
    shown = min(p.rows, args.scales)
    print("scales        " + " ".join(f"{v:04x}" for v in p.scales[:shown]) + (" ..." if shown < p.rows else ""))
    r, c = args.tile
    threads = range(32) if args.thread is None else [args.thread]
    for seg, w in enumerate(p.split.widths):
        words = p.thread_words(seg, r, c)
        print(f"tile ({r},{c}) {w}-bit words per thread:")
        for t in threads:
            print(f"  T{t:<2d} " + " ".join(f"{x:08x}" for x in words[t]))
    return 0


def _activations(path: str) -> ScalarMatrix:
    b = io.read_matrix(path)
    if b.dtype == "fp32":
        b = ScalarMatrix.from_array(b.values(), "fp16", b.layout)
    return b


def cmd_gemm(args) -> int:
    p = io.read_pack(args.weights)
    b = _activations(args.activations)
    stats = GemmStats()
    c = gemm_packed(p, b, stats=stats)
    io.write_matrix(args.output, ScalarMatrix.from_array(c, "fp32"))
    print(f"C {c.shape[0]}x{c.shape[1]}: {stats.slices} slices, {stats.load_steps} loads, {stats.bank_conflicts} bank conflicts")
    if args.check:
        ref = gemm_reference(unpack(p), b)
        diff = int(np.count_nonzero(c.view(np.uint32) != ref.view(np.uint32)))
        if diff:
            print(f"check FAILED: {diff} elements differ from the reference path", file=sys.stderr)
            return 1
        print("check passed: packed path is bit-identical to the reference path")
    return 0


def cmd_trace(args) -> int:
    trace = pipeline_schedule(args.tiles, args.slices)
    sys.stdout.write(trace.to_csv() if args.csv else trace.to_text())
    return 0


def _selftest_dequant() -> tuple[int, int]:
    from .runtime import WarpSliceState, dequant_slice
    from .prepack import gather_index

    rows, cols = gather_index()
    scales = (1.0, 0.5, 3.0, 2.0**-14)
    codes = np.tile(np.arange(64, dtype=np.uint8), (64, 1))
    q = QuantizedMatrix(E3M2, codes, np.full(64, float_to_half(1.0), dtype=np.uint16))
    ok = total = 0
    for s in scales:
        sb = float_to_half(s)
        q.scales[:] = sb
        p = pack(q)
        # code == column, so every code shows up in exactly one slice
        got: dict[int, set[int]] = {}
        for sl in range(4):
            out = dequant_slice(WarpSliceState.load(p, 0, 0, sl))
            n = slice(32 * sl, 32 * (sl + 1))
            for c, v in zip(codes[rows[:, n], cols[:, n]].ravel(), out.ravel()):
                got.setdefault(int(c), set()).add(int(v))
        for c in range(64):
            total += 1
            ok += got[c] == {half_mul_scalar(float_to_half(decode_scalar(c)), sb)}
    return ok, total


def cmd_selftest(args) -> int:
    failures = 0

    ok, total = _selftest_dequant()
    failures += ok != total
    print(f"{'PASS' if ok == total else 'FAIL'} dequant equivalence {ok}/{total}")

    rng = np.random.default_rng(args.seed)
    bad = 0
    for _ in range(args.rounds):
        r, c = rng.integers(1, 5, size=2) * 64
        fmt = FpxFormat.parse(rng.choice(["e3m2", "e2m3", "e2m2", "e3m1", "e2m1", "e4m3"]))
        q = QuantizedMatrix(fmt, rng.integers(0, fmt.n_codes, size=(r, c)), rng.integers(0x2000, 0x3C00, size=r))
        bad += unpack(pack(q)) != q
    failures += bad > 0
    print(f"{'PASS' if not bad else 'FAIL'} pack/unpack round trip {args.rounds - bad}/{args.rounds}")

    q = quantize_matrix(rng.standard_normal((512, 512)).astype(np.float32))
    p = pack(q)
    jag = bank_conflict_report(p)
    ctrl = bank_conflict_report(p, "thread-major")
    live = ctrl.sum() > 0
    failures += bool(jag.any()) or not live
    print(f"{'PASS' if not jag.any() and live else 'FAIL'} bank conflicts: jagged {int(jag.sum())} over {jag.size} steps, thread-major control {int(ctrl.sum())}")

    b = rng.standard_normal((512, 16)).astype(np.float16)
    same = np.array_equal(gemm_packed(p, b).view(np.uint32), gemm_reference(q, b).view(np.uint32))
    failures += not same
    print(f"{'PASS' if same else 'FAIL'} gemm packed == reference (512x512x16)")
    return 1 if failures else 0


def cmd_bench(args) -> int:
    p = io.read_pack(args.weights)
    b = _activations(args.activations)
    q = unpack(p)
    timings = {}
    for name, fn in (("packed", lambda: gemm_packed(p, b)), ("reference", lambda: gemm_reference(q, b))):
        fn()
        t0 = time.perf_counter()
        for _ in range(args.iters):
            fn()
        timings[name] = (time.perf_counter() - t0) / args.iters
    for name, t in timings.items():
        print(f"{name:10s} {t * 1e3:9.2f} ms/iter")
    print(f"ratio      {timings['packed'] / timings['reference']:9.2f}x (CPU simulation, not a GPU figure)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fpxkit", description="FPx weight quantization, pre-packing and GEMM simulation")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pack", help="quantize (row-wise) and pre-pack a weight matrix")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", default="e3m2")
    sp.add_argument("--output", required=True)
    sp.add_argument("--raw", type=_dims, metavar="ROWS,COLS", help="input is a headerless row-major blob")
    sp.add_argument("--raw-dtype", choices=("fp32", "fp16"), default="fp32")
    sp.set_defaults(func=cmd_pack)

    sp = sub.add_parser("unpack", help="de-quantize a pack file to a matrix file")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--dtype", choices=("fp16", "fp32"), default="fp16")
    sp.set_defaults(func=cmd_unpack)

    sp = sub.add_parser("inspect", help="dump header, scales and per-thread words")
    sp.add_argument("--input", required=True)
    sp.add_argument("--tile", type=_dims, default=(0, 0), metavar="R,C")
    sp.add_argument("--thread", type=int, choices=range(32), metavar="T")
    sp.add_argument("--scales", type=int, default=16, help="number of scales to print")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("gemm", help="packed-path GEMM C = A @ B")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--activations", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--check", action="store_true", help="also run the reference path and require bit equality")
    sp.set_defaults(func=cmd_gemm)

    sp = sub.add_parser("trace", help="print the pipeline schedule")
    sp.add_argument("--tiles", type=int, required=True)
    sp.add_argument("--slices", type=int, default=4)
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("selftest", help="exhaustive code equivalence, round trip and bank-conflict checks")
    sp.add_argument("--rounds", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_selftest)

    sp = sub.add_parser("bench", help="CPU timing of packed vs reference GEMM")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--activations", required=True)
    sp.add_argument("--iters", type=int, default=5)
    sp.set_defaults(func=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FpxError as exc:
        print(f"fpxkit {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"fpxkit {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
