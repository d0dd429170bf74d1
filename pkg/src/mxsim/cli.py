"""``mxsim`` command line.

Exit codes: 0 success, 1 usage or invalid arguments, 2 file I/O or parse
errors, 3 numerical saturation.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .blocks import MxMatrix, dequantize_matrix, quantize_matrix
from .errorlab import (
    CrossoverTable,
    Distribution,
    DistributionSpec,
    ExperimentSpec,
    run_experiment,
)
from .formats import FORMATS, get_format
from .kernel import batched_gemm
from .mac import PrecisionMode, SaturationError
from .npu import Layer, StreamerConfig, builtin_workloads, layer_trace, load_workload, simulate_gemm, trace_csv
from .tensorfile import TensorFileError, read_any, write_f64, write_mx
from .tree import TreeConfig, Variant, cost_report

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_SATURATION = 0, 1, 2, 3
SEED_ENV = "MXSIM_SEED"
DEFAULT_MACC = 16
DEFAULT_FREQ = 500.0


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


def _render(rows: list[dict], fmt: str, title: str = "") -> str:
    if fmt == "csv":
        return _csv(rows)
    if fmt == "json":
        return json.dumps(rows, indent=2) + "\n"
    lines = [title] if title else []
    for r in rows:
        lines.append("  ".join(f"{k}={v}" for k, v in r.items()))
    return "\n".join(lines) + "\n"


def _tree(args) -> TreeConfig:
    return TreeConfig(Variant.parse(args.variant), args.macc)


def _load_operand(path: str, mode: PrecisionMode, axis: int) -> MxMatrix:
    data = read_any(path)
    if isinstance(data, np.ndarray):
        return quantize_matrix(data, mode.format, axis=axis)
    if data.format != mode.format:
        raise UsageError(f"{path} is {data.format.name.value} but mode is {mode.value}")
    if data.axis != axis:
        # re-block through the decoded values; exact because the values are representable
        return quantize_matrix(dequantize_matrix(data), mode.format, axis=axis)
    return data


def _gemm_rows(values: np.ndarray) -> list[dict]:
    return [{"row": i, "col": j, "value": repr(float(values[i, j]))} for i, j in np.ndindex(*values.shape)]


def cmd_quantize(args) -> int:
    spec = get_format(args.format)
    data = read_any(args.input)
    if not isinstance(data, np.ndarray):
        raise UsageError(f"{args.input} is already an MX tensor")
    mx = quantize_matrix(data, spec, axis=args.axis)
    write_mx(args.out, mx)
    dec = dequantize_matrix(mx)
    rows = [{"format": spec.name.value, "rows": mx.rows, "cols": mx.cols, "axis": mx.axis,
             "blocks": int(mx.scales.size), "max_abs_error": repr(float(np.max(np.abs(dec - data)))) if data.size else "0.0"}]
    _emit(_render(rows, args.output_format, "quantized"), None)
    return EXIT_OK


def _run_gemm(a: MxMatrix, b: MxMatrix, mode: PrecisionMode, tree: TreeConfig):
    out = batched_gemm(a, b, mode, tree)
    if out.saturated.any():
        i, j = map(int, np.argwhere(out.saturated)[0])
        raise SaturationError(f"accumulator saturated at output ({i}, {j})")
    return out.to_float()


def cmd_dot(args) -> int:
    mode = PrecisionMode.parse(args.mode)
    a = _load_operand(args.a, mode, 1)
    b_raw = read_any(args.b)
    b_vals = b_raw if isinstance(b_raw, np.ndarray) else dequantize_matrix(b_raw)
    if a.rows != 1 or b_vals.shape[0] != 1:
        raise UsageError("dot expects two row vectors (1 x K tensors)")
    b = quantize_matrix(b_vals.T, mode.format, axis=0)
    if a.cols != b.rows:
        raise UsageError(f"vector lengths differ: {a.cols} vs {b.rows}")
    val = float(_run_gemm(a, b, mode, _tree(args))[0, 0])
    cycles = -(-a.cols // 32) * 32 // mode.products_per_cycle
    _emit(_render([{"mode": mode.value, "variant": args.variant, "macc": args.macc, "length": a.cols,
                    "cycles": cycles, "value": repr(val)}], args.output_format, "dot"), None)
    return EXIT_OK


def cmd_gemm(args) -> int:
    mode = PrecisionMode.parse(args.mode)
    a = _load_operand(args.a, mode, 1)
    b = _load_operand(args.b, mode, 0)
    if a.cols != b.rows:
        raise UsageError(f"inner dimensions disagree: {a.cols} vs {b.rows}")
    y = _run_gemm(a, b, mode, _tree(args))
    if args.out:
        write_f64(args.out, y)
    if args.output_format == "human":
        text = f"gemm {a.rows}x{a.cols} @ {b.rows}x{b.cols} -> {y.shape[0]}x{y.shape[1]}\n"
        text += np.array2string(y, threshold=64, precision=6) + "\n"
    else:
        text = _render(_gemm_rows(y), args.output_format)
    _emit(text, None)
    return EXIT_OK


def _widths(text: str | None) -> tuple[int, ...]:
    if not text:
        return tuple(range(2, 24))
    out = set()
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            out.update(range(int(lo), int(hi) + 1))
        else:
            out.add(int(part))
    return tuple(sorted(out))


def cmd_sweep(args) -> int:
    dist = DistributionSpec(Distribution(args.dist), seed=args.seed)
    exp = ExperimentSpec(get_format(args.format), args.size, dist, _widths(args.widths),
                         Variant.parse(args.variant), args.trials)
    curve = run_experiment(exp)
    rows = curve.rows()
    if args.output_format == "human":
        lines = [f"{exp.format.name.value} {exp.matrix_size}x{exp.matrix_size} {dist.kind.value} seed={dist.seed}",
                 f"{'M':>3} {'addition':>12} {'quantization':>12}"]
        for m, add, q in zip(curve.widths, curve.addition_error, curve.quantization_error):
            lines.append(f"{m:>3} {add:>12.4e} {q:>12.4e}")
        lines.append(f"critical width: {curve.crossover}")
        text = "\n".join(lines) + "\n"
    else:
        text = _render(rows, args.output_format)
    _emit(text, args.out)
    return EXIT_OK


def _grid_point(point):
    fmt, size, dist, seed, trials, variant = point
    exp = ExperimentSpec(get_format(fmt), size, DistributionSpec(Distribution(dist), seed=seed),
                         variant=Variant.parse(variant), trials=trials)
    return run_experiment(exp, stop_at_crossover=True).crossover


def cmd_crossover(args) -> int:
    formats = [get_format(f).name.value for f in args.formats.split(",")]
    sizes = [int(s) for s in args.sizes.split(",")]
    dists = [Distribution(d).value for d in args.dists.split(",")]
    points = [(f, n, d, args.seed, args.trials, args.variant) for f in formats for n in sizes for d in dists]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_grid_point, points))
    else:
        results = [_grid_point(p) for p in points]
    table = CrossoverTable({(f, n, d): r for (f, n, d, *_), r in zip(points, results)})
    rows = table.rows()
    if args.output_format == "human":
        text = _render(rows, "human", f"critical widths (max {table.maximum})")
    else:
        text = _render(rows, args.output_format)
    _emit(text, args.out)
    return EXIT_OK


def cmd_costs(args) -> int:
    variants = list(Variant) if args.variant == "all" else [Variant.parse(args.variant)]
    rows = [cost_report(TreeConfig(v, args.macc)).as_dict() for v in variants]
    if args.output_format == "human":
        lines = []
        for r in rows:
            lines.append(f"{r['variant']} (M_acc={r['mantissa_bits']})")
            for k in ("l2_extension", "l2_shifter", "l2_adder", "product_sum", "acc_alignment",
                      "acc_adder", "normalizer_input", "mux_bits"):
                lines.append(f"  {k.replace('_', ' ') + ' width':<24} {r[k]}")
        text = "\n".join(lines) + "\n"
    else:
        text = _render(rows, args.output_format)
    _emit(text, args.out)
    return EXIT_OK


def _workload_path(name: str) -> Path:
    shipped = builtin_workloads()
    if name in shipped:
        return shipped[name]
    return Path(name)


def cmd_simulate(args) -> int:
    wl = load_workload(_workload_path(args.workload))
    streamers = StreamerConfig(channels=args.channels)
    report = simulate_gemm(wl, streamers, args.freq)
    if args.output_format == "json":
        text = report.to_json() + "\n"
    elif args.output_format == "csv":
        text = report.to_csv()
    else:
        lines = [f"{report.workload}: {len(report.layers)} layers at {report.freq_mhz:g} MHz",
                 f"{'layer':<22} {'mode':<12} {'tiles':>10} {'total cycles':>14} {'util':>8} {'GOPS':>8}"]
        for l in report.layers:
            lines.append(f"{l.label:<22} {l.mode:<12} {l.tiles:>10} {l.total_cycles:>14} {l.utilization:>8.4f} {l.gops:>8.1f}")
        lines.append(f"total cycles {report.total_cycles}, utilization {report.utilization:.4f}, {report.gops:.1f} GOPS")
        text = "\n".join(lines) + "\n"
    _emit(text, args.out)
    if args.trace:
        label = args.trace_layer or wl.layers[0].label
        layer = next((l for l in wl.layers if l.label == label), None)
        if layer is None:
            raise UsageError(f"no layer labelled {label!r}")
        layer = Layer(layer.label, layer.M * wl.batch, layer.K, layer.N, layer.mode)
        Path(args.trace).write_text(trace_csv(layer_trace(layer, streamers)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mxsim", description="MX multiply-accumulate emulator, error lab and NPU simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help="write the report here instead of stdout", default_fmt="human"):
        sp.add_argument("--output-format", "-f", choices=("human", "csv", "json"), default=default_fmt)
        if out_help:
            sp.add_argument("--out", "-o", help=out_help)

    def tree_flags(sp):
        sp.add_argument("--variant", default=Variant.HYBRID_ITER2.value, choices=[v.value for v in Variant])
        sp.add_argument("--macc", type=int, default=DEFAULT_MACC, help="accumulator mantissa bits (2..23)")

    modes = [m.value for m in PrecisionMode]
    fmts = sorted({f.name.value.lower() for f in FORMATS.values()})

    sp = sub.add_parser("quantize", help="quantize an FP64 tensor file to MX")
    sp.add_argument("--format", required=True, help=f"element format ({', '.join(fmts)})")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", "-o", required=True)
    sp.add_argument("--axis", type=int, choices=(0, 1), default=1, help="1: blocks along rows, 0: along columns")
    common(sp, out_help=None)
    sp.set_defaults(func=cmd_quantize)

    sp = sub.add_parser("dot", help="MX dot product of two row vectors")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--mode", required=True, help=", ".join(modes))
    tree_flags(sp)
    common(sp, out_help=None)
    sp.set_defaults(func=cmd_dot)

    sp = sub.add_parser("gemm", help="MX GeMM through the MAC model")
    sp.add_argument("--a", required=True, help="left operand (FP64 or MX tensor file)")
    sp.add_argument("--b", required=True, help="right operand (FP64 or MX tensor file)")
    sp.add_argument("--mode", required=True, help=", ".join(modes))
    sp.add_argument("--out", "-o", help="write the accumulator outputs as an FP64 tensor file")
    tree_flags(sp)
    common(sp, out_help=None)
    sp.set_defaults(func=cmd_gemm)

    sp = sub.add_parser("sweep", help="addition vs quantization error over accumulator widths")
    sp.add_argument("--format", required=True)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--dist", choices=[d.value for d in Distribution], default="gaussian")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int, default=8)
    sp.add_argument("--widths", help="e.g. 2-23 or 4,8,12")
    sp.add_argument("--variant", default=Variant.HYBRID_ITER2.value,
                    choices=[Variant.FP32_ADDITION.value, Variant.HYBRID_ITER1.value, Variant.HYBRID_ITER2.value])
    common(sp, default_fmt="csv")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("crossover", help="critical accumulator width over a grid")
    sp.add_argument("--formats", default=",".join(f.name.value for f in FORMATS.values()))
    sp.add_argument("--sizes", default="64,256")
    sp.add_argument("--dists", default="uniform,gaussian")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--trials", type=int, default=8)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--variant", default=Variant.HYBRID_ITER2.value,
                    choices=[Variant.FP32_ADDITION.value, Variant.HYBRID_ITER1.value, Variant.HYBRID_ITER2.value])
    common(sp, default_fmt="csv")
    sp.set_defaults(func=cmd_crossover)

    sp = sub.add_parser("costs", help="datapath widths of a reduction tree")
    sp.add_argument("--variant", default=Variant.HYBRID_ITER2.value, choices=[v.value for v in Variant] + ["all"])
    sp.add_argument("--macc", type=int, default=DEFAULT_MACC)
    common(sp)
    sp.set_defaults(func=cmd_costs)

    sp = sub.add_parser("simulate", help="cycle-level NPU simulation of a GeMM workload")
    sp.add_argument("--workload", required=True,
                    help=f"workload JSON path or shipped name ({', '.join(builtin_workloads())})")
    sp.add_argument("--freq", type=float, help="clock in MHz (default: workload value)")
    sp.add_argument("--channels", type=int, default=4, help="provisioned streamer channels per operand")
    sp.add_argument("--trace", help="write the event trace of one layer as CSV")
    sp.add_argument("--trace-layer", help="label of the traced layer (default: first)")
    common(sp)
    sp.set_defaults(func=cmd_simulate)
    return p


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = args.command
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        if args.command == "simulate" and args.freq is None:
            path = _workload_path(args.workload)
            args.freq = load_workload(path).freq_mhz if path.exists() else DEFAULT_FREQ
        print(f"mxsim {stage}: {json.dumps(_resolved(args))}", file=sys.stderr)
        return args.func(args)
    except SaturationError as err:
        print(f"mxsim {stage}: saturation: {err}", file=sys.stderr)
        return EXIT_SATURATION
    except (OSError, TensorFileError, json.JSONDecodeError, KeyError) as err:
        print(f"mxsim {stage}: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as err:
        print(f"mxsim {stage}: invalid input: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
