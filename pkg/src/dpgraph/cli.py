"""Command-line front end: analyze a model, run it privately, benchmark.

Exit codes: 0 success, 2 input or validation problems, 3 analysis or
optimizer failures, 4 invalid privacy parameters. The `run` command only
ever writes privatized values; there is no flag that exposes raw results.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    DimensionTooLarge,
    DpGraphError,
    FingerprintMismatch,
    InvalidParams,
    NonFinite,
    NumericalError,
    OptimizerFailure,
)
from .lipschitz import METHODS, OptimizerConfig, estimate_sensitivity
from .mechanism import PrivacyParams, privatize
from .model_io import load_model
from .report import SensitivityReport
from . import runtime

_ANALYSIS_ERRORS = (OptimizerFailure, NumericalError, DimensionTooLarge,
                    FingerprintMismatch, NonFinite)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_data_tensor(path: Path, shape) -> np.ndarray:
    try:
        raw = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except OSError as err:
        raise DpGraphError(f"cannot read data file {path}: {err}") from err
    except ValueError as err:
        raise DpGraphError(f"cannot parse CSV {path}: {err}") from err
    dims = shape.dims
    if len(dims) == 2:
        if raw.shape != dims:
            raise DpGraphError(
                f"{path}: declared shape {shape} but CSV is {raw.shape}")
        return raw
    if len(dims) == 1:
        if raw.shape == (1, dims[0]):
            return raw[0]
        if raw.shape == (dims[0], 1):
            return raw[:, 0]
        raise DpGraphError(
            f"{path}: declared shape {shape} but CSV is {raw.shape}")
    if raw.shape != (1, 1):
        raise DpGraphError(f"{path}: declared scalar but CSV is {raw.shape}")
    return np.asarray(raw[0, 0])


def _collect_data(graph, specs: list[str]) -> dict[str, np.ndarray]:
    needed = {graph.nodes[h].name: graph.nodes[h].shape for h in graph.leaves()}
    data = {}
    for spec in specs:
        if "=" in spec:
            name, _, path = spec.partition("=")
        elif len(needed) == 1:
            name, path = next(iter(needed)), spec
        else:
            raise DpGraphError(
                f"--data {spec!r}: use name=path when the model has several "
                f"tensors ({', '.join(sorted(needed))})")
        if name not in needed:
            raise DpGraphError(f"--data names unknown tensor {name!r}")
        data[name] = _load_data_tensor(Path(path), needed[name])
    missing = sorted(set(needed) - set(data))
    if missing:
        raise DpGraphError(f"no data supplied for tensor(s): {', '.join(missing)}")
    return data


def _print_report_table(reports: list[SensitivityReport]) -> None:
    print(f"{'method':<12} {'bound':>14} {'interval_low':>14} "
          f"{'certified':>9} {'wall_ms':>9}")
    for r in reports:
        print(f"{r.method:<12} {r.bound:>14.6f} {r.interval_low:>14.6f} "
              f"{'yes' if r.certified else 'no':>9} {r.wall_time * 1e3:>9.1f}")
        if r.warning:
            print(f"  warning: {r.warning}")


def _analysis_dict(model_path: str, fingerprint: str,
                   reports: list[SensitivityReport]) -> dict:
    return {
        "tool_version": __version__,
        "model_path": str(model_path),
        "fingerprint": fingerprint,
        "reports": [r.to_json_dict() for r in reports],
    }


def cmd_analyze(args) -> int:
    try:
        graph = load_model(args.model)
        graph.require_valid()
    except DpGraphError as err:
        return _fail(2, str(err))
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        return _fail(2, f"unknown method(s) {bad}; choose from {METHODS}")
    config = OptimizerConfig(seed=args.seed, n_samples=args.samples)
    reports = []
    try:
        fingerprint = runtime.graph_fingerprint(graph)
        for method in methods:
            reports.append(estimate_sensitivity(graph, method=method,
                                                config=config))
    except InvalidParams as err:
        return _fail(4, str(err))
    except _ANALYSIS_ERRORS as err:
        return _fail(3, str(err))
    except DpGraphError as err:
        return _fail(2, str(err))
    _print_report_table(reports)
    out = Path(args.out) if args.out else Path(args.model).with_suffix(".analysis.json")
    out.write_text(json.dumps(_analysis_dict(args.model, fingerprint, reports),
                              indent=2, sort_keys=True) + "\n")
    print(f"report written to {out}")
    return 0


def _load_cached_report(path: str, fingerprint: str) -> SensitivityReport:
    try:
        doc = json.loads(Path(path).read_text())
        reports = [SensitivityReport.from_json_dict(r) for r in doc["reports"]]
    except (OSError, ValueError, KeyError, TypeError) as err:
        raise DpGraphError(f"cannot read analysis file {path}: {err}") from err
    usable = [r for r in reports
              if r.fingerprint == fingerprint and r.method != "grid_oracle"]
    if not usable:
        raise FingerprintMismatch(
            f"analysis file {path} has no report matching the model fingerprint")
    usable.sort(key=lambda r: r.bound)
    return usable[0]


def cmd_run(args) -> int:
    try:
        graph = load_model(args.model)
        graph.require_valid()
        program = runtime.compile(graph)
        data = _collect_data(graph, args.data or [])
    except DpGraphError as err:
        return _fail(2, str(err))

    try:
        if args.cap is not None:
            params = PrivacyParams(epsilon=args.epsilon, delta=args.delta,
                                   mode="max_sensitivity_cap",
                                   sensitivity_cap=args.cap)
        else:
            params = PrivacyParams(epsilon=args.epsilon, delta=args.delta)
    except InvalidParams as err:
        return _fail(4, str(err))

    try:
        if args.analysis:
            report = _load_cached_report(args.analysis, program.fingerprint)
        else:
            config = OptimizerConfig(seed=args.optimizer_seed)
            report = estimate_sensitivity(graph, method="global_opt",
                                          config=config)
    except _ANALYSIS_ERRORS as err:
        return _fail(3, str(err))
    except DpGraphError as err:
        return _fail(2, str(err))

    try:
        output = privatize(program, data, params, report, seed=args.seed)
    except InvalidParams as err:
        return _fail(4, str(err))
    except _ANALYSIS_ERRORS as err:
        return _fail(3, str(err))
    except DpGraphError as err:
        return _fail(2, str(err))

    doc = output.to_json_dict()
    doc["fingerprint"] = program.fingerprint
    out = Path(args.out) if args.out else Path(args.model).with_suffix(".private.json")
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"sigma={output.sigma:.6g} clipped_fraction={output.clipped_fraction:.4f} "
          f"output_l2_norm={output.output_l2_norm:.6g} seed={output.seed}")
    print(f"privatized output written to {out}")
    return 0


def cmd_bench(args) -> int:
    try:
        widths = [int(w) for w in args.widths.split(",") if w.strip()]
        if not widths or any(w < 1 for w in widths):
            raise ValueError("widths must be positive integers")
        if args.reps < 1:
            raise ValueError("reps must be >= 1")
    except ValueError as err:
        return _fail(2, str(err))
    if args.reps == 1:
        print("warning: a single repetition gives noisy medians", file=sys.stderr)
    records = runtime.benchmark(widths, repetitions=args.reps)
    out = Path(args.out) if args.out else Path("bench.csv")
    runtime.write_bench_csv(records, out)
    print(f"{'width':>6} {'params':>10} {'compile_s':>10} {'cached_s':>10} "
          f"{'exec_us':>10}")
    for r in records:
        print(f"{r.width:>6} {r.param_count:>10} {r.compile_s:>10.4f} "
              f"{r.compile_cached_s:>10.4f} {r.exec_us:>10.1f}")
    print(f"benchmark written to {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpgraph",
        description="Sensitivity analysis and differentially private execution "
                    "of tensor queries")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="bound the sensitivity of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--methods", default="ibp,global_opt",
                   help="comma list from ibp,global_opt,grid_oracle")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--seed", type=int, default=0, help="optimizer sampling seed")
    p.add_argument("--samples", type=int, default=128)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("run", help="execute a model with privatized output")
    p.add_argument("--model", required=True)
    p.add_argument("--data", action="append", default=[],
                   metavar="NAME=CSV", help="repeatable; bare path if one tensor")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--seed", type=int, default=None, help="noise seed")
    p.add_argument("--cap", type=float, default=None,
                   help="refuse when the sensitivity bound exceeds this cap")
    p.add_argument("--analysis", default=None,
                   help="reuse a fingerprint-matched analysis report")
    p.add_argument("--optimizer-seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output JSON path")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("bench", help="compile/execute timing across widths")
    p.add_argument("--widths", default="16,64,256,1024")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
