"""Command-line interface.

Exit status: 0 on success, 1 on invalid input (bad flags, files or values),
2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
import typing
from pathlib import Path
from typing import List, Optional

from ._validation import ValidationError
from . import graph as G
from .pipeline import (
    RunConfig,
    RunReport,
    TrainingError,
    bench_distributions,
    bench_to_csv,
    run_search,
    run_train,
    write_artifacts,
)
from .schemes import AlphaTable, SchemeId, optimize_alpha

log = logging.getLogger("autoquant")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_bits(text: str) -> List[int]:
    """``"3"``, ``"2,4,8"`` or an inclusive range ``"2..8"``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            a, b = int(lo), int(hi)
            if a > b:
                raise ValidationError(f"empty bit range {part!r}")
            out.extend(range(a, b + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise ValidationError("no bitwidths given")
    return out


def _add_config_flags(p: argparse.ArgumentParser, seed_required: bool) -> None:
    p.add_argument("--config", help="flat key=value config file")
    hints = typing.get_type_hints(RunConfig)
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        tp = hints[f.name]
        if f.name == "seed":
            p.add_argument(flag, type=int, required=seed_required, default=None)
        elif tp is bool:
            p.add_argument(flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction)
        else:
            p.add_argument(flag, dest=f.name, type=tp, default=None)


def _config_from_args(args) -> RunConfig:
    values = RunConfig.load(args.config).to_dict() if args.config else {}
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig.from_dict(values)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="autoquant", description="Automatic mixed-precision quantization for small networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("qag", help="insert quantizers into a graph file")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expensive", default="", help="comma-separated vertex ids (default: FC/MatMul/Conv)")

    p = sub.add_parser("optimize-alpha", help="fit ClipQ/PotQ scales on sampled data")
    p.add_argument("--scheme", required=True, choices=["clipq", "potq"])
    p.add_argument("--bits", required=True, help="e.g. 3, 2,4 or 2..8")
    p.add_argument("--distribution", default="normal")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench-distributions", help="quantization loss per scheme and distribution")
    p.add_argument("--schemes", default="binary,ternary,quaternary,fixedq,resq,zoomq,clipq,potq")
    p.add_argument("--bits", default="2..4")
    p.add_argument("--distributions", default="uniform,normal,logistic,exponential,lognormal")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha-per-std", action="store_true", help="scale tabulated alphas by the data std")
    p.add_argument("--out", help="write CSV here instead of stdout")

    p = sub.add_parser("search", help="quantizer insertion and scheme search")
    _add_config_flags(p, seed_required=True)

    p = sub.add_parser("train", help="bitwidth learning from a search report")
    _add_config_flags(p, seed_required=False)
    p.add_argument("--search-report", required=True)

    p = sub.add_parser("run", help="full pipeline")
    _add_config_flags(p, seed_required=True)

    p = sub.add_parser("report", help="pretty-print a run report")
    p.add_argument("path")
    return parser


def _cmd_qag(args) -> None:
    if not Path(args.inp).is_file():
        raise ValidationError(f"graph file {args.inp} not found")
    g = G.load(args.inp)
    ve = {s.strip() for s in args.expensive.split(",") if s.strip()} or None
    gq = G.qag_transform(g, ve)
    G.save(gq, args.out)
    print(f"inserted {len(gq.quantizers())} quantizers -> {args.out}")


def _cmd_optimize_alpha(args) -> None:
    table = AlphaTable()
    scheme = SchemeId.parse(args.scheme)
    for b in parse_bits(args.bits):
        alpha = optimize_alpha(scheme, b, args.distribution, args.n, args.seed)
        table.set(scheme, b, alpha)
        print(f"{scheme.value},{b},{alpha:.6f}")
    table.save(args.out)


def _cmd_bench(args) -> None:
    rows = bench_distributions(
        [s for s in args.schemes.split(",") if s],
        parse_bits(args.bits),
        [d for d in args.distributions.split(",") if d],
        args.n,
        args.seed,
        alpha_per_std=args.alpha_per_std,
    )
    text = bench_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _cmd_search(args) -> None:
    cfg = _config_from_args(args)
    start = time.perf_counter()
    report = run_search(cfg)
    write_artifacts(report, cfg.out_dir, trace=getattr(report, "_trace_text", None),
                    elapsed=time.perf_counter() - start)
    print(report.summary())
    print(f"search report -> {Path(cfg.out_dir) / 'search_report.txt'}")


def _cmd_train(args) -> None:
    cfg = _config_from_args(args)
    search = RunReport.load(args.search_report)
    start = time.perf_counter()
    report = run_train(cfg, search)
    write_artifacts(report, cfg.out_dir, elapsed=time.perf_counter() - start)
    print(report.summary())


def _cmd_run(args) -> None:
    cfg = _config_from_args(args)
    start = time.perf_counter()
    search = run_search(cfg)
    trace = getattr(search, "_trace_text", None)
    report = run_train(cfg, RunReport.loads(search.dumps()))
    write_artifacts(report, cfg.out_dir, trace=trace, elapsed=time.perf_counter() - start)
    print(report.summary())
    print(f"report -> {Path(cfg.out_dir) / 'report.txt'}")


def _cmd_report(args) -> None:
    print(RunReport.load(args.path).summary())


COMMANDS = {
    "qag": _cmd_qag,
    "optimize-alpha": _cmd_optimize_alpha,
    "bench-distributions": _cmd_bench,
    "search": _cmd_search,
    "train": _cmd_train,
    "run": _cmd_run,
    "report": _cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except (ValidationError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, RuntimeError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
