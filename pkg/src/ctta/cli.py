"""Command-line harness: ``pretrain``, ``adapt``, ``sweep`` and ``report``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import experiment, metrics, nn
from .errors import ConfigError, ContractError

logger = logging.getLogger("ctta")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
COMPARISON_FILE = "comparison.csv"
SWEEP_FILE = "sweep_{param}.csv"


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([metrics._fmt(v) for v in row])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def _load_source(ckpt: str, exp: cfgmod.ExperimentConfig) -> nn.ModelState:
    model, _ = nn.load_checkpoint(ckpt)
    if model.architecture_id != exp.model.architecture or model.num_classes != exp.dataset.num_classes:
        raise ContractError(
            f"checkpoint {ckpt} holds {model.architecture_id}/{model.num_classes} classes, "
            f"config expects {exp.model.architecture}/{exp.dataset.num_classes} classes"
        )
    return model


def cmd_pretrain(args) -> int:
    exp = cfgmod.load_config(args.config)
    d, m = exp.dataset, exp.model
    result = experiment.pretrained_source(
        m.architecture, d.num_classes, d.train_size, d.test_size, m.pretrain_epochs, m.seed, m.batch_size, m.lr
    )
    extra = {"clean_accuracy": result.clean_accuracy, "config": str(args.config)}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(result.model, out, extra)
    print(f"clean test error: {100 * (1 - result.clean_accuracy):.2f}%  ({m.architecture}, {d.num_classes} classes)")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def _export_runs(runs: dict[str, experiment.MethodRun], out: Path, exp: cfgmod.ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, run in runs.items():
        if exp.output.per_batch_csv:
            metrics.export_log_csv(run.log, out / f"log_{name}.csv")
        if exp.output.summary_csv:
            metrics.export_summary_csv(run.summary, out / f"summary_{name}.csv")
    columns, rows = experiment.comparison_table(runs)
    _write_rows(out / COMPARISON_FILE, ["method", *columns, "mean"], [[n, *vals, mean] for n, vals, mean in rows])


def cmd_adapt(args) -> int:
    exp = cfgmod.load_config(args.config)
    source = _load_source(args.ckpt, exp)
    runs = experiment.run_methods(source, exp.stream_spec(), exp.methods)
    out = Path(args.out)
    _export_runs(runs, out, exp)
    columns, rows = experiment.comparison_table(runs)
    print(format_table(columns, [(n, v, m) for n, v, m in rows]))
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = cfgmod.load_config(args.config)
    values = cfgmod.parse_sweep_values(args.param, args.values)
    base = exp.methods.get(exp.sweep_method)
    if base is None:
        raise ConfigError(f"sweep.method {exp.sweep_method!r} is not listed in adapt.methods")
    configs = {}
    for v in values:
        try:
            configs[f"{args.param}={v}"] = base.with_(**{args.param: v})
        except ConfigError as exc:
            raise ConfigError(f"sweep {args.param}={v}: {exc}") from None
    source = _load_source(args.ckpt, exp)
    runs = experiment.run_methods(source, exp.stream_spec(), configs)
    out = Path(args.out or exp.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / SWEEP_FILE.format(param=args.param)
    _write_rows(path, ["value", "mean_error"], [[v, runs[f"{args.param}={v}"].log.mean_error()] for v in values])
    for v in values:
        print(f"{args.param}={v}: mean error {100 * runs[f'{args.param}={v}'].log.mean_error():.2f}%")
    print(f"sweep written to {path}")
    return EXIT_OK


def format_table(columns: list[str], rows: list[tuple[str, list[float], float]]) -> str:
    """Plain aligned table of error percentages: methods down, columns across, Mean last."""
    header = ["method", *columns, "Mean"]
    body = [[name, *(f"{100 * v:.2f}" for v in vals), f"{100 * mean:.2f}"] for name, vals, mean in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for r in [header, *body]:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines)


def load_report(directory: str | Path) -> tuple[list[str], list[tuple[str, list[float], float]], list[str]]:
    """Rows from every ``summary_<method>.csv`` in ``directory`` plus a list of problems found."""
    d = Path(directory)
    problems: list[str] = []
    if not d.is_dir():
        return [], [], [f"missing directory: {d}"]
    summaries = sorted(d.glob("summary_*.csv"))
    if not summaries:
        problems.append(f"missing files: no summary_<method>.csv in {d}")
    logs = {p.name[len("log_") : -len(".csv")] for p in d.glob("log_*.csv")}
    names = {p.name[len("summary_") : -len(".csv")] for p in summaries}
    for name in sorted(logs - names):
        problems.append(f"missing file: {d / f'summary_{name}.csv'} (log_{name}.csv exists)")
    columns: list[str] = []
    rows = []
    for path in summaries:
        name = path.name[len("summary_") : -len(".csv")]
        try:
            entries = metrics.read_summary_csv(path)
        except (ContractError, ValueError, KeyError) as exc:
            problems.append(f"unreadable file: {path} ({exc})")
            continue
        kinds = {k: v for scope, k, v in entries if scope == "kind"}
        overall = [v for scope, _, v in entries if scope == "overall"]
        if not overall:
            problems.append(f"incomplete file: {path} has no overall row")
            continue
        for k in kinds:
            if k not in columns:
                columns.append(k)
        rows.append((name, kinds, overall[0]))
    table = [(n, [k.get(c, float("nan")) for c in columns], m) for n, k, m in rows]
    return columns, table, problems


def cmd_report(args) -> int:
    columns, rows, problems = load_report(args.dir)
    if rows:
        print(format_table(columns, rows))
    for p in problems:
        print(p, file=sys.stderr)
    return EXIT_RUNTIME if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctta", description="Continual test-time adaptation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-method progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the source model on clean glyphs")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="run every configured method over the target stream")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="results directory")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="rerun one method over a list of hyperparameter values")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--param", required=True, choices=sorted(cfgmod.SWEEP_PARAMS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", default=None, help="results directory (default: output.dir)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="print the comparison table of a results directory")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ContractError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
