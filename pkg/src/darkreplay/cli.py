"""Command line entry point: run, grid, probe and report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, metrics
from .data import IdxError
from .methods import KINDS, ConfigError


def _add_common(p):
    p.add_argument("--data-dir", help=f"directory with the MNIST IDX files (default ${harness.DATA_ENV} "
                                      f"or {harness.DEFAULT_DATA_DIR})")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darkreplay", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    run.add_argument("--config", help="JSON experiment config; flags below override its fields")
    run.add_argument("--setting", choices=harness.SETTINGS)
    run.add_argument("--method", choices=KINDS)
    run.add_argument("--buffer", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--alpha", type=float)
    run.add_argument("--beta", type=float)
    run.add_argument("--epochs-per-task", type=int)
    run.add_argument("--n-tasks", type=int)
    run.add_argument("--seeds", type=int, default=1, help="run this many consecutive seeds")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--output-dir", default="results")
    _add_common(run)

    grid = sub.add_parser("grid", help="validation grid search")
    grid.add_argument("--setting", required=True, choices=harness.SETTINGS)
    grid.add_argument("--method", required=True, choices=KINDS)
    grid.add_argument("--buffer", type=int)
    grid.add_argument("--grid", help="JSON object of lists, e.g. '{\"lr\": [0.03, 0.1]}'")
    grid.add_argument("--workers", type=int, default=1)
    _add_common(grid)

    probe = sub.add_parser("probe", help="analysis probe on a saved run")
    probe.add_argument("--record", required=True)
    probe.add_argument("--probe", required=True, choices=harness.PROBES)
    probe.add_argument("--max-examples", type=int)
    probe.add_argument("--n-draws", type=int, default=10)
    probe.add_argument("--sigmas", help="comma separated, must start at 0")
    probe.add_argument("--k", type=int, default=10)
    probe.add_argument("--finetune-epochs", type=int, default=5)
    probe.add_argument("--out-dir", help="write gnuplot curve files here")
    _add_common(probe)

    report = sub.add_parser("report", help="summarise saved records")
    report.add_argument("--glob", required=True, help="e.g. 'results/**/*.json'")
    report.add_argument("--format", choices=("csv", "md"), default="md")
    report.add_argument("--output")
    return parser


def _run(args) -> dict:
    d: dict = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
    method = d.get("method", {})
    method = {"kind": method} if isinstance(method, str) else dict(method)
    for flag, key in (("method", "kind"), ("buffer", "buffer_capacity"), ("lr", "lr"),
                      ("alpha", "alpha"), ("beta", "beta")):
        if getattr(args, flag) is not None:
            method[key] = getattr(args, flag)
    d["method"] = method
    for flag, key in (("setting", "setting"), ("seed", "seed"), ("data_dir", "data_dir"),
                      ("epochs_per_task", "epochs_per_task"), ("n_tasks", "n_tasks")):
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    d["output_dir"] = args.output_dir
    if "kind" not in method or "setting" not in d:
        raise ConfigError("a setting and a method are required (from --config or flags)")
    config = harness.ExperimentConfig.from_dict(d)
    if args.seeds > 1:
        summary = harness.multi_seed(config, args.seeds, args.workers)
        return {"seeds": summary.seeds, "values": summary.values, "mean": summary.mean,
                "std": summary.std, "task_il_mean": summary.task_il_mean,
                "task_il_std": summary.task_il_std,
                "records": [str(harness.record_path(args.output_dir, replace(config, seed=s)))
                            for s in summary.seeds]}
    record = harness.run(config)
    return {"record": str(harness.record_path(args.output_dir, config)),
            "final_avg_accuracy": record.final_avg_accuracy,
            "final_avg_accuracy_task_il": record.final_avg_accuracy_task_il,
            "bwt": record.bwt, "fwt": record.fwt, "forgetting": record.forgetting,
            "wall_time": record.wall_time}


def _grid(args) -> dict:
    grid = json.loads(args.grid) if args.grid else None
    extra = {"data_dir": args.data_dir}
    result = harness.grid_search(args.setting, args.method, args.buffer, grid,
                                 seed=args.seed or 0, workers=args.workers, **extra)
    return {"best": result.best.to_dict(),
            "scores": [{"point": p, "score": s} for p, s in result.scores]}


def _probe(args) -> dict:
    record = harness.ResultsRecord.from_json(Path(args.record).read_text())
    sigmas = metrics.DEFAULT_SIGMAS
    if args.sigmas:
        sigmas = tuple(float(s) for s in args.sigmas.split(","))
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    return harness.probe(record, args.probe, max_examples=args.max_examples, sigmas=sigmas,
                         n_draws=args.n_draws, k=args.k, finetune_epochs=args.finetune_epochs,
                         seed=args.seed, data_dir=args.data_dir, out_dir=args.out_dir)


def _report(args) -> str:
    records = harness.load_records(args.glob)
    if not records:
        raise FileNotFoundError(f"no records match {args.glob}")
    if args.format == "md":
        text = harness.markdown_report(records)
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=metrics.CSV_FIELDS)
        w.writeheader()
        w.writerows(harness.record_rows(records))
        text = buf.getvalue()
    if args.output:
        Path(args.output).write_text(text)
    return text


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            sys.stdout.write(_report(args))
            return 0
        handler = {"run": _run, "grid": _grid, "probe": _probe}[args.command]
        print(json.dumps(handler(args), indent=2, sort_keys=True))
        return 0
    except (ConfigError, FileNotFoundError, IdxError, ValueError, KeyError) as exc:
        error = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(error), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
