"""Command-line pipeline: simulate -> snapshot -> train -> eval -> ablate / horizon -> report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from datetime import date
from pathlib import Path

from . import experiments as ex
from .graphs import (DatasetConfig, apply_edge_filter, build_dataset, dump_graphs, fit_normalizer, load_graphs,
                     parse_mode, split_indices)
from .model import ModelConfig
from .records import format_hhmm, load_topology, parse_hhmm, parse_records, serialize_records
from .sim import DisturbanceConfig, simulate

log = logging.getLogger("railnet")


class CliError(Exception):
    pass


def _read(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"input file not found: {p}")
    return p.read_text()


def _split_arg(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"split must look like 60/20/20, got {text!r}") from None
    if len(parts) != 3 or sum(parts) != 100 or min(parts) < 0:
        raise argparse.ArgumentTypeError(f"split must be three non-negative integers summing to 100, got {text!r}")
    return parts


def _clock_arg(text: str) -> int:
    try:
        return parse_hhmm(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = ex.TrainConfig()
    p.add_argument("--split", type=_split_arg, default=(60, 20, 20), help="train/val/test percentages (default 60/20/20)")
    p.add_argument("--lr", type=float, default=d.lr, help=f"initial Adam learning rate (default {d.lr})")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help=f"graphs per batch (default {d.batch_size})")
    p.add_argument("--max-epochs", type=int, default=d.max_epochs, help=f"epoch cap (default {d.max_epochs})")
    p.add_argument("--layers", type=int, default=ModelConfig().num_layers, help="SAGE-Het message-passing layers (default 4)")
    p.add_argument("--hidden", type=int, default=ModelConfig().hidden, help="SAGE-Het hidden width (default 256)")


def _train_config(args) -> ex.TrainConfig:
    return ex.TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs, seed=args.seed)


def _model_config(args) -> ModelConfig:
    return ModelConfig(num_layers=args.layers, hidden=args.hidden)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railnet",
        description="Synthetic railway delays, snapshot graphs and SAGE-Het delay prediction. "
                    "Set RAILNET_LOG (DEBUG, INFO, WARNING) to control log verbosity.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", help="simulate operation records for a topology")
    p.add_argument("--topology", required=True, help="network topology JSON")
    p.add_argument("--disturbance", required=True, help="disturbance configuration JSON")
    p.add_argument("--days", type=int, required=True, help="number of operating days to simulate")
    p.add_argument("--seed", type=int, required=True, help="run seed (combined with the disturbance seed)")
    p.add_argument("--start-date", type=date.fromisoformat, default=date(2015, 3, 24),
                   help="first operating day, YYYY-MM-DD (default 2015-03-24)")
    p.add_argument("--out", required=True, help="output records CSV")

    p = sub.add_parser("snapshot", help="build the snapshot-graph dataset from records")
    p.add_argument("--records", required=True, help="operation records CSV")
    p.add_argument("--topology", required=True, help="network topology JSON")
    p.add_argument("--interval", type=int, required=True, help="snapshot step in minutes")
    p.add_argument("--horizon", type=int, default=None, help="prediction horizon in minutes (default: the interval)")
    p.add_argument("--start", type=_clock_arg, default=8 * 60, help="first snapshot time HH:MM (default 08:00)")
    p.add_argument("--end", type=_clock_arg, default=23 * 60, help="last snapshot time HH:MM (default 23:00)")
    p.add_argument("--max-delay", type=int, default=90,
                   help="drop graphs with any current delay or label above this many minutes (default 90)")
    p.add_argument("--out", required=True, help="output dataset (JSON Lines); sidecar written to OUT.meta.json")

    p = sub.add_parser("train", help="train a model on a dataset split")
    p.add_argument("--graphs", required=True, help="dataset JSON Lines file")
    p.add_argument("--model", choices=ex.MODEL_KINDS, default="sage-het", help="model kind (default sage-het)")
    p.add_argument("--mode", default="full", help="edge filter: full, selflink or cut-K (default full)")
    p.add_argument("--seed", type=int, required=True, help="seed for the split, initialization and shuffling")
    p.add_argument("--out", required=True, help="run directory to create")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="evaluate a trained run on its test split")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--subset", choices=("all", "delayed"), default="all",
                   help="all test RT nodes, or only those with label > 0 (default all)")
    p.add_argument("--out", default=None, help="output directory (default: the run directory)")

    p = sub.add_parser("ablate", help="retrain SAGE-Het under train-train edge filters")
    p.add_argument("--graphs", required=True, help="dataset JSON Lines file")
    p.add_argument("--mode", choices=("selflink", "cut", "full", "suite"), required=True,
                   help="edge filter, or 'suite' for selflink, cut-3/5/10/20 and full")
    p.add_argument("--threshold", type=float, default=None, help="headway threshold in minutes for --mode cut")
    p.add_argument("--seed", type=int, required=True, help="seed shared by every retrained mode")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)

    p = sub.add_parser("horizon", help="rebuild, train and test per prediction horizon")
    p.add_argument("--records", required=True, help="operation records CSV")
    p.add_argument("--topology", required=True, help="network topology JSON")
    p.add_argument("--set", type=_int_list, default=[10, 20, 30], help="comma-separated horizons (default 10,20,30)")
    p.add_argument("--models", default=",".join(ex.MODEL_KINDS),
                   help="comma-separated model kinds (default keep-constant,ann,sage-het)")
    p.add_argument("--start", type=_clock_arg, default=8 * 60, help="first snapshot time HH:MM (default 08:00)")
    p.add_argument("--end", type=_clock_arg, default=23 * 60, help="last snapshot time HH:MM (default 23:00)")
    p.add_argument("--max-delay", type=int, default=90, help="graph filter threshold in minutes (default 90)")
    p.add_argument("--seed", type=int, required=True, help="seed for splits, initialization and shuffling")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes (default 1)")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)

    p = sub.add_parser("report", help="residual histogram and CDF tables for a trained run")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--subset", choices=("all", "delayed"), default="all", help="test subset (default all)")
    p.add_argument("--bin-width", type=float, default=1.0, help="histogram bin width in minutes (default 1)")
    p.add_argument("--thresholds", type=_int_list, default=None,
                   help="comma-separated CDF thresholds in minutes (default 0..10)")
    p.add_argument("--out", default=None, help="output directory (default: the run directory)")
    return parser


def _log_config(args) -> None:
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    log.info("resolved config: %s", json.dumps(resolved, default=str, sort_keys=True))


def cmd_simulate(args) -> None:
    topo = load_topology(_read(args.topology))
    dist = DisturbanceConfig.from_json(_read(args.disturbance))
    if args.days < 1:
        raise CliError("--days must be >= 1")
    recs = simulate(topo, dist, args.days, args.seed, start_date=args.start_date)
    ex.write_text(args.out, serialize_records(recs))
    log.info("wrote %d records to %s", len(recs), args.out)


def cmd_snapshot(args) -> None:
    topo = load_topology(_read(args.topology))
    recs = parse_records(_read(args.records))
    horizon = args.horizon or args.interval
    if args.interval < 1 or horizon < 1:
        raise CliError("--interval and --horizon must be >= 1")
    cfg = DatasetConfig(horizon, args.start, args.end, args.interval, args.max_delay)
    graphs = build_dataset(recs, topo, cfg)
    if not graphs:
        raise CliError("no snapshot survived filtering")
    ex.write_text(args.out, dump_graphs(graphs))
    meta = {
        "horizon": horizon, "interval": args.interval, "start": format_hhmm(args.start), "end": format_hhmm(args.end),
        "max_delay": args.max_delay, "n_graphs": len(graphs),
        "note": "training fits its own statistics on the train split; these full-dataset values are for reference",
        "normalization": fit_normalizer(graphs).to_dict(),
    }
    ex.write_text(str(args.out) + ".meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %d graphs to %s", len(graphs), args.out)


def _load_dataset(path):
    graphs = load_graphs(_read(path))
    if not graphs:
        raise CliError(f"{path}: empty dataset")
    return graphs


def _filter(graphs, mode):
    try:
        base, thr = parse_mode(mode)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return [apply_edge_filter(g, base, thr) for g in graphs]


def cmd_train(args) -> None:
    graphs = _filter(_load_dataset(args.graphs), args.mode)
    tr_idx, va_idx, te_idx = split_indices(len(graphs), args.split, args.seed)
    if not tr_idx or not va_idx:
        raise CliError("split leaves the train or validation set empty")
    cfg, mcfg = _train_config(args), _model_config(args)
    model, history = ex.train_model(args.model, [graphs[i] for i in tr_idx], [graphs[i] for i in va_idx], cfg, mcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.save_model(out / "params.bin", model)
    ex.write_text(out / "history.csv", ex.history_csv(history))
    ex.write_text(out / "split.json", json.dumps({"train": tr_idx, "val": va_idx, "test": te_idx}) + "\n")
    # dataset path kept relative to the run directory so runs relocate with their data
    rel = os.path.relpath(Path(args.graphs).resolve(), out.resolve())
    run = {"graphs": Path(rel).as_posix(), "model": args.model, "mode": args.mode, "seed": args.seed,
           "split": list(args.split), "train": asdict(cfg), "model_config": mcfg.to_dict(),
           "horizon": graphs[0].horizon, "epochs": len(history)}
    ex.write_text(out / "run.json", json.dumps(run, indent=2, sort_keys=True) + "\n")
    log.info("trained %s for %d epochs into %s", args.model, len(history), out)


def _load_run(run_dir):
    run_dir = Path(run_dir)
    run = json.loads(_read(run_dir / "run.json"))
    split = json.loads(_read(run_dir / "split.json"))
    graphs = _filter(_load_dataset(run_dir / run["graphs"]), run["mode"])
    test = [graphs[i] for i in split["test"]]
    if not test:
        raise CliError("run has an empty test split")
    return run, ex.load_model(run_dir / "params.bin"), test


def cmd_eval(args) -> None:
    run, model, test = _load_run(args.run)
    report = ex.evaluate(model, test, args.subset)
    out = Path(args.out or args.run)
    row = ex.metrics_row(run["model"], run["horizon"], run["mode"], report, run["seed"])
    ex.write_text(out / "metrics.csv", ex.metrics_csv([row]))
    ex.write_text(out / "predictions.csv", ex.predictions_csv(report))
    if report.empty:
        log.warning("subset %s is empty; metrics left blank", args.subset)
    else:
        log.info("%s %s: MAE %.4f RMSE %.4f over %d nodes", run["model"], args.subset, report.mae, report.rmse, report.n)


def cmd_ablate(args) -> None:
    if args.mode == "suite":
        modes = list(ex.ABLATION_MODES)
    elif args.mode == "cut":
        if args.threshold is None:
            raise CliError("--mode cut needs --threshold")
        modes = [f"cut-{args.threshold:g}", "full"]
    else:
        modes = [args.mode] if args.mode == "full" else [args.mode, "full"]
    graphs = _load_dataset(args.graphs)
    results = ex.ablation_suite(graphs, modes, _train_config(args), args.split, _model_config(args), args.jobs)
    rows = ex.result_rows(results)
    out = Path(args.out)
    ex.write_text(out / "metrics.csv", ex.metrics_csv(rows, extra=("mae_increase_pct", "rmse_increase_pct")))
    for r in results:
        ex.write_text(out / f"history_{r['spec'].mode}.csv", ex.history_csv(r["history"]))
    log.info("ablation over %s written to %s", modes, out)


def cmd_horizon(args) -> None:
    topo = load_topology(_read(args.topology))
    recs = parse_records(_read(args.records))
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    bad = [m for m in models if m not in ex.MODEL_KINDS]
    if bad:
        raise CliError(f"unknown model kinds {bad}")
    ds = DatasetConfig(start=args.start, end=args.end, max_delay=args.max_delay)
    try:
        results = ex.horizon_sweep(recs, topo, args.set, _train_config(args), models, args.split,
                                   _model_config(args), ds, args.jobs)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = Path(args.out)
    ex.write_text(out / "metrics.csv", ex.metrics_csv(ex.result_rows(results)))
    for r in results:
        if r["history"]:
            ex.write_text(out / f"history_{r['spec'].kind}_h{r['spec'].horizon}.csv", ex.history_csv(r["history"]))
    log.info("horizon sweep written to %s", out)


def cmd_report(args) -> None:
    _, model, test = _load_run(args.run)
    report = ex.evaluate(model, test, args.subset)
    if report.empty:
        raise CliError(f"subset {args.subset} is empty")
    thresholds = tuple(args.thresholds) if args.thresholds else ex.CDF_THRESHOLDS
    hist, cdf = ex.residual_report(report, args.bin_width, thresholds)
    out = Path(args.out or args.run)
    ex.write_text(out / "residual_hist.csv", hist)
    ex.write_text(out / "residual_cdf.csv", cdf)
    log.info("residual tables written to %s", out)


COMMANDS = {"simulate": cmd_simulate, "snapshot": cmd_snapshot, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "horizon": cmd_horizon, "report": cmd_report}


def run(argv: list[str] | None = None) -> int:
    level = os.environ.get("RAILNET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _log_config(args)
    try:
        COMMANDS[args.command](args)
    except (CliError, ValueError, OSError) as exc:
        print(f"railnet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
