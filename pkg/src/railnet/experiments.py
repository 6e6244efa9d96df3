"""Training protocol, evaluation, horizon sweeps, edge ablations and residual tables."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import ANN, keep_constant_predict
from .graphs import DatasetConfig, HeteroGraph, apply_edge_filter, build_dataset, parse_mode, split_dataset
from .model import ModelConfig, SageHet
from .nn import AdamState, Tensor, adam_step, load_params, mae_loss, rmse, save_params

log = logging.getLogger(__name__)

METRICS_HEADER = ["model", "horizon", "mode", "subset", "mae", "rmse", "n_samples", "seed"]
HISTORY_HEADER = ["epoch", "train_mae", "val_mae", "lr"]
MODEL_KINDS = ("keep-constant", "ann", "sage-het")
ABLATION_MODES = ("selflink", "cut-3", "cut-5", "cut-10", "cut-20", "full")
CDF_THRESHOLDS = tuple(range(11))


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    plateau_window: int = 10
    plateau_factor: float = 0.9
    stop_window: int = 30
    min_delta: float = 0.01
    max_epochs: int = 300
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


class TrainingSchedule:
    """Plateau learning-rate decay and early stopping on validation MAE.

    best[e] is the lowest val MAE over epochs 1..e (best[0] = inf). After epoch e:
      - stop if e >= max_epochs, or if best[e - stop_window] - best[e] < min_delta;
      - decay lr by plateau_factor if best[e - plateau_window] - best[e] < min_delta
        and at least plateau_window epochs passed since the previous decay.
    """

    def __init__(self, config: TrainConfig):
        self.config = config
        self.lr = config.lr
        self.best = [math.inf]
        self.last_decay = 0
        self.decays: list[int] = []

    def _stalled(self, e: int, window: int) -> bool:
        return e >= window and self.best[e - window] - self.best[e] < self.config.min_delta

    def update(self, val_mae: float) -> bool:
        c = self.config
        e = len(self.best)
        self.best.append(min(self.best[-1], val_mae))
        if e - self.last_decay >= c.plateau_window and self._stalled(e, c.plateau_window):
            self.lr *= c.plateau_factor
            self.last_decay = e
            self.decays.append(e)
        return e >= c.max_epochs or self._stalled(e, c.stop_window)


def replay_schedule(val_maes: Sequence[float], config: TrainConfig) -> tuple[list[float], int | None]:
    """Learning rate in effect during each epoch and the epoch the stop rule fires (None if it never does)."""
    sched = TrainingSchedule(config)
    lrs, stop = [], None
    for v in val_maes:
        lrs.append(sched.lr)
        if sched.update(v):
            stop = len(lrs)
            break
    return lrs, stop


class KeepConstant:
    kind = "keep-constant"
    params: dict = {}

    def predict(self, graphs: Sequence[HeteroGraph]) -> np.ndarray:
        if not graphs:
            return np.zeros(0)
        return np.concatenate([keep_constant_predict(g) for g in graphs])


def make_model(kind: str, seed: int, model_config: ModelConfig | None = None, ann_hidden=(256, 128)):
    if kind == "sage-het":
        return SageHet(model_config or ModelConfig(), seed)
    if kind == "ann":
        return ANN(ann_hidden, seed)
    if kind == "keep-constant":
        return KeepConstant()
    raise ValueError(f"unknown model kind {kind!r}")


def _chunks(items, size):
    return [items[i:i + size] for i in range(0, len(items), size)]


def predict(model, graphs: Sequence[HeteroGraph], batch_size: int = 64) -> np.ndarray:
    if isinstance(model, KeepConstant):
        return model.predict(graphs)
    if not graphs:
        return np.zeros(0)
    items = model.prepare(graphs)
    return np.concatenate([model.forward(model.batch(chunk)) for chunk in _chunks(items, batch_size)])


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.values.copy() for k, p in params.items()}


def train_model(kind: str, train: Sequence[HeteroGraph], val: Sequence[HeteroGraph], config: TrainConfig = TrainConfig(),
                model_config: ModelConfig | None = None, ann_hidden=(256, 128)):
    """Fit a model with MAE loss and Adam under the plateau/early-stop schedule.

    Normalization statistics are fitted on `train` only. Returns the model restored
    to its best-validation parameters and the per-epoch history.
    """
    if not train:
        raise ValueError("empty training set")
    if not val:
        raise ValueError("empty validation set")
    model = make_model(kind, config.seed, model_config, ann_hidden)
    if isinstance(model, KeepConstant):
        return model, []
    model.fit_stats(train)
    train_items = model.prepare(train)
    val_batches = [model.batch(c) for c in _chunks(model.prepare(val), config.batch_size)]
    val_labels = np.concatenate([b.labels for b in val_batches])
    rng = np.random.default_rng(config.seed)
    sched = TrainingSchedule(config)
    adam = AdamState(lr=config.lr)
    history = []
    best_val, best_params = math.inf, _snapshot(model.params)
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        adam.lr = lr
        order = rng.permutation(len(train_items))
        abs_sum, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = model.batch([train_items[i] for i in order[start:start + config.batch_size]])
            if batch.num_rt == 0:
                continue
            preds = model.forward(batch, keep=True)
            loss, grad = mae_loss(preds, batch.labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{kind}: non-finite loss at epoch {epoch}, batch starting {start}")
            model.backward(grad)
            adam_step(model.params, adam)
            abs_sum += loss * batch.num_rt
            count += batch.num_rt
        val_preds = np.concatenate([model.forward(b) for b in val_batches])
        val_mae, _ = mae_loss(val_preds, val_labels)
        if not np.isfinite(val_mae):
            raise TrainingDiverged(f"{kind}: non-finite validation MAE at epoch {epoch}")
        history.append({"epoch": epoch, "train_mae": abs_sum / max(count, 1), "val_mae": val_mae, "lr": lr})
        log.debug("%s epoch %d train %.4f val %.4f lr %.6g", kind, epoch, history[-1]["train_mae"], val_mae, lr)
        if val_mae < best_val:
            best_val, best_params = val_mae, _snapshot(model.params)
        if sched.update(val_mae):
            break
    for k, v in best_params.items():
        model.params[k].values[...] = v
    log.info("%s: %d epochs, best val MAE %.4f", kind, len(history), best_val)
    return model, history


@dataclass
class EvalReport:
    subset: str
    n: int
    mae: float | None
    rmse: float | None
    residuals: np.ndarray = field(repr=False)
    predictions: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    thresholds: tuple = CDF_THRESHOLDS

    @property
    def empty(self) -> bool:
        return self.n == 0

    @property
    def cdf(self) -> dict[float, float]:
        return cdf_table(self.residuals, self.thresholds)

    @property
    def histogram(self) -> list[tuple[float, int]]:
        return [(row["bin_center"], row["count"]) for row in histogram_table(self.residuals)]


def report_from_predictions(preds: np.ndarray, labels: np.ndarray, subset: str = "all") -> EvalReport:
    preds, labels = np.asarray(preds, float).ravel(), np.asarray(labels, float).ravel()
    if subset == "delayed":
        mask = labels > 0
    elif subset == "all":
        mask = np.ones(labels.shape, bool)
    else:
        raise ValueError(f"unknown subset {subset!r}")
    p, y = preds[mask], labels[mask]
    if y.size == 0:
        return EvalReport(subset, 0, None, None, np.zeros(0), p, y)
    return EvalReport(subset, int(y.size), mae_loss(p, y)[0], rmse(p, y), y - p, p, y)


def evaluate(model, graphs: Sequence[HeteroGraph], subset: str = "all") -> EvalReport:
    """Test-set metrics; residual = actual - predicted; 'delayed' keeps rows with label > 0."""
    preds = predict(model, graphs)
    labels = np.concatenate([g.labels for g in graphs]) if graphs else np.zeros(0)
    return report_from_predictions(preds, labels, subset)


def cdf_table(residuals: np.ndarray, thresholds=CDF_THRESHOLDS) -> dict[float, float]:
    r = np.abs(np.asarray(residuals, float))
    if r.size == 0:
        return {float(t): float("nan") for t in thresholds}
    r = np.sort(r)
    return {float(t): float(np.searchsorted(r, t, side="right") / r.size) for t in thresholds}


def histogram_table(residuals: np.ndarray, bin_width: float = 1.0) -> list[dict]:
    """Counts in fixed-width bins centred on multiples of bin_width (so one bin is centred at 0)."""
    r = np.asarray(residuals, float)
    if r.size == 0:
        return []
    idx = np.floor(r / bin_width + 0.5).astype(np.int64)
    k = int(np.max(np.abs(idx)))
    counts = np.bincount(idx + k, minlength=2 * k + 1)
    return [
        {"bin_center": (i - k) * bin_width, "bin_lo": (i - k - 0.5) * bin_width,
         "bin_hi": (i - k + 0.5) * bin_width, "count": int(c), "fraction": float(c / r.size)}
        for i, c in enumerate(counts)
    ]


def residual_report(report: EvalReport, bin_width: float = 1.0, thresholds=CDF_THRESHOLDS) -> tuple[str, str]:
    """(histogram CSV, CDF CSV) for a report's residuals."""
    hist = io.StringIO()
    w = csv.writer(hist, lineterminator="\n")
    w.writerow(["bin_center", "bin_lo", "bin_hi", "count", "fraction"])
    for row in histogram_table(report.residuals, bin_width):
        w.writerow([row["bin_center"], row["bin_lo"], row["bin_hi"], row["count"], repr(row["fraction"])])
    cdf = io.StringIO()
    w = csv.writer(cdf, lineterminator="\n")
    w.writerow(["abs_residual_max", "fraction"])
    for t, frac in cdf_table(report.residuals, thresholds).items():
        w.writerow([t, repr(frac)])
    return hist.getvalue(), cdf.getvalue()


def pretty(x) -> str:
    return "" if x is None else repr(float(x))


def metrics_row(model: str, horizon: int, mode: str, report: EvalReport, seed: int) -> dict:
    return {"model": model, "horizon": horizon, "mode": mode, "subset": report.subset,
            "mae": report.mae, "rmse": report.rmse, "n_samples": report.n, "seed": seed}


def metrics_csv(rows: Sequence[dict], extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER + list(extra))
    for row in rows:
        vals = []
        for key in METRICS_HEADER + list(extra):
            v = row.get(key)
            vals.append(pretty(v) if isinstance(v, float) or (v is None and key in ("mae", "rmse")) else v)
        w.writerow(vals)
    return buf.getvalue()


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for h in history:
        w.writerow([h["epoch"], repr(h["train_mae"]), repr(h["val_mae"]), repr(h["lr"])])
    return buf.getvalue()


def predictions_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["actual", "predicted"])
    for y, p in zip(report.labels, report.predictions):
        w.writerow([repr(float(y)), repr(float(p))])
    return buf.getvalue()


def save_model(path, model, extra_meta: dict | None = None) -> None:
    meta = model.meta() if hasattr(model, "meta") else {"kind": model.kind}
    if extra_meta:
        meta = {**meta, **extra_meta}
    save_params(path, getattr(model, "params", {}), meta)


def load_model(path):
    params, meta = load_params(path)
    kind = meta["kind"]
    if kind == "keep-constant":
        return KeepConstant()
    if kind == "sage-het":
        from .graphs import Normalizer
        cfg = meta["config"]
        model = SageHet(ModelConfig(cfg["num_layers"], cfg["hidden"], dict(cfg["node_in_dims"])), meta.get("seed", 0))
        model.stats = Normalizer.from_dict(meta["normalizer"])
    elif kind == "ann":
        model = ANN(tuple(meta["hidden"]))
        model.mean = np.array(meta["flat_mean"])
        model.std = np.array(meta["flat_std"])
    else:
        raise ValueError(f"unknown model kind {kind!r} in {path}")
    for k, p in params.items():
        model.params[k].values[...] = p.values
    return model


@dataclass(frozen=True)
class ExperimentSpec:
    """One cell of a sweep: train and test one model on one dataset variant."""

    kind: str
    horizon: int
    mode: str
    seed: int
    train: TrainConfig
    model_config: ModelConfig | None = None


def _filtered(graphs, mode):
    base, thr = parse_mode(mode)
    return [apply_edge_filter(g, base, thr) for g in graphs]


def run_cell(spec: ExperimentSpec, splits) -> dict:
    train, val, test = (_filtered(s, spec.mode) for s in splits)
    model, history = train_model(spec.kind, train, val, spec.train, spec.model_config)
    reports = {sub: evaluate(model, test, sub) for sub in ("all", "delayed")}
    return {"spec": spec, "history": history, "reports": reports, "model": model}


def _run_cell_worker(args):
    spec, splits = args
    out = run_cell(spec, splits)
    out.pop("model")
    return out


def _run_cells(cells, jobs: int):
    if jobs <= 1:
        return [run_cell(spec, splits) for spec, splits in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell_worker, cells))


def horizon_sweep(records, topology, horizons=(10, 20, 30), config: TrainConfig = TrainConfig(),
                  models: Sequence[str] = MODEL_KINDS, ratios=(60, 20, 20), model_config: ModelConfig | None = None,
                  dataset: DatasetConfig = DatasetConfig(), jobs: int = 1) -> list[dict]:
    """Independent dataset build, training and test evaluation per horizon and model (step = horizon)."""
    records = list(records)
    cells = []
    for h in horizons:
        if (dataset.end - dataset.start) % h:
            raise ValueError(f"horizon {h} does not divide the sampling window")
        ds = build_dataset(records, topology, DatasetConfig(h, dataset.start, dataset.end, None, dataset.max_delay))
        splits = split_dataset(ds, ratios, config.seed)
        log.info("horizon %d: %d graphs (%d/%d/%d)", h, len(ds), *map(len, splits))
        for kind in models:
            cells.append((ExperimentSpec(kind, h, "full", config.seed, config, model_config), splits))
    return _run_cells(cells, jobs)


def ablation_suite(graphs: Sequence[HeteroGraph], modes: Sequence[str] = ABLATION_MODES,
                   config: TrainConfig = TrainConfig(), ratios=(60, 20, 20),
                   model_config: ModelConfig | None = None, jobs: int = 1) -> list[dict]:
    """Retrain SAGE-Het from the same seed with each edge filter applied to every split."""
    graphs = list(graphs)
    splits = split_dataset(graphs, ratios, config.seed)
    horizon = graphs[0].horizon
    cells = [(ExperimentSpec("sage-het", horizon, m, config.seed, config, model_config), splits) for m in modes]
    results = _run_cells(cells, jobs)
    full = next((r for r in results if r["spec"].mode == "full"), None)
    for r in results:
        for sub, rep in r["reports"].items():
            ref = full["reports"][sub] if full else None
            r.setdefault("increase", {})[sub] = (
                None if ref is None or rep.empty or ref.empty else
                {"mae": 100.0 * (rep.mae - ref.mae) / ref.mae, "rmse": 100.0 * (rep.rmse - ref.rmse) / ref.rmse}
            )
    return results


def result_rows(results: Sequence[dict]) -> list[dict]:
    rows = []
    for r in results:
        spec = r["spec"]
        for sub in ("all", "delayed"):
            row = metrics_row(spec.kind, spec.horizon, spec.mode, r["reports"][sub], spec.seed)
            inc = r.get("increase", {}).get(sub)
            if "increase" in r:
                row["mae_increase_pct"] = None if inc is None else inc["mae"]
                row["rmse_increase_pct"] = None if inc is None else inc["rmse"]
            rows.append(row)
    return rows


def write_text(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def config_dict(config) -> dict:
    return asdict(config)
