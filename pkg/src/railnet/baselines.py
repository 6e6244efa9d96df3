"""Flat per-train baselines: Keep Constant and a fully connected ANN."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .graphs import HeteroGraph
from .nn import Tensor, affine, affine_backward, glorot_uniform, relu, relu_backward

FLAT_FEATURES = ("C", "I", "M", "S", "R", "D", "N")
_RT_COL = {"C": 0, "I": 1, "S": 2, "M": 3, "R": 4}


@dataclass(frozen=True)
class FlatSample:
    features: tuple[float, ...]
    label: float


def flatten_arrays(g: HeteroGraph) -> tuple[np.ndarray, np.ndarray]:
    """(n_rt x 7 feature matrix in FLAT_FEATURES order, labels) from a raw graph."""
    n = g.num_rt
    x = g.x["RT"]
    sr_src, sr_dst = g.edges["sr"]
    counts = np.bincount(sr_dst, minlength=n)
    if n and counts.min() == 0:
        raise ValueError(f"graph {g.day} T={g.timestamp}: RT without an sr in-edge")
    station_x = np.concatenate([g.x["PS"][:, 0], g.x["TS"][:, 0]])
    n_feat = np.zeros(n)
    n_feat[sr_dst] = station_x[sr_src]
    d_feat = np.zeros(n)
    rr_src, rr_dst = g.edges["rr"]
    d_feat[rr_dst] = x[rr_src, 0]
    tr_src, tr_dst = g.edges["tr"]
    d_feat[tr_dst] = g.x["TT"][tr_src, 0]
    cols = [x[:, _RT_COL[f]] for f in ("C", "I", "M", "S", "R")] + [d_feat, n_feat]
    return np.column_stack(cols).reshape(n, len(FLAT_FEATURES)), g.labels.copy()


def flatten(g: HeteroGraph) -> list[FlatSample]:
    feats, labels = flatten_arrays(g)
    return [FlatSample(tuple(float(v) for v in row), float(y)) for row, y in zip(feats, labels)]


def keep_constant_predict(samples) -> np.ndarray:
    """Delay at T + dT predicted as the current delay C."""
    if isinstance(samples, HeteroGraph):
        return samples.x["RT"][:, 0].copy()
    if isinstance(samples, np.ndarray):
        return samples[:, 0].copy()
    return np.array([s.features[0] for s in samples], dtype=float)


def samples_to_csv(samples: Sequence[FlatSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(FLAT_FEATURES) + ["label"])
    for s in samples:
        w.writerow([repr(v) for v in s.features] + [repr(s.label)])
    return buf.getvalue()


def init_ann(widths: Sequence[int], seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"fc{i}.W"] = Tensor(glorot_uniform(rng, a, b))
        params[f"fc{i}.b"] = Tensor(np.zeros((1, b)))
    return params


def ann_forward(x: np.ndarray, params) -> tuple[np.ndarray, list]:
    n_layers = len(params) // 2
    caches = []
    h = x
    for i in range(n_layers):
        z = affine(h, params[f"fc{i}.W"], params[f"fc{i}.b"])
        caches.append((h, z))
        h = relu(z) if i < n_layers - 1 else z
    return h.ravel(), caches


def ann_backward(caches, params, d_pred: np.ndarray) -> None:
    n_layers = len(caches)
    d = np.asarray(d_pred, dtype=float).reshape(-1, 1)
    for i in reversed(range(n_layers)):
        h, z = caches[i]
        if i < n_layers - 1:
            d = relu_backward(d, z)
        d = affine_backward(d, h, params[f"fc{i}.W"], params[f"fc{i}.b"], need_dx=i > 0)


@dataclass
class FlatBatch:
    x: np.ndarray
    labels: np.ndarray

    @property
    def num_rt(self) -> int:
        return len(self.labels)


class ANN:
    """7 -> 256 -> 128 -> 1 regressor over flattened RT samples with its own z-scoring."""

    kind = "ann"

    def __init__(self, hidden: Sequence[int] = (256, 128), seed: int = 0):
        self.hidden = tuple(hidden)
        self.params = init_ann((len(FLAT_FEATURES), *self.hidden, 1), seed)
        self.mean = np.zeros(len(FLAT_FEATURES))
        self.std = np.ones(len(FLAT_FEATURES))
        self._cache = None

    def fit_stats(self, graphs: Sequence[HeteroGraph]) -> None:
        feats = np.vstack([flatten_arrays(g)[0] for g in graphs])
        if feats.shape[0] == 0:
            raise ValueError("no training samples")
        self.mean = feats.mean(axis=0)
        sd = feats.std(axis=0)
        self.std = np.where(sd < 1e-9, 1.0, sd)

    def prepare(self, graphs: Sequence[HeteroGraph]) -> list[FlatBatch]:
        out = []
        for g in graphs:
            x, y = flatten_arrays(g)
            out.append(FlatBatch((x - self.mean) / self.std, y))
        return out

    def batch(self, items: Sequence[FlatBatch]) -> FlatBatch:
        return FlatBatch(np.vstack([b.x for b in items]), np.concatenate([b.labels for b in items]))

    def forward(self, batch: FlatBatch, keep: bool = False) -> np.ndarray:
        preds, caches = ann_forward(batch.x, self.params)
        self._cache = caches if keep else None
        return preds

    def backward(self, d_pred: np.ndarray) -> None:
        ann_backward(self._cache, self.params, d_pred)
        self._cache = None

    def meta(self) -> dict:
        return {"kind": self.kind, "hidden": list(self.hidden),
                "flat_mean": self.mean.tolist(), "flat_std": self.std.tolist()}
