"""SAGE-Het: per-relation GraphSAGE message passing summed across relations.

Layer k, node i of type t:

    h_i = x_i W_self[k,t] + b[k,t] + sum_{e -> t} (sum_{j in N_e(i)} x_j) W_nbr[k,e]

followed by ReLU. A linear head maps final RT rows to delay minutes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .graphs import NODE_TYPES, HeteroGraph, Normalizer, apply_normalizer, fit_normalizer
from .nn import ShapeError, Tensor, affine, affine_backward, glorot_uniform, relu, relu_backward

# relation -> (source block, destination block); "ST" is the stacked PS/TS table
RELATION_TYPES = {"rr": ("RT", "RT"), "tr": ("TT", "RT"), "sr": ("ST", "RT"), "ss": ("ST", "ST")}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden: int = 256
    node_in_dims: dict = field(default_factory=lambda: {"RT": 5, "TT": 1, "PS": 1, "TS": 1})

    def __post_init__(self):
        if self.num_layers < 1 or self.hidden < 1:
            raise ValueError("num_layers and hidden must be >= 1")
        if self.node_in_dims["PS"] != self.node_in_dims["TS"]:
            raise ValueError("PS and TS inputs share station relations and need equal widths")

    def in_dim(self, layer: int, ntype: str) -> int:
        if ntype == "ST":
            ntype = "PS"
        return self.node_in_dims[ntype] if layer == 0 else self.hidden

    def to_dict(self) -> dict:
        return asdict(self)


def init_model(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for k in range(config.num_layers):
        for t in NODE_TYPES:
            params[f"conv{k}.self.{t}.W"] = Tensor(glorot_uniform(rng, config.in_dim(k, t), config.hidden))
            params[f"conv{k}.self.{t}.b"] = Tensor(np.zeros((1, config.hidden)))
        for rel, (src, _) in RELATION_TYPES.items():
            params[f"conv{k}.nbr.{rel}.W"] = Tensor(glorot_uniform(rng, config.in_dim(k, src), config.hidden))
    params["head.W"] = Tensor(glorot_uniform(rng, config.hidden, 1))
    params["head.b"] = Tensor(np.zeros((1, 1)))
    return params


def layer_params(params: Mapping[str, Tensor], k: int) -> dict[str, Tensor]:
    prefix = f"conv{k}."
    return {name[len(prefix):]: p for name, p in params.items() if name.startswith(prefix)}


def _adj(src: np.ndarray, dst: np.ndarray, n_dst: int, n_src: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(src)), (dst, src)), shape=(n_dst, n_src))


@dataclass
class GraphBatch:
    """Several snapshots merged into one disconnected graph.

    When every graph carries the same station table and ss edges (one topology),
    the station block is stored once and shared by all graphs.
    """

    x: dict[str, np.ndarray]  # RT, TT, ST
    ps_rows: np.ndarray
    ts_rows: np.ndarray
    adj: dict[str, sp.csr_matrix]
    adj_t: dict[str, sp.csr_matrix]
    labels: np.ndarray
    rt_graph: np.ndarray

    @property
    def num_rt(self) -> int:
        return self.x["RT"].shape[0]


def _same_stations(graphs: Sequence[HeteroGraph]) -> bool:
    g0 = graphs[0]
    return all(
        np.array_equal(g.x["PS"], g0.x["PS"]) and np.array_equal(g.x["TS"], g0.x["TS"])
        and np.array_equal(g.edges["ss"], g0.edges["ss"])
        for g in graphs[1:]
    )


def collate(graphs: Sequence[HeteroGraph]) -> GraphBatch:
    if not graphs:
        raise ValueError("empty batch")
    shared = _same_stations(graphs)
    xs = {"RT": [], "TT": [], "ST": []}
    ps_rows, ts_rows, labels, rt_graph = [], [], [], []
    edges = {rel: ([], []) for rel in RELATION_TYPES}
    off = {"RT": 0, "TT": 0, "ST": 0}
    for gi, g in enumerate(graphs):
        xs["RT"].append(g.x["RT"])
        xs["TT"].append(g.x["TT"])
        labels.append(g.labels)
        rt_graph.append(np.full(g.num_rt, gi))
        first = gi == 0
        if first or not shared:
            n_ps = g.num_nodes("PS")
            xs["ST"] += [g.x["PS"], g.x["TS"]]
            ps_rows.append(off["ST"] + np.arange(n_ps))
            ts_rows.append(off["ST"] + n_ps + np.arange(g.num_nodes("TS")))
        st_off = 0 if shared else off["ST"]
        for rel, (src_t, dst_t) in RELATION_TYPES.items():
            if rel == "ss" and shared and not first:
                continue
            e = g.edges[rel]
            so = st_off if src_t == "ST" else off[src_t]
            do = st_off if dst_t == "ST" else off[dst_t]
            edges[rel][0].append(e[0] + so)
            edges[rel][1].append(e[1] + do)
        off["RT"] += g.num_rt
        off["TT"] += g.num_nodes("TT")
        if first or not shared:
            off["ST"] += g.num_stations
    x = {t: np.vstack(xs[t]) for t in xs}
    n = {t: x[t].shape[0] for t in x}
    adj, adj_t = {}, {}
    for rel, (src_t, dst_t) in RELATION_TYPES.items():
        src, dst = np.concatenate(edges[rel][0]), np.concatenate(edges[rel][1])
        if src.size and (src.min() < 0 or src.max() >= n[src_t] or dst.min() < 0 or dst.max() >= n[dst_t]):
            raise IndexError(f"{rel}: dangling edge index")
        adj[rel] = _adj(src, dst, n[dst_t], n[src_t])
        adj_t[rel] = adj[rel].T.tocsr()
    return GraphBatch(
        x=x,
        ps_rows=np.concatenate(ps_rows).astype(np.int64),
        ts_rows=np.concatenate(ts_rows).astype(np.int64),
        adj=adj,
        adj_t=adj_t,
        labels=np.concatenate(labels),
        rt_graph=np.concatenate(rt_graph),
    )


def _as_batch(graph) -> GraphBatch:
    if isinstance(graph, GraphBatch):
        return graph
    if isinstance(graph, HeteroGraph):
        return collate([graph])
    return collate(list(graph))


def initial_features(batch: GraphBatch) -> dict[str, np.ndarray]:
    return {t: batch.x[t] for t in ("RT", "TT", "ST")}


def layer_forward(batch: GraphBatch, feats: Mapping[str, np.ndarray], lp: Mapping[str, Tensor],
                  apply_activation: bool = True):
    """One SAGE-Het convolution. Returns (output features, cache for layer_backward)."""
    x_rt, x_tt, x_st = feats["RT"], feats["TT"], feats["ST"]
    if x_rt.shape[1] != lp["self.RT.W"].shape[0]:
        raise ShapeError(f"RT features have width {x_rt.shape[1]}, layer expects {lp['self.RT.W'].shape[0]}")
    A = batch.adj
    z_rt = affine(x_rt, lp["self.RT.W"], lp["self.RT.b"])
    z_rt += A["rr"] @ (x_rt @ lp["nbr.rr.W"].values)
    z_rt += A["tr"] @ (x_tt @ lp["nbr.tr.W"].values)
    z_rt += A["sr"] @ (x_st @ lp["nbr.sr.W"].values)
    z_tt = affine(x_tt, lp["self.TT.W"], lp["self.TT.b"])
    z_st = A["ss"] @ (x_st @ lp["nbr.ss.W"].values)
    z_st[batch.ps_rows] += affine(x_st[batch.ps_rows], lp["self.PS.W"], lp["self.PS.b"])
    z_st[batch.ts_rows] += affine(x_st[batch.ts_rows], lp["self.TS.W"], lp["self.TS.b"])
    pre = {"RT": z_rt, "TT": z_tt, "ST": z_st}
    out = {t: relu(z) for t, z in pre.items()} if apply_activation else pre
    return out, (feats, pre, apply_activation)


def layer_backward(batch: GraphBatch, lp: Mapping[str, Tensor], cache, d_out: Mapping[str, np.ndarray | None],
                   need_dx: bool = True) -> dict[str, np.ndarray] | None:
    """Accumulate parameter grads of one layer; return grads w.r.t. its input features."""
    feats, pre, activated = cache
    x_rt, x_tt, x_st = feats["RT"], feats["TT"], feats["ST"]
    At = batch.adj_t
    dz = {}
    for t in ("RT", "TT", "ST"):
        d = d_out.get(t)
        if d is None:
            dz[t] = None
        else:
            dz[t] = relu_backward(d, pre[t]) if activated else d
    dx = {"RT": np.zeros_like(x_rt), "TT": np.zeros_like(x_tt), "ST": np.zeros_like(x_st)} if need_dx else None

    def nbr(rel, d_dst, x_src, key):
        W = lp[f"nbr.{rel}.W"]
        dy = At[rel] @ d_dst
        W.grad += x_src.T @ dy
        if need_dx:
            dx[key] += dy @ W.values.T

    if dz["RT"] is not None:
        g = affine_backward(dz["RT"], x_rt, lp["self.RT.W"], lp["self.RT.b"], need_dx)
        if need_dx:
            dx["RT"] += g
        nbr("rr", dz["RT"], x_rt, "RT")
        nbr("tr", dz["RT"], x_tt, "TT")
        nbr("sr", dz["RT"], x_st, "ST")
    if dz["TT"] is not None:
        g = affine_backward(dz["TT"], x_tt, lp["self.TT.W"], lp["self.TT.b"], need_dx)
        if need_dx:
            dx["TT"] += g
    if dz["ST"] is not None:
        for rows, t in ((batch.ps_rows, "PS"), (batch.ts_rows, "TS")):
            g = affine_backward(dz["ST"][rows], x_st[rows], lp[f"self.{t}.W"], lp[f"self.{t}.b"], need_dx)
            if need_dx:
                dx["ST"][rows] += g
        nbr("ss", dz["ST"], x_st, "ST")
    return dx


def num_layers(params: Mapping[str, Tensor]) -> int:
    return 1 + max(int(name.split(".")[0][4:]) for name in params if name.startswith("conv"))


def forward_with_cache(graph, params: Mapping[str, Tensor]):
    batch = _as_batch(graph)
    feats = initial_features(batch)
    caches = []
    for k in range(num_layers(params)):
        feats, cache = layer_forward(batch, feats, layer_params(params, k), True)
        caches.append(cache)
    h_rt = feats["RT"]
    preds = affine(h_rt, params["head.W"], params["head.b"]).ravel()
    return preds, (batch, caches, h_rt)


def model_forward(graph, params: Mapping[str, Tensor]) -> np.ndarray:
    """Predicted delay (minutes) for every RT row, in row order."""
    return forward_with_cache(graph, params)[0]


def model_backward(cache, params: Mapping[str, Tensor], d_pred: np.ndarray) -> dict[str, np.ndarray]:
    """Exact adjoint of model_forward; grads accumulate into params and are returned by name."""
    batch, caches, h_rt = cache
    d_pred = np.asarray(d_pred, dtype=float).reshape(-1, 1)
    d_rt = affine_backward(d_pred, h_rt, params["head.W"], params["head.b"])
    d = {"RT": d_rt, "TT": None, "ST": None}
    for k in reversed(range(len(caches))):
        d = layer_backward(batch, layer_params(params, k), caches[k], d, need_dx=k > 0)
    return {name: p.grad for name, p in params.items()}


class SageHet:
    """Model wrapper used by the training loop; owns the node-feature normalizer."""

    kind = "sage-het"

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = init_model(config, seed)
        self.stats: Normalizer | None = None
        self._cache = None

    def fit_stats(self, graphs: Sequence[HeteroGraph]) -> None:
        self.stats = fit_normalizer(list(graphs))

    def prepare(self, graphs: Sequence[HeteroGraph]) -> list[HeteroGraph]:
        if self.stats is None:
            raise RuntimeError("fit_stats must run before prepare")
        return [apply_normalizer(g, self.stats) for g in graphs]

    def batch(self, items: Sequence[HeteroGraph]) -> GraphBatch:
        return collate(items)

    def forward(self, batch: GraphBatch, keep: bool = False) -> np.ndarray:
        preds, cache = forward_with_cache(batch, self.params)
        self._cache = cache if keep else None
        return preds

    def backward(self, d_pred: np.ndarray) -> None:
        if self._cache is None:
            raise RuntimeError("forward(keep=True) must precede backward")
        model_backward(self._cache, self.params, d_pred)
        self._cache = None

    def meta(self) -> dict:
        return {"kind": self.kind, "config": self.config.to_dict(), "seed": self.seed,
                "normalizer": self.stats.to_dict() if self.stats else None}
