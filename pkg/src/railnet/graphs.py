"""Timestamped heterogeneous graph snapshots of the network state.

Node types: RT (running trains), TT (terminated trains), PS (passing stations),
TS (terminal yards). Station-valued edge endpoints (sr sources, ss both ends)
index the stacked station table: PS rows first, then TS rows.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Iterator

import numpy as np

from .records import (
    NetworkTopology,
    OperationRecord,
    group_itineraries,
    match_line,
    service_class,
)

RT_FEATURES = ("C", "I", "S", "M", "R")
NODE_TYPES = ("RT", "TT", "PS", "TS")
RELATIONS = ("rr", "tr", "sr", "ss")
HEADWAY_CAP = 60

DWELLING = "dwelling"
IN_SECTION = "in-section"
TERMINATED = "terminated"


@dataclass(frozen=True)
class TrainState:
    train_id: str
    position: str
    station_a: str
    station_b: str | None
    current_delay: int
    last_update_time: int
    forward_train: str | None = None
    headway: int | None = None


@dataclass
class Itinerary:
    """One train's day, flattened into its ordered update events.

    Events alternate dep(origin), arr(s1), dep(s1), ..., arr(terminal). Kinds are
    'a' or 'd'; `station_idx` points into `stations`.
    """

    train_id: str
    line: int
    stations: list[str]
    terminates: bool
    kinds: list[str]
    station_idx: list[int]
    sched: list[int]
    act: list[int]
    min_cum: list[int]
    act_dep: list[int]

    @property
    def origin_act_dep(self) -> int:
        return self.act[0]

    def last_event(self, t: int) -> int:
        """Index of the latest actual event at or before t, -1 if none."""
        return bisect.bisect_right(self.act, t) - 1

    def delay(self, ev: int) -> int:
        return self.act[ev] - self.sched[ev]


def _itinerary(recs: list[OperationRecord], line_idx: int, topology: NetworkTopology) -> Itinerary:
    line = topology.lines[line_idx]
    by_station = {r.station_id: r for r in recs}
    ordered = [by_station[s] for s in line[: len(recs)]]
    stations = [r.station_id for r in ordered]
    terminates = len(ordered) == len(line)
    cls = service_class(ordered[0].train_id)
    kinds, idx, sched, act, min_cum = [], [], [], [], []
    total = 0
    for i, r in enumerate(ordered):
        if i > 0:
            total += topology.section(stations[i - 1], stations[i], cls).min_run
            kinds.append("a"); idx.append(i); sched.append(r.sched_arr); act.append(r.act_arr); min_cum.append(total)
        if i == len(ordered) - 1 and terminates:
            break
        if i > 0:
            total += topology.min_dwell
        kinds.append("d"); idx.append(i); sched.append(r.sched_dep); act.append(r.act_dep); min_cum.append(total)
    return Itinerary(ordered[0].train_id, line_idx, stations, terminates, kinds, idx, sched, act, min_cum,
                     [r.act_dep for r in ordered])


class DayIndex:
    """Per-day lookup structure: itineraries grouped by line in running order."""

    def __init__(self, records: Iterable[OperationRecord], topology: NetworkTopology, day: date | None = None):
        self.topology = topology
        groups = group_itineraries(records)
        days = {d for d, _ in groups}
        if day is None:
            if len(days) > 1:
                raise ValueError("records span several days; pass `day`")
            day = next(iter(days)) if days else None
        self.day = day
        self.trains: dict[str, Itinerary] = {}
        for (d, tid), recs in groups.items():
            if d != day:
                continue
            li = match_line(topology, (r.station_id for r in recs))
            if li is None:
                raise ValueError(f"train {tid} on {d}: itinerary is not a line prefix")
            self.trains[tid] = _itinerary(recs, li, topology)
        self.line_order: list[list[str]] = [[] for _ in topology.lines]
        for tid, it in self.trains.items():
            self.line_order[it.line].append(tid)
        for order in self.line_order:
            order.sort(key=lambda t: (self.trains[t].sched[0], t))
        self.forward: dict[str, str | None] = {}
        for order in self.line_order:
            for k, tid in enumerate(order):
                self.forward[tid] = order[k - 1] if k else None


def _index(records, topology) -> DayIndex:
    return records if isinstance(records, DayIndex) else DayIndex(records, topology)


def _state(idx: DayIndex, tid: str, t: int) -> TrainState | None:
    it = idx.trains[tid]
    ev = it.last_event(t)
    if ev < 0:
        return None
    delay = it.delay(ev)
    i = it.station_idx[ev]
    if it.kinds[ev] == "a":
        if it.terminates and i == len(it.stations) - 1:
            return TrainState(tid, TERMINATED, it.stations[i], None, delay, it.act[ev])
        return TrainState(tid, DWELLING, it.stations[i], None, delay, it.act[ev])
    nxt = it.stations[i + 1] if i + 1 < len(it.stations) else None
    return TrainState(tid, IN_SECTION, it.stations[i], nxt, delay, it.act[ev])


def _headway(idx: DayIndex, tid: str, t: int) -> tuple[str | None, int]:
    fwd = idx.forward[tid]
    if fwd is None:
        return None, HEADWAY_CAP
    own, other = idx.trains[tid], idx.trains[fwd]
    ev = own.last_event(t)
    # most recent station both trains have departed by t
    i = own.station_idx[ev] if own.kinds[ev] == "d" else own.station_idx[ev] - 1
    for j in range(min(i, len(other.act_dep) - 1), -1, -1):
        if own.act_dep[j] <= t and other.act_dep[j] <= t and other.stations[j] == own.stations[j]:
            return fwd, own.act_dep[j] - other.act_dep[j]
    return fwd, HEADWAY_CAP


def train_state_at(records, topology: NetworkTopology, train_id: str, t: int) -> TrainState | None:
    """Position and current delay of a train at time t; None if it has not left its origin yet."""
    idx = _index(records, topology)
    st = _state(idx, train_id, t)
    if st is None:
        return None
    fwd, hw = _headway(idx, train_id, t)
    return replace(st, forward_train=fwd, headway=hw if st.position != TERMINATED else None)


def compute_rt_features(records, topology: NetworkTopology, train_id: str, t: int, horizon: int) -> list[int]:
    """[C, I, S, M, R] of a running train at t for a prediction horizon."""
    idx = _index(records, topology)
    st = _state(idx, train_id, t)
    if st is None or st.position == TERMINATED:
        raise ValueError(f"train {train_id} is not running at {t}")
    _, hw = _headway(idx, train_id, t)
    it = idx.trains[train_id]
    last = len(it.sched) - 1
    prev = max(bisect.bisect_right(it.sched, t) - 1, 0)
    nxt = min(bisect.bisect_left(it.sched, t + horizon), last)
    nxt = max(nxt, prev)
    # the next event the train itself has yet to perform; R goes negative when it is running late
    after = min(it.last_event(t) + 1, last)
    s = it.sched[nxt] - it.sched[prev]
    m = it.min_cum[nxt] - it.min_cum[prev]
    r = it.sched[after] - t
    return [st.current_delay, hw, s, m, r]


def compute_label(records, train_id: str, t: int, horizon: int, topology: NetworkTopology | None = None) -> int:
    """Delay of a train at t + horizon: the delay of its latest actual update event by then."""
    idx = records if isinstance(records, DayIndex) else DayIndex(records, topology)
    st = _state(idx, train_id, t + horizon)
    if st is None:
        raise ValueError(f"train {train_id} has not departed by {t + horizon}")
    return st.current_delay


@dataclass
class HeteroGraph:
    day: str
    timestamp: int
    horizon: int
    x: dict[str, np.ndarray]
    ids: dict[str, list[str]]
    edges: dict[str, np.ndarray]
    labels: np.ndarray
    edge_headways: dict[str, np.ndarray]
    edge_weight: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for rel in RELATIONS:
            self.edges[rel] = np.asarray(self.edges.get(rel, np.zeros((2, 0))), dtype=np.int64).reshape(2, -1)
            if rel not in self.edge_weight:
                self.edge_weight[rel] = np.ones(self.edges[rel].shape[1])
        for rel in ("rr", "tr"):
            self.edge_headways[rel] = np.asarray(self.edge_headways.get(rel, []), dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)

    @property
    def num_rt(self) -> int:
        return self.x["RT"].shape[0]

    def num_nodes(self, ntype: str) -> int:
        return self.x[ntype].shape[0]

    @property
    def num_stations(self) -> int:
        return self.num_nodes("PS") + self.num_nodes("TS")


def _station_tables(topology: NetworkTopology):
    ps, ts = topology.passing_ids, topology.yard_ids
    pos = {sid: i for i, sid in enumerate(ps + ts)}
    ss_src, ss_dst = [], []
    for line in topology.lines:
        for a, b in zip(line[:-1], line[1:]):
            ss_src.append(pos[b]); ss_dst.append(pos[a])
    for a, b in topology.yard_links:
        ss_src += [pos[a], pos[b]]; ss_dst += [pos[b], pos[a]]
    x_ps = np.array([[topology.stations[s].track_count] for s in ps], dtype=float).reshape(-1, 1)
    x_ts = np.array([[topology.stations[s].track_count] for s in ts], dtype=float).reshape(-1, 1)
    return ps, ts, pos, x_ps, x_ts, np.array([ss_src, ss_dst], dtype=np.int64).reshape(2, -1)


def build_snapshot(records, topology: NetworkTopology, t: int, horizon: int) -> HeteroGraph:
    idx = _index(records, topology)
    ps, ts, pos, x_ps, x_ts, ss = _station_tables(topology)

    rt_ids, rt_rows, labels, rt_next_station = [], [], [], []
    states: dict[str, TrainState] = {}
    for order in idx.line_order:
        for tid in order:
            st = _state(idx, tid, t)
            if st is None:
                continue
            states[tid] = st
            if st.position == TERMINATED:
                continue
            it = idx.trains[tid]
            if st.position == IN_SECTION:
                nxt = st.station_b
            else:
                i = it.stations.index(st.station_a)
                nxt = it.stations[i + 1] if i + 1 < len(it.stations) else None
            if nxt is None:
                # itinerary ends without a terminal; nothing ahead to approach
                continue
            rt_ids.append(tid)
            rt_rows.append(compute_rt_features(idx, topology, tid, t, horizon))
            labels.append(compute_label(idx, tid, t, horizon))
            rt_next_station.append(nxt)

    rt_pos = {tid: i for i, tid in enumerate(rt_ids)}
    tt_ids: list[str] = []
    tt_pos: dict[str, int] = {}
    rr, tr, hw_rr, hw_tr = [], [], [], []
    for k, tid in enumerate(rt_ids):
        fwd = idx.forward[tid]
        if fwd is None or fwd not in states:
            continue
        hw = rt_rows[k][1]
        if fwd in rt_pos:
            rr.append((rt_pos[fwd], k)); hw_rr.append(hw)
        elif states[fwd].position == TERMINATED:
            if fwd not in tt_pos:
                tt_pos[fwd] = len(tt_ids)
                tt_ids.append(fwd)
            tr.append((tt_pos[fwd], k)); hw_tr.append(hw)

    sr = [(pos[s], k) for k, s in enumerate(rt_next_station)]
    return HeteroGraph(
        day=str(idx.day),
        timestamp=t,
        horizon=horizon,
        x={
            "RT": np.array(rt_rows, dtype=float).reshape(-1, len(RT_FEATURES)),
            "TT": np.array([[states[tid].current_delay] for tid in tt_ids], dtype=float).reshape(-1, 1),
            "PS": x_ps,
            "TS": x_ts,
        },
        ids={"RT": rt_ids, "TT": tt_ids, "PS": ps, "TS": ts},
        edges={
            "rr": np.array(rr, dtype=np.int64).reshape(-1, 2).T,
            "tr": np.array(tr, dtype=np.int64).reshape(-1, 2).T,
            "sr": np.array(sr, dtype=np.int64).reshape(-1, 2).T,
            "ss": ss,
        },
        labels=np.array(labels, dtype=float),
        edge_headways={"rr": np.array(hw_rr, dtype=float), "tr": np.array(hw_tr, dtype=float)},
    )


@dataclass(frozen=True)
class DatasetConfig:
    horizon: int = 20
    start: int = 8 * 60
    end: int = 23 * 60
    step: int | None = None
    max_delay: int = 90

    @property
    def interval(self) -> int:
        return self.step if self.step is not None else self.horizon

    def timestamps(self) -> list[int]:
        return list(range(self.start, self.end + 1, self.interval))


def keep_graph(g: HeteroGraph, max_delay: float) -> bool:
    if g.num_rt == 0:
        return False
    return not (np.any(g.x["RT"][:, 0] > max_delay) or np.any(g.labels > max_delay))


def iter_snapshots(records, topology: NetworkTopology, config: DatasetConfig) -> Iterator[HeteroGraph]:
    """Every candidate snapshot, unfiltered, day by day."""
    days = sorted({r.day for r in records})
    for day in days:
        idx = DayIndex(records, topology, day)
        for t in config.timestamps():
            yield build_snapshot(idx, topology, t, config.horizon)


def build_dataset(records, topology: NetworkTopology, config: DatasetConfig = DatasetConfig()) -> list[HeteroGraph]:
    records = list(records)
    return [g for g in iter_snapshots(records, topology, config) if keep_graph(g, config.max_delay)]


def split_dataset(graphs: list, ratios=(60, 20, 20), seed: int = 0):
    if not graphs:
        raise ValueError("cannot split an empty dataset")
    if len(ratios) != 3 or sum(ratios) != 100 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative parts summing to 100, got {ratios}")
    order = np.random.default_rng(seed).permutation(len(graphs))
    n = len(graphs)
    n_train = int(round(n * ratios[0] / 100))
    n_val = int(round(n * ratios[1] / 100))
    n_val = min(n_val, n - n_train)
    train = [graphs[i] for i in order[:n_train]]
    val = [graphs[i] for i in order[n_train:n_train + n_val]]
    test = [graphs[i] for i in order[n_train + n_val:]]
    return train, val, test


def split_indices(n: int, ratios=(60, 20, 20), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    tr, va, te = split_dataset(list(range(n)), ratios, seed)
    return tr, va, te


STD_FLOOR = 1e-9


@dataclass
class Normalizer:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {t: {"mean": self.mean[t].tolist(), "std": self.std[t].tolist()} for t in self.mean}

    @classmethod
    def from_dict(cls, doc: dict) -> "Normalizer":
        return cls({t: np.array(v["mean"], dtype=float) for t, v in doc.items()},
                   {t: np.array(v["std"], dtype=float) for t, v in doc.items()})


def fit_normalizer(graphs: list[HeteroGraph]) -> Normalizer:
    mean, std = {}, {}
    for t in NODE_TYPES:
        rows = [g.x[t] for g in graphs if g.x[t].shape[0]]
        dim = graphs[0].x[t].shape[1]
        if rows:
            stacked = np.vstack(rows)
            mu, sd = stacked.mean(axis=0), stacked.std(axis=0)
        else:
            mu, sd = np.zeros(dim), np.ones(dim)
        mean[t] = mu
        std[t] = np.where(sd < STD_FLOOR, 1.0, sd)
    return Normalizer(mean, std)


def apply_normalizer(g: HeteroGraph, stats: Normalizer) -> HeteroGraph:
    x = {t: (g.x[t] - stats.mean[t]) / stats.std[t] for t in NODE_TYPES}
    return replace(g, x=x, edges=dict(g.edges), edge_headways=dict(g.edge_headways),
                   edge_weight=dict(g.edge_weight))


def apply_edge_filter(g: HeteroGraph, mode: str, threshold: float | None = None) -> HeteroGraph:
    """Drop train-train edges: all of them ('selflink'), those with headway > threshold ('cut'), or none ('full')."""
    edges, hws, weights = dict(g.edges), dict(g.edge_headways), dict(g.edge_weight)
    if mode == "full":
        pass
    elif mode in ("selflink", "cut"):
        if mode == "cut" and threshold is None:
            raise ValueError("cut mode needs a threshold")
        for rel in ("rr", "tr"):
            keep = np.zeros(len(hws[rel]), bool) if mode == "selflink" else hws[rel] <= threshold
            edges[rel] = g.edges[rel][:, keep]
            hws[rel] = g.edge_headways[rel][keep]
            weights[rel] = g.edge_weight[rel][keep]
    else:
        raise ValueError(f"unknown edge filter mode {mode!r}")
    return replace(g, edges=edges, edge_headways=hws, edge_weight=weights)


def parse_mode(mode: str) -> tuple[str, float | None]:
    """'selflink' | 'full' | 'cut-K' -> (mode, threshold)."""
    if mode in ("selflink", "full"):
        return mode, None
    if mode.startswith("cut-"):
        return "cut", float(mode[4:])
    raise ValueError(f"unknown ablation mode {mode!r}")


def check_invariants(g: HeteroGraph) -> list[str]:
    """Violations of the snapshot structure rules; empty when the graph is well formed."""
    problems = []
    n_rt, n_tt, n_st = g.num_rt, g.num_nodes("TT"), g.num_stations
    bounds = {"rr": (n_rt, n_rt), "tr": (n_tt, n_rt), "sr": (n_st, n_rt), "ss": (n_st, n_st)}
    for rel, (ns, nd) in bounds.items():
        e = g.edges[rel]
        if e.size and (e[0].min() < 0 or e[0].max() >= ns or e[1].min() < 0 or e[1].max() >= nd):
            problems.append(f"{rel}: edge index out of range")
        if not np.all(g.edge_weight[rel] == 1.0):
            problems.append(f"{rel}: edge weight not 1")
    train_in = np.bincount(np.concatenate([g.edges["rr"][1], g.edges["tr"][1]]), minlength=n_rt)
    if n_rt and train_in.max() > 1:
        problems.append("RT with more than one train in-edge")
    sr_in = np.bincount(g.edges["sr"][1], minlength=n_rt)
    if n_rt and not np.all(sr_in == 1):
        problems.append("RT without exactly one sr in-edge")
    if len(g.labels) != n_rt or not np.all(np.isfinite(g.labels)):
        problems.append("RT rows and labels disagree")
    n_ps = g.num_nodes("PS")
    ss = set(zip(g.edges["ss"][0].tolist(), g.edges["ss"][1].tolist()))
    for a, b in ss:
        if a >= n_ps and b >= n_ps and (b, a) not in ss:
            problems.append(f"yard edge {a}->{b} lacks its reverse")
    if n_rt and np.any(g.x["RT"][:, 2] < g.x["RT"][:, 3]):
        problems.append("S < M for some RT")
    return problems


def graph_to_dict(g: HeteroGraph) -> dict:
    return {
        "day": g.day,
        "T": g.timestamp,
        "dT": g.horizon,
        "nodes": {t: {"ids": g.ids[t], "x": g.x[t].tolist()} for t in NODE_TYPES},
        "edges": {rel: g.edges[rel].tolist() for rel in RELATIONS},
        "edge_headways": {rel: g.edge_headways[rel].tolist() for rel in ("rr", "tr")},
        "labels": g.labels.tolist(),
    }


def graph_from_dict(doc: dict) -> HeteroGraph:
    dims = {"RT": len(RT_FEATURES), "TT": 1, "PS": 1, "TS": 1}
    return HeteroGraph(
        day=doc["day"],
        timestamp=int(doc["T"]),
        horizon=int(doc["dT"]),
        x={t: np.array(doc["nodes"][t]["x"], dtype=float).reshape(-1, dims[t]) for t in NODE_TYPES},
        ids={t: list(doc["nodes"][t]["ids"]) for t in NODE_TYPES},
        edges={rel: np.array(doc["edges"][rel], dtype=np.int64).reshape(2, -1) for rel in RELATIONS},
        labels=np.array(doc["labels"], dtype=float),
        edge_headways={rel: np.array(doc["edge_headways"][rel], dtype=float) for rel in ("rr", "tr")},
    )


def dump_graphs(graphs: Iterable[HeteroGraph]) -> str:
    return "".join(json.dumps(graph_to_dict(g), separators=(",", ":")) + "\n" for g in graphs)


def load_graphs(text: str) -> list[HeteroGraph]:
    return [graph_from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
