"""Synthetic timetables and delayed operation days.

Trains on a line keep their order (no overtaking). Actual times come from one
forward sweep per line in train order, so every rear train sees its forward
train's final actual times.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from datetime import date, timedelta
from typing import Iterable, Mapping

import numpy as np

from .records import NetworkTopology, OperationRecord, service_class


class TimetableError(ValueError):
    pass


@dataclass(frozen=True)
class PlanEntry:
    line: int
    service_class: str
    origin_dep: int
    train_id: str | None = None


@dataclass(frozen=True)
class DisturbanceConfig:
    primary_delay_prob: float = 0.05
    primary_delay_mean: float = 4.0
    primary_delay_max: int = 30
    early_prob: float = 0.3
    early_max: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("primary_delay_prob", "early_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.primary_delay_mean < 1.0:
            # geometric over positive minutes cannot have a mean below 1
            raise ValueError("primary_delay_mean must be >= 1")
        if self.primary_delay_max < 1 or self.early_max < 0:
            raise ValueError("primary_delay_max must be >= 1 and early_max >= 0")

    @classmethod
    def from_json(cls, text: str) -> "DisturbanceConfig":
        doc = json.loads(text)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown disturbance keys: {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


NO_DISTURBANCE = DisturbanceConfig(primary_delay_prob=0.0, early_prob=0.0)


def make_plan(
    topology: NetworkTopology,
    seed: int,
    start: int = 7 * 60,
    end: int = 22 * 60 + 30,
    min_gap: int | None = None,
    max_gap: int = 14,
    classes: tuple[str, ...] | None = None,
) -> list[PlanEntry]:
    """Random daily service plan: per line, origin departures with gaps drawn from [min_gap, max_gap]."""
    rng = np.random.default_rng(seed)
    min_gap = topology.min_headway + 1 if min_gap is None else min_gap
    if min_gap < topology.min_headway or max_gap < min_gap:
        raise ValueError("need min_headway <= min_gap <= max_gap")
    classes = tuple(classes or topology.service_classes)
    plan = []
    for li in range(len(topology.lines)):
        t = start + int(rng.integers(0, max_gap))
        k = 0
        while t <= end:
            cls = classes[int(rng.integers(len(classes)))]
            plan.append(PlanEntry(li, cls, t, f"{cls}{(li + 1) * 1000 + k}"))
            k += 1
            t += int(rng.integers(min_gap, max_gap + 1))
    return plan


def _by_line(entries, key):
    lines: dict[int, list] = {}
    for e in entries:
        lines.setdefault(key(e), []).append(e)
    return lines


def generate_timetable(
    topology: NetworkTopology,
    plan: Iterable[PlanEntry],
    seed: int,
    day: date = date(2015, 3, 24),
    max_extra_dwell: int = 2,
) -> list[OperationRecord]:
    """Scheduled records (actual times equal scheduled) for one day of the plan.

    Dwell at each intermediate station is min_dwell plus a seeded draw from
    [0, max_extra_dwell]. Departures and arrivals at every station are pushed so
    consecutive trains of a line stay at least min_headway apart.
    """
    rng = np.random.default_rng(seed)
    h = topology.min_headway
    out: list[OperationRecord] = []
    lines = _by_line(plan, lambda e: e.line)
    for li in sorted(lines):
        if not 0 <= li < len(topology.lines):
            raise TimetableError(f"plan references unknown line {li}")
        entries = sorted(lines[li], key=lambda e: e.origin_dep)
        for prev, cur in zip(entries, entries[1:]):
            if cur.origin_dep - prev.origin_dep < h:
                raise TimetableError(
                    f"line {li}: origin departures at {prev.origin_dep} and {cur.origin_dep} "
                    f"closer than min_headway {h}"
                )
        stations = topology.lines[li]
        n = len(stations)
        fwd_arr = fwd_dep = None
        for k, e in enumerate(entries):
            tid = e.train_id or f"{e.service_class}{(li + 1) * 1000 + k}"
            if service_class(tid) != e.service_class.upper():
                raise TimetableError(f"train id {tid} does not carry class prefix {e.service_class}")
            runs = [topology.section(stations[i], stations[i + 1], e.service_class).sched_run for i in range(n - 1)]
            arr = [0] * n
            dep = [0] * n
            for i in range(n):
                if i == 0:
                    arr[0] = dep[0] = e.origin_dep
                else:
                    arr[i] = dep[i - 1] + runs[i - 1]
                    if i == n - 1:
                        dep[i] = arr[i]
                        break
                    dep[i] = arr[i] + topology.min_dwell + int(rng.integers(0, max_extra_dwell + 1))
                if fwd_dep is not None:
                    dep[i] = max(dep[i], fwd_dep[i] + h, fwd_arr[i + 1] + h - runs[i])
                if i == 0:
                    arr[0] = dep[0]
            for i, sid in enumerate(stations):
                track = str(1 + k % topology.stations[sid].track_count)
                out.append(OperationRecord(tid, sid, day, arr[i], dep[i], arr[i], dep[i], track))
            fwd_arr, fwd_dep = arr, dep
    return out


def _itineraries(schedule: Iterable[OperationRecord], topology: NetworkTopology):
    trains: dict[str, list[OperationRecord]] = {}
    for r in schedule:
        trains.setdefault(r.train_id, []).append(r)
    per_line: dict[int, list[list[OperationRecord]]] = {}
    for recs in trains.values():
        recs.sort(key=lambda r: r.sched_arr)
        pos = topology.line_position(recs[0].station_id)
        if pos is None or pos[1] != 0:
            raise TimetableError(f"train {recs[0].train_id} does not start at a line origin")
        line = topology.lines[pos[0]]
        if [r.station_id for r in recs] != line:
            raise TimetableError(f"train {recs[0].train_id} does not run the full line")
        per_line.setdefault(pos[0], []).append(recs)
    for li in per_line:
        per_line[li].sort(key=lambda recs: recs[0].sched_dep)
    return per_line


def simulate_day(
    schedule: Iterable[OperationRecord],
    topology: NetworkTopology,
    disturbance: DisturbanceConfig,
    seed: int,
    extra_delays: Mapping[tuple[str, str], int] | None = None,
) -> list[OperationRecord]:
    """Actual times for one scheduled day.

    act_dep = max(sched_dep, act_arr + min_dwell, forward act_dep + min_headway) + primary delay.
    A train departing late runs a section in max(min_run, sched_run - delay), i.e. it
    spends supplement time only until back on schedule; otherwise it runs sched_run.
    Arrivals are held to forward act_arr + min_headway, so trains never bunch up in a section.
    `extra_delays` adds fixed primary delays at (train_id, station_id) departures.
    """
    rng = np.random.default_rng(seed)
    extra_delays = extra_delays or {}
    h = topology.min_headway
    p_geo = 1.0 / disturbance.primary_delay_mean
    out: list[OperationRecord] = []
    per_line = _itineraries(schedule, topology)
    for li in sorted(per_line):
        fwd_arr = fwd_dep = None
        for recs in per_line[li]:
            tid = recs[0].train_id
            cls = service_class(tid)
            n = len(recs)
            arr = [0] * n
            dep = [0] * n
            for i, r in enumerate(recs):
                # fixed draw count per event keeps the random stream independent of the state
                u_primary, magnitude = rng.random(), int(rng.geometric(p_geo))
                u_early, early = rng.random(), int(rng.integers(1, disturbance.early_max + 1)) if disturbance.early_max else 0
                primary = min(magnitude, disturbance.primary_delay_max) if u_primary < disturbance.primary_delay_prob else 0
                primary += extra_delays.get((tid, r.station_id), 0)
                if i == 0:
                    base = r.sched_dep - (early if u_early < disturbance.early_prob else 0)
                    if fwd_dep is not None:
                        base = max(base, fwd_dep[0] + h)
                    dep[0] = base + primary
                    arr[0] = dep[0]
                    continue
                prev = recs[i - 1]
                sec = topology.section(prev.station_id, r.station_id, cls)
                late = dep[i - 1] - prev.sched_dep
                run = max(sec.min_run, sec.sched_run - late) if late > 0 else sec.sched_run
                arr[i] = dep[i - 1] + run
                if fwd_arr is not None:
                    arr[i] = max(arr[i], fwd_arr[i] + h)
                if i == n - 1:
                    dep[i] = arr[i]
                    break
                d = max(r.sched_dep, arr[i] + topology.min_dwell)
                if fwd_dep is not None:
                    d = max(d, fwd_dep[i] + h)
                dep[i] = d + primary
            for i, r in enumerate(recs):
                out.append(replace(r, act_arr=arr[i], act_dep=dep[i]))
            fwd_arr, fwd_dep = arr, dep
    return out


def simulate(
    topology: NetworkTopology,
    disturbance: DisturbanceConfig,
    days: int,
    seed: int,
    start_date: date = date(2015, 3, 24),
    plan: list[PlanEntry] | None = None,
    max_gap: int = 14,
) -> list[OperationRecord]:
    """`days` consecutive days sharing one seeded timetable, each with its own disturbance draw.

    Without an explicit `plan`, origin departures per line are spaced by draws from
    [min_headway + 1, max_gap] minutes.
    """
    root = np.random.SeedSequence([disturbance.seed, seed])
    plan_seed, tt_seed, *day_seeds = (int(s.generate_state(1)[0]) for s in root.spawn(days + 2))
    plan = make_plan(topology, plan_seed, max_gap=max_gap) if plan is None else plan
    base = generate_timetable(topology, plan, tt_seed, start_date)
    out = []
    for d in range(days):
        day = start_date + timedelta(days=d)
        schedule = [replace(r, day=day) for r in base]
        out.extend(simulate_day(schedule, topology, disturbance, day_seeds[d]))
    out.sort(key=lambda r: (r.train_id, r.day, r.sched_arr, r.sched_dep))
    return out
