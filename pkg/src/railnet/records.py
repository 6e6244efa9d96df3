"""Operation records, network topology, their file formats and validation.

Times are integer minutes since midnight of the record's day.
"""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable

RECORD_HEADER = ["train_id", "station_id", "day", "act_arr", "act_dep", "sched_arr", "sched_dep", "track"]

PASSING = "passing"
TERMINAL_YARD = "terminal-yard"

_HHMM = re.compile(r"^(\d{1,2}):(\d{2})$")
_CLASS_PREFIX = re.compile(r"^([A-Za-z]+)")


class RecordParseError(ValueError):
    """A records file row could not be parsed."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class RecordValidationError(ValueError):
    pass


class TopologySchemaError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class OperationRecord:
    train_id: str
    station_id: str
    day: date
    sched_arr: int
    sched_dep: int
    act_arr: int
    act_dep: int
    track: str = ""

    @property
    def arrival_delay(self) -> int:
        return self.act_arr - self.sched_arr

    @property
    def departure_delay(self) -> int:
        return self.act_dep - self.sched_dep


def delays(record: OperationRecord) -> tuple[int, int]:
    """(AD, DD) recomputed from the rendered clock strings, not the fields' arithmetic."""
    sa, sd = parse_hhmm(format_hhmm(record.sched_arr)), parse_hhmm(format_hhmm(record.sched_dep))
    aa, ad = parse_hhmm(format_hhmm(record.act_arr)), parse_hhmm(format_hhmm(record.act_dep))
    return aa - sa, ad - sd


def service_class(train_id: str) -> str:
    """Service class of a train, read from the alphabetic prefix of its number (G6023 -> "G")."""
    m = _CLASS_PREFIX.match(train_id)
    if not m:
        raise ValueError(f"train id {train_id!r} has no service-class prefix")
    return m.group(1).upper()


def parse_hhmm(text: str) -> int:
    m = _HHMM.match(text.strip())
    if not m:
        raise ValueError(f"bad time {text!r}, expected HH:MM")
    hours, minutes = int(m.group(1)), int(m.group(2))
    if minutes >= 60 or hours >= 48:
        raise ValueError(f"bad time {text!r}")
    return hours * 60 + minutes


def format_hhmm(minutes: int) -> str:
    if minutes < 0 or minutes >= 48 * 60:
        raise ValueError(f"time {minutes} min out of range")
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def parse_records(text: str) -> list[OperationRecord]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows:
        return []
    header = [h.strip() for h in rows[0]]
    if header != RECORD_HEADER:
        raise RecordParseError(1, f"expected header {','.join(RECORD_HEADER)}")

    records = []
    seen: dict[tuple[str, str, date], int] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(RECORD_HEADER):
            raise RecordParseError(lineno, f"expected {len(RECORD_HEADER)} fields, got {len(row)}")
        train_id, station_id, day_s, aa, ad, sa, sd, track = (c.strip() for c in row)
        try:
            day = date.fromisoformat(day_s)
            act_arr, act_dep = parse_hhmm(aa), parse_hhmm(ad)
            sched_arr, sched_dep = parse_hhmm(sa), parse_hhmm(sd)
        except ValueError as exc:
            raise RecordParseError(lineno, str(exc)) from None
        if not train_id or not station_id:
            raise RecordParseError(lineno, "empty train or station id")
        if act_dep < act_arr:
            raise RecordValidationError(f"line {lineno}: actual departure before actual arrival")
        if sched_dep < sched_arr:
            raise RecordValidationError(f"line {lineno}: scheduled departure before scheduled arrival")
        key = (train_id, station_id, day)
        if key in seen:
            raise RecordValidationError(
                f"line {lineno}: duplicate record for {train_id} at {station_id} on {day} (first at line {seen[key]})"
            )
        seen[key] = lineno
        records.append(OperationRecord(train_id, station_id, day, sched_arr, sched_dep, act_arr, act_dep, track))

    records.sort(key=lambda r: (r.train_id, r.day, r.sched_arr, r.sched_dep))
    return records


def serialize_records(records: Iterable[OperationRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RECORD_HEADER)
    for r in records:
        writer.writerow([
            r.train_id, r.station_id, r.day.isoformat(),
            format_hhmm(r.act_arr), format_hhmm(r.act_dep),
            format_hhmm(r.sched_arr), format_hhmm(r.sched_dep),
            r.track,
        ])
    return buf.getvalue()


@dataclass(frozen=True)
class Station:
    station_id: str
    kind: str
    track_count: int


@dataclass(frozen=True)
class SectionTime:
    sched_run: int
    min_run: int


@dataclass
class NetworkTopology:
    stations: dict[str, Station]
    lines: list[list[str]]
    yard_links: list[tuple[str, str]]
    section_times: dict[tuple[str, str, str], SectionTime]
    min_headway: int
    min_dwell: int
    _line_of: dict[str, tuple[int, int]] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._line_of = {}
        for li, line in enumerate(self.lines):
            for pos, sid in enumerate(line):
                if self.stations.get(sid) is not None and self.stations[sid].kind == PASSING:
                    self._line_of[sid] = (li, pos)

    @property
    def passing_ids(self) -> list[str]:
        return [s for s, st in self.stations.items() if st.kind == PASSING]

    @property
    def yard_ids(self) -> list[str]:
        return [s for s, st in self.stations.items() if st.kind == TERMINAL_YARD]

    @property
    def service_classes(self) -> list[str]:
        return sorted({k[2] for k in self.section_times})

    def sections(self) -> list[tuple[str, str]]:
        out = []
        for line in self.lines:
            out.extend(zip(line[:-1], line[1:]))
        return out

    def section(self, a: str, b: str, cls: str) -> SectionTime:
        try:
            return self.section_times[(a, b, cls)]
        except KeyError:
            raise KeyError(f"no section time for {a}->{b} class {cls}") from None

    def line_position(self, station_id: str) -> tuple[int, int] | None:
        """(line index, position) of a passing station; None for yards and unknown ids."""
        return self._line_of.get(station_id)


def load_topology(text: str) -> NetworkTopology:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologySchemaError(f"invalid JSON: {exc}") from None
    for key in ("stations", "lines", "yard_links", "section_times", "min_headway", "min_dwell"):
        if key not in doc:
            raise TopologySchemaError(f"missing key {key!r}")

    stations: dict[str, Station] = {}
    for entry in doc["stations"]:
        sid, kind, tracks = entry.get("station_id"), entry.get("kind"), entry.get("track_count")
        if not isinstance(sid, str) or not sid:
            raise TopologySchemaError(f"bad station entry {entry!r}")
        if kind not in (PASSING, TERMINAL_YARD):
            raise TopologySchemaError(f"station {sid}: kind must be {PASSING!r} or {TERMINAL_YARD!r}")
        if not isinstance(tracks, int) or tracks < 1:
            raise TopologySchemaError(f"station {sid}: track_count must be an integer >= 1")
        if sid in stations:
            raise TopologySchemaError(f"duplicate station {sid}")
        stations[sid] = Station(sid, kind, tracks)

    lines = [list(line) for line in doc["lines"]]
    used_passing: set[str] = set()
    for li, line in enumerate(lines):
        if len(line) < 2:
            raise TopologySchemaError(f"line {li} needs at least two stations")
        for sid in line:
            if sid not in stations:
                raise TopologySchemaError(f"line {li}: unknown station {sid}")
        if stations[line[-1]].kind != TERMINAL_YARD:
            raise TopologySchemaError(f"line {li} must end at a terminal yard, ends at {line[-1]}")
        for sid in line[:-1]:
            if stations[sid].kind != PASSING:
                raise TopologySchemaError(f"line {li}: {sid} is a terminal yard but not the line's end")
            if sid in used_passing:
                raise TopologySchemaError(f"passing station {sid} appears on more than one line position")
            used_passing.add(sid)

    links: set[tuple[str, str]] = set()
    for pair in doc["yard_links"]:
        if len(pair) != 2:
            raise TopologySchemaError(f"yard link {pair!r} must be a pair")
        a, b = pair
        for sid in (a, b):
            if sid not in stations or stations[sid].kind != TERMINAL_YARD:
                raise TopologySchemaError(f"yard link {pair!r}: {sid} is not a terminal yard")
        if a == b:
            raise TopologySchemaError(f"yard link {pair!r} links a yard to itself")
        links.add((a, b) if a < b else (b, a))

    section_times: dict[tuple[str, str, str], SectionTime] = {}
    for entry in doc["section_times"]:
        try:
            a, b, cls = entry["from"], entry["to"], entry["service_class"]
            st = SectionTime(int(entry["sched_run"]), int(entry["min_run"]))
        except (KeyError, TypeError, ValueError):
            raise TopologySchemaError(f"bad section_times entry {entry!r}") from None
        if not 0 < st.min_run <= st.sched_run:
            raise TopologySchemaError(f"section {a}->{b} class {cls}: need 0 < min_run <= sched_run")
        section_times[(a, b, cls)] = st

    classes = {k[2] for k in section_times}
    if not classes:
        raise TopologySchemaError("section_times is empty")
    for line in lines:
        for a, b in zip(line[:-1], line[1:]):
            for cls in classes:
                if (a, b, cls) not in section_times:
                    raise TopologySchemaError(f"missing section_times entry {a}->{b} for class {cls}")

    min_headway, min_dwell = doc["min_headway"], doc["min_dwell"]
    if not isinstance(min_headway, int) or min_headway < 0:
        raise TopologySchemaError("min_headway must be a non-negative integer")
    if not isinstance(min_dwell, int) or min_dwell < 0:
        raise TopologySchemaError("min_dwell must be a non-negative integer")

    return NetworkTopology(stations, lines, sorted(links), section_times, min_headway, min_dwell)


def dump_topology(topology: NetworkTopology) -> str:
    doc = {
        "stations": [
            {"station_id": s.station_id, "kind": s.kind, "track_count": s.track_count}
            for s in topology.stations.values()
        ],
        "lines": topology.lines,
        "yard_links": [list(p) for p in topology.yard_links],
        "section_times": [
            {"from": a, "to": b, "service_class": c, "sched_run": st.sched_run, "min_run": st.min_run}
            for (a, b, c), st in topology.section_times.items()
        ],
        "min_headway": topology.min_headway,
        "min_dwell": topology.min_dwell,
    }
    return json.dumps(doc, indent=2)


@dataclass(frozen=True)
class Issue:
    kind: str  # unknown-station | ordering | itinerary
    train_id: str
    day: date
    message: str


def group_itineraries(records: Iterable[OperationRecord]) -> dict[tuple[date, str], list[OperationRecord]]:
    groups: dict[tuple[date, str], list[OperationRecord]] = {}
    for r in records:
        groups.setdefault((r.day, r.train_id), []).append(r)
    for recs in groups.values():
        recs.sort(key=lambda r: (r.sched_arr, r.sched_dep))
    return groups


def match_line(topology: NetworkTopology, station_ids: Iterable[str]) -> int | None:
    """Index of the line whose prefix is exactly this station set, else None."""
    wanted = set(station_ids)
    for li, line in enumerate(topology.lines):
        if set(line[: len(wanted)]) == wanted:
            return li
    return None


def validate(records: Iterable[OperationRecord], topology: NetworkTopology) -> list[Issue]:
    issues = []
    for (day, train_id), recs in group_itineraries(records).items():
        unknown = [r.station_id for r in recs if r.station_id not in topology.stations]
        for sid in unknown:
            issues.append(Issue("unknown-station", train_id, day, f"unknown station {sid}"))
        if unknown:
            continue
        li = match_line(topology, (r.station_id for r in recs))
        if li is None:
            issues.append(Issue("itinerary", train_id, day,
                                "stations " + ",".join(r.station_id for r in recs) + " are not a line prefix"))
            continue
        by_station = {r.station_id: r for r in recs}
        ordered = [by_station[s] for s in topology.lines[li][: len(recs)]]
        for attr in ("sched", "act"):
            times = []
            for r in ordered:
                times += [getattr(r, attr + "_arr"), getattr(r, attr + "_dep")]
            bad = next((i for i in range(1, len(times)) if times[i] < times[i - 1]), None)
            if bad is not None:
                issues.append(Issue("ordering", train_id, day,
                                    f"{attr} times not monotone along line at {ordered[bad // 2].station_id}"))
                break
    return issues
