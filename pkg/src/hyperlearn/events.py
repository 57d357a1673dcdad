"""Event log ingestion, validation and deterministic replay.

The log is JSON-lines. The first line is a header::

    {"format": "hyperlearn-events", "version": 1, "schema_hash": "<hex>"}

followed by one event per line, nondecreasing in ``t``.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

import numpy as np

from .ontology import OntologySchema, SchemaError
from .state import EntityRef

FORMAT = "hyperlearn-events"
VERSION = 1
KINDS = ("belief_update", "intrinsic_update", "interaction")


class EventError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


@dataclass(frozen=True)
class Event:
    t: int
    kind: str
    entity: EntityRef | None = None
    vector: tuple[float, ...] = ()
    itype: str | None = None
    participants: tuple[tuple[str, EntityRef], ...] = ()
    tau: tuple[float, ...] = ()

    @property
    def roles(self) -> dict[str, EntityRef]:
        return dict(self.participants)

    def to_dict(self) -> dict:
        d: dict = {"t": self.t, "kind": self.kind}
        if self.kind == "interaction":
            d["itype"] = self.itype
            d["participants"] = {r: [e.entity_type, e.index] for r, e in self.participants}
            d["tau"] = list(self.tau)
        else:
            d["entity"] = [self.entity.entity_type, self.entity.index]
            d["b" if self.kind == "belief_update" else "f"] = list(self.vector)
        return d


def belief_event(t: int, entity: EntityRef, b) -> Event:
    return Event(t, "belief_update", EntityRef(*entity), tuple(float(x) for x in b))


def intrinsic_event(t: int, entity: EntityRef, f) -> Event:
    return Event(t, "intrinsic_update", EntityRef(*entity), tuple(float(x) for x in f))


def interaction_event(t: int, itype: str, participants: dict, tau=()) -> Event:
    return Event(t, "interaction", itype=itype,
                 participants=tuple((r, EntityRef(*e)) for r, e in participants.items()),
                 tau=tuple(float(x) for x in tau))


def serialize_event(event: Event) -> str:
    return json.dumps(event.to_dict())


def _vector(value, n: int, what: str, line) -> tuple[float, ...]:
    if not isinstance(value, list):
        raise EventError(f"{what} must be an array of numbers", line)
    out = []
    for x in value:
        if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
            raise EventError(f"{what} contains a non-finite or non-numeric entry {x!r}", line)
        out.append(float(x))
    if len(out) != n:
        raise EventError(f"{what} has length {len(out)}, expected {n}", line)
    return tuple(out)


def _entity_ref(value, schema: OntologySchema, line) -> EntityRef:
    if (not isinstance(value, list) or len(value) != 2 or not isinstance(value[0], str)
            or isinstance(value[1], bool) or not isinstance(value[1], int) or value[1] < 0):
        raise EventError(f"entity reference must be [type, nonnegative index], got {value!r}", line)
    try:
        schema.entity(value[0])
    except SchemaError as exc:
        raise EventError(str(exc), line) from None
    return EntityRef(value[0], value[1])


def event_from_dict(obj, schema: OntologySchema, line: int | None = None) -> Event:
    if not isinstance(obj, dict):
        raise EventError("event must be a JSON object", line)
    t = obj.get("t")
    if isinstance(t, bool) or not isinstance(t, int):
        raise EventError(f"t must be an integer, got {t!r}", line)
    if t < 0:
        raise EventError(f"negative time step {t}", line)
    kind = obj.get("kind")
    if kind not in KINDS:
        raise EventError(f"unknown event kind {kind!r}", line)
    if kind == "interaction":
        try:
            it = schema.interaction(obj.get("itype"))
        except SchemaError as exc:
            raise EventError(str(exc), line) from None
        parts = obj.get("participants")
        if not isinstance(parts, dict):
            raise EventError("participants must be an object keyed by role", line)
        missing = [r for r in it.role_ids if r not in parts]
        extra = [r for r in parts if r not in it.role_ids]
        if missing or extra:
            raise EventError(f"interaction {it.id!r} role mismatch: missing {missing}, unexpected {extra}", line)
        refs = []
        for role in it.roles:
            ref = _entity_ref(parts[role.role_id], schema, line)
            if ref.entity_type != role.entity_type:
                raise EventError(f"role {role.role_id!r} of {it.id!r} expects {role.entity_type!r}, "
                                 f"got {ref.entity_type!r}", line)
            refs.append((role.role_id, ref))
        tau = _vector(obj.get("tau", []), it.tau_dim, "tau", line)
        return Event(t, kind, itype=it.id, participants=tuple(refs), tau=tau)
    ref = _entity_ref(obj.get("entity"), schema, line)
    spec = schema.entity(ref.entity_type)
    if kind == "belief_update":
        b = _vector(obj.get("b"), spec.belief_dim, "b", line)
        if spec.task == "classification":
            arr = np.asarray(b)
            if np.any(arr < 0) or abs(arr.sum() - 1.0) > 1e-6:
                raise EventError(f"classification belief off the probability simplex: {list(b)}", line)
        return Event(t, kind, ref, b)
    f = _vector(obj.get("f"), spec.intrinsic_dim, "f", line)
    return Event(t, kind, ref, f)


def parse_event_line(line: str, schema: OntologySchema, lineno: int | None = None) -> Event:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise EventError(f"malformed JSON ({exc.msg} at column {exc.colno})", lineno) from None
    return event_from_dict(obj, schema, lineno)


@dataclass
class EventLog:
    schema_hash: str
    events: list[Event] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    def header(self) -> dict:
        return {"format": FORMAT, "version": VERSION, "schema_hash": self.schema_hash}

    def dumps(self) -> str:
        lines = [json.dumps(self.header())] + [serialize_event(e) for e in self.events]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @property
    def t_range(self) -> tuple[int, int] | None:
        if not self.events:
            return None
        return self.events[0].t, self.events[-1].t


def make_log(schema: OntologySchema, events: Iterable[Event]) -> EventLog:
    """Build a log from events, stably sorted by time."""
    return EventLog(schema.hash(), sorted(events, key=lambda e: e.t))


def read_event_log(source: str | TextIO, schema: OntologySchema, check_hash: bool = True) -> EventLog:
    """Read a log from a path, an open text file, or ``"-"`` for stdin."""
    if isinstance(source, str):
        if source == "-":
            import sys
            return _read(sys.stdin, schema, check_hash)
        with open(source, encoding="utf-8") as fh:
            return _read(fh, schema, check_hash)
    return _read(source, schema, check_hash)


def parse_event_log(text: str, schema: OntologySchema, check_hash: bool = True) -> EventLog:
    return _read(io.StringIO(text), schema, check_hash)


def _read(fh: TextIO, schema: OntologySchema, check_hash: bool) -> EventLog:
    first = fh.readline()
    if not first.strip():
        raise EventError("empty event log (missing header)", 1)
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise EventError(f"malformed header ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise EventError(f"header must declare format {FORMAT!r}", 1)
    if header.get("version") != VERSION:
        raise EventError(f"unsupported version {header.get('version')!r}", 1)
    digest = header.get("schema_hash", "")
    if check_hash and digest != schema.hash():
        raise EventError("schema_hash does not match the supplied schema", 1)
    events = []
    last_t = -1
    for n, line in enumerate(fh, start=2):
        if not line.strip():
            continue
        ev = parse_event_line(line, schema, n)
        if ev.t < last_t:
            raise EventError(f"events out of order: t={ev.t} after t={last_t}", n)
        last_t = ev.t
        events.append(ev)
    return EventLog(digest, events)


@dataclass
class Step:
    t: int
    intrinsic: list[Event] = field(default_factory=list)
    beliefs: list[Event] = field(default_factory=list)
    interactions: list[Event] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.intrinsic or self.beliefs or self.interactions)

    def events(self) -> list[Event]:
        return self.intrinsic + self.beliefs + self.interactions

    def by_entity(self) -> dict[EntityRef, list[Event]]:
        out: dict[EntityRef, list[Event]] = {}
        for ev in self.events():
            if ev.kind == "interaction":
                for _, ref in ev.participants:
                    out.setdefault(ref, []).append(ev)
            else:
                out.setdefault(ev.entity, []).append(ev)
        return out

    def by_interaction_type(self) -> dict[str, list[Event]]:
        out: dict[str, list[Event]] = {}
        for ev in self.interactions:
            out.setdefault(ev.itype, []).append(ev)
        return out


def replay(log: EventLog) -> Iterator[Step]:
    """Yield every step from the first to the last event time, empty ones
    included; within a step intrinsic, then belief, then interaction events,
    each in file order."""
    if not log.events:
        return
    prev = -1
    for ev in log.events:
        if ev.t < prev:
            raise EventError(f"unsorted log: t={ev.t} after t={prev}")
        prev = ev.t
    t0, t1 = log.events[0].t, log.events[-1].t
    steps = {t: Step(t) for t in range(t0, t1 + 1)}
    for ev in log.events:
        st = steps[ev.t]
        if ev.kind == "intrinsic_update":
            st.intrinsic.append(ev)
        elif ev.kind == "belief_update":
            st.beliefs.append(ev)
        else:
            st.interactions.append(ev)
    for t in range(t0, t1 + 1):
        yield steps[t]
