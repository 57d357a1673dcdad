"""Per-entity live state: beliefs, latent aggregates and bounded histories."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .ontology import OntologySchema, SchemaError

DEFAULT_LOOKBACK = 64


class StateError(ValueError):
    pass


class EntityRef(NamedTuple):
    entity_type: str
    index: int

    def __str__(self):
        return f"{self.entity_type}:{self.index}"


class TimedRecord(NamedTuple):
    value: np.ndarray
    timestamp: int
    # optional (node, row) handle for the differentiable source of ``value``
    source: object = None


class History:
    """Time-sorted records no older than ``window`` steps at the last append."""

    def __init__(self, window: int = DEFAULT_LOOKBACK):
        if window < 1:
            raise StateError(f"lookback window must be positive, got {window}")
        self.window = window
        self.records: deque[TimedRecord] = deque()

    def append(self, value, t: int, source=None):
        if t < 0:
            raise StateError(f"negative timestamp {t}")
        if self.records and t < self.records[-1].timestamp:
            raise StateError(f"time regression: {t} < {self.records[-1].timestamp}")
        self.records.append(TimedRecord(np.asarray(value, dtype=float), t, source))
        self.evict(t)

    def evict(self, t: int):
        cutoff = t - self.window
        while self.records and self.records[0].timestamp < cutoff:
            self.records.popleft()

    @property
    def timestamps(self) -> list[int]:
        return [r.timestamp for r in self.records]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass
class EntityState:
    ref: EntityRef
    belief: np.ndarray
    belief_ts: int
    f_hat: np.ndarray
    chi_hat: dict[str, np.ndarray]
    intrinsic_history: History
    extrinsic_history: dict[str, History]
    observed: bool = False
    # per-step observed flags, keyed by step
    observed_mask: dict[int, bool] = field(default_factory=dict)
    # differentiable handles for the latents, (node, row) or None
    f_src: object = None
    chi_src: dict[str, object] = field(default_factory=dict)

    def block_refs(self, order):
        return [self.chi_src.get(i) for i in order]


def init_entity(schema: OntologySchema, ref: EntityRef, lookback: int = DEFAULT_LOOKBACK) -> EntityState:
    try:
        spec = schema.entity(ref.entity_type)
    except SchemaError:
        raise StateError(f"unknown entity type {ref.entity_type!r}") from None
    if spec.task == "classification":
        belief = np.full(spec.belief_dim, 1.0 / spec.belief_dim)
    else:
        belief = np.zeros(spec.belief_dim)
    parts = schema.participations(ref.entity_type)
    return EntityState(
        ref=ref,
        belief=belief,
        belief_ts=-1,
        f_hat=np.zeros(spec.latent_intrinsic_dim),
        chi_hat={i: np.zeros(schema.interaction(i).latent_extrinsic_dims[ref.entity_type]) for i in parts},
        intrinsic_history=History(lookback),
        extrinsic_history={i: History(lookback) for i in parts},
    )


def record_intrinsic(state: EntityState, f, t: int, intrinsic_dim: int | None = None):
    f = np.asarray(f, dtype=float)
    if intrinsic_dim is not None and f.shape != (intrinsic_dim,):
        raise StateError(f"{state.ref}: intrinsic update has shape {f.shape}, expected ({intrinsic_dim},)")
    state.intrinsic_history.append(f, t)


def record_takeaway(state: EntityState, i: str, chi, t: int, source=None):
    if i not in state.extrinsic_history:
        raise StateError(f"{state.ref}: type {state.ref.entity_type!r} does not take part in {i!r}")
    state.extrinsic_history[i].append(chi, t, source)


def set_belief(state: EntityState, b, t: int):
    b = np.asarray(b, dtype=float)
    if b.shape != state.belief.shape:
        raise StateError(f"{state.ref}: belief has shape {b.shape}, expected {state.belief.shape}")
    state.belief = b.copy()
    state.belief_ts = t
    state.observed = True
    state.observed_mask[t] = True


def carry_forward(state: EntityState, t: int):
    """No belief event at ``t``: keep the previous value and its original timestamp."""
    state.observed = False
    state.observed_mask[t] = False


def snapshot_data_vector(state: EntityState) -> np.ndarray:
    """``belief ⊕ f_hat ⊕ chi_hat[i] for i sorted``; a pure read."""
    blocks = [state.belief, state.f_hat] + [state.chi_hat[i] for i in sorted(state.chi_hat)]
    return np.concatenate(blocks)


class EntityStore:
    """All entity states of one run, created on first reference."""

    def __init__(self, schema: OntologySchema, lookback: int = DEFAULT_LOOKBACK):
        self.schema = schema
        self.lookback = lookback
        self.states: dict[EntityRef, EntityState] = {}

    def get(self, ref: EntityRef) -> EntityState:
        st = self.states.get(ref)
        if st is None:
            st = self.states[ref] = init_entity(self.schema, ref, self.lookback)
        return st

    def __contains__(self, ref):
        return ref in self.states

    def __iter__(self):
        return iter(sorted(self.states))

    def count_by_type(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for ref in self.states:
            out[ref.entity_type] = out.get(ref.entity_type, 0) + 1
        return out

    def dump(self, t: int, include_histories: bool = False) -> str:
        """JSON-lines debug dump, one entity per line."""
        lines = []
        for ref in self:
            st = self.states[ref]
            row = {
                "type": ref.entity_type, "index": ref.index, "t": t,
                "belief": st.belief.tolist(), "belief_ts": st.belief_ts,
                "f_hat": st.f_hat.tolist(),
                "chi_hat": {i: v.tolist() for i, v in sorted(st.chi_hat.items())},
            }
            if include_histories:
                row["intrinsic_history"] = [[r.value.tolist(), r.timestamp] for r in st.intrinsic_history]
                row["extrinsic_history"] = {
                    i: [[r.value.tolist(), r.timestamp] for r in h] for i, h in sorted(st.extrinsic_history.items())
                }
            lines.append(json.dumps(row))
        return "\n".join(lines) + ("\n" if lines else "")
