"""Online/offline training loop over a replayed event log.

Each step runs, in order: intrinsic updates and their time-aggregation, belief
updates (or carry-forward), space-aggregation of every interaction from the
previous step's snapshots followed by extrinsic time-aggregation, readout and
loss on the entities whose belief was observed, back-propagation, and finally
freezing of the step's snapshots.

All instances of one type processed in the same step are batched into row
matrices, so the number of tape nodes per step scales with the number of
types rather than the number of entities.
"""

from __future__ import annotations

import json
import logging
from contextlib import nullcontext
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable

import numpy as np
from scipy.stats import rankdata

from . import diffcore as dc
from .aggregators import (MODES, build_parameters, loss_from_output, readout_logits, space_aggregate,
                          time_aggregate_full, time_aggregate_markov)
from .diffcore import Node, ParameterStore, Tape, no_grad
from .events import Event, EventLog, Step, replay
from .ontology import OntologySchema
from .state import (DEFAULT_LOOKBACK, EntityRef, EntityState, EntityStore, carry_forward, record_intrinsic,
                    record_takeaway, set_belief, snapshot_data_vector)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lookback: int = DEFAULT_LOOKBACK
    mode: str = "markovian"
    bptt_horizon: int = 2
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    online: bool = False
    # "step": optimizer update after every supervised step; "epoch": once per pass
    update: str = "step"
    seed: int = 0
    readout_hidden: int = 16
    space_hidden: int | None = None
    mask_self_belief: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lookback < 1:
            raise ValueError("lookback must be a positive integer")
        if not 1 <= self.bptt_horizon <= self.lookback:
            raise ValueError("bptt_horizon must satisfy 1 <= bptt_horizon <= lookback")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.update not in ("step", "epoch"):
            raise ValueError("update must be 'step' or 'epoch'")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepReport:
    t: int
    loss_by_type: dict[str, float]
    count_by_type: dict[str, int]
    count: int
    running_mean: float | None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Snapshot:
    """Frozen data vector of one entity at the close of a step."""

    belief: np.ndarray
    f_val: np.ndarray
    f_src: object
    chi_vals: tuple
    chi_srcs: tuple

    def vector(self) -> np.ndarray:
        return np.concatenate([self.belief, self.f_val, *self.chi_vals])


def _live(src) -> bool:
    return src is not None and src[0].requires_grad


def gather(values: list[np.ndarray], sources: list) -> Node:
    """Row-stack latents, keeping the differentiable path where one exists."""
    if any(_live(s) for s in sources):
        return dc.take_rows([s if _live(s) else (dc.constant(v), None) for v, s in zip(values, sources)])
    return dc.constant(np.stack(values))


class Engine:
    """Runs steps of the training loop against one entity store."""

    def __init__(self, schema: OntologySchema, params: ParameterStore, config: TrainConfig,
                 optimizer=None, eager: bool = False):
        self.schema = schema
        self.params = params
        self.config = config
        self.optimizer = optimizer
        # eager: re-aggregate every entity every step (reference for lazy mode)
        self.eager = eager
        self.parts = {e.id: schema.participations(e.id) for e in schema.entity_types}
        self.tasks = {e.id: e.task for e in schema.entity_types}
        self.idims = {e.id: e.intrinsic_dim for e in schema.entity_types}
        self.reset()

    def reset(self):
        for _, tape in getattr(self, "_tapes", ()):
            tape.freeze()
        self.store = EntityStore(self.schema, self.config.lookback)
        self.snap: dict[EntityRef, Snapshot] = {}
        self._tapes: deque[tuple[int, Tape]] = deque()
        self._observed: set[EntityRef] = set()
        self.loss_sum = 0.0
        self.count = 0
        self.t = None

    @property
    def epoch_mean(self) -> float | None:
        return self.loss_sum / self.count if self.count else None

    # ----------------------------------------------------------- helpers

    def state(self, ref: EntityRef) -> EntityState:
        if ref not in self.store:
            st = self.store.get(ref)
            self.snap[ref] = self._snapshot_of(st)
            return st
        return self.store.states[ref]

    def _snapshot_of(self, st: EntityState) -> Snapshot:
        order = self.parts[st.ref.entity_type]
        return Snapshot(st.belief, st.f_hat, st.f_src,
                        tuple(st.chi_hat[i] for i in order), tuple(st.chi_src.get(i) for i in order))

    def _horizon(self) -> int:
        return self.config.bptt_horizon if self.config.mode == "markovian" else 1

    def _truncate(self, t: int):
        h = self._horizon()
        while self._tapes and self._tapes[0][0] <= t - h:
            self._tapes.popleft()[1].freeze()

    def freeze_all(self):
        while self._tapes:
            self._tapes.popleft()[1].freeze()

    # ------------------------------------------------------- aggregation

    def _markov_rounds(self, family: str, key_of, items: dict[EntityRef, list], prev_of, assign):
        """Apply the recurrent cell to each entity's queued updates in arrival
        order, batching the k-th update of every entity of the same key."""
        groups: dict[tuple, list[EntityRef]] = {}
        for ref in items:
            groups.setdefault(key_of(ref), []).append(ref)
        for key, refs in groups.items():
            params = self.params.group(family, key)
            rnd = 0
            while True:
                batch = [r for r in refs if len(items[r]) > rnd]
                if not batch:
                    break
                ups = [items[r][rnd] for r in batch]
                U = gather([u[0] for u in ups], [u[1] for u in ups])
                pv = [prev_of(r) for r in batch]
                P = gather([p[0] for p in pv], [p[1] for p in pv])
                out = time_aggregate_markov(U, P, params)
                for k, r in enumerate(batch):
                    assign(r, out.value[k], (out, k))
                rnd += 1

    def _aggregate_intrinsic_full(self, st: EntityState, t: int):
        params = self.params.group("intrinsic", (st.ref.entity_type,))
        st.intrinsic_history.evict(t)
        node = time_aggregate_full(st.intrinsic_history, t, params)
        st.f_hat, st.f_src = node.value, (node, None)

    def _aggregate_extrinsic_full(self, st: EntityState, i: str, t: int):
        params = self.params.group("extrinsic", (st.ref.entity_type, i))
        st.extrinsic_history[i].evict(t)
        node = time_aggregate_full(st.extrinsic_history[i], t, params)
        st.chi_hat[i], st.chi_src[i] = node.value, (node, None)

    def _intrinsic(self, events: list[Event], t: int, touched: set):
        queued: dict[EntityRef, list] = {}
        for ev in events:
            st = self.state(ev.entity)
            f = np.asarray(ev.vector)
            record_intrinsic(st, f, t, self.idims[ev.entity.entity_type])
            queued.setdefault(ev.entity, []).append((f, None))
            touched.add(ev.entity)
        if self.config.mode == "markovian":
            def assign(ref, value, src):
                st = self.store.states[ref]
                st.f_hat, st.f_src = value, src

            self._markov_rounds("intrinsic", lambda r: (r.entity_type,), queued,
                                lambda r: (self.store.states[r].f_hat, self.store.states[r].f_src), assign)
        else:
            for ref in queued:
                self._aggregate_intrinsic_full(self.store.states[ref], t)

    def _interactions(self, events: list[Event], t: int, touched: set):
        queued: dict[tuple[EntityRef, str], list] = {}
        by_type: dict[str, list[Event]] = {}
        for ev in events:
            by_type.setdefault(ev.itype, []).append(ev)
            for _, ref in ev.participants:
                self.state(ref)
        # every interaction instance in file order gets a slot so arrival order is kept
        slots: list[tuple[EntityRef, str, int, str, int]] = []
        outputs: dict[str, dict[str, Node]] = {}
        for i, evs in by_type.items():
            it = self.schema.interaction(i)
            snaps = []
            for p, role in enumerate(it.roles):
                rows = [self.snap[ev.roles[role.role_id]] for ev in evs]
                lay_parts = self.parts[role.entity_type]
                blocks = [dc.constant(np.stack([s.belief for s in rows])),
                          gather([s.f_val for s in rows], [s.f_src for s in rows])]
                for b in range(len(lay_parts)):
                    blocks.append(gather([s.chi_vals[b] for s in rows], [s.chi_srcs[b] for s in rows]))
                snaps.append(dc.concat(*blocks))
            tau = dc.constant(np.array([ev.tau for ev in evs], dtype=float).reshape(len(evs), it.tau_dim))
            outputs[i] = space_aggregate(self.schema, it, snaps, tau, self.params.group("space", (i,)),
                                         mask_self_belief=self.config.mask_self_belief)
        position = {}
        for n_ev, ev in enumerate(events):
            k = position[ev.itype] = position.get(ev.itype, -1) + 1
            roles = ev.roles
            for role_id in self.schema.interaction(ev.itype).role_ids:
                ref = roles[role_id]
                slots.append((ref, ev.itype, n_ev, role_id, k))
        for ref, i, _, role_id, k in slots:
            out = outputs[i][role_id]
            st = self.store.states[ref]
            record_takeaway(st, i, out.value[k], t, source=(out, k))
            queued.setdefault((ref, i), []).append((out.value[k], (out, k)))
            touched.add(ref)
        if self.config.mode == "markovian":
            def assign(key, value, src):
                st = self.store.states[key[0]]
                st.chi_hat[key[1]], st.chi_src[key[1]] = value, src

            def prev(key):
                st = self.store.states[key[0]]
                return st.chi_hat[key[1]], st.chi_src.get(key[1])

            self._markov_rounds("extrinsic", lambda key: (key[0].entity_type, key[1]), queued, prev, assign)
        else:
            for ref, i in queued:
                self._aggregate_extrinsic_full(self.store.states[ref], i, t)

    # ---------------------------------------------------------- readout

    def _readout(self, refs: list[EntityRef], t: int, refresh: bool) -> dict[str, tuple[list, Node]]:
        """Readout logits per entity type for ``refs``; in full-history mode
        latents are re-aggregated with the current parameters first."""
        by_type: dict[str, list[EntityRef]] = {}
        for r in refs:
            by_type.setdefault(r.entity_type, []).append(r)
        out = {}
        for j, rs in by_type.items():
            states = [self.state(r) for r in rs]
            if refresh and self.config.mode == "full_history":
                for st in states:
                    self._aggregate_intrinsic_full(st, t)
                    for i in self.parts[j]:
                        self._aggregate_extrinsic_full(st, i, t)
            F = gather([s.f_hat for s in states], [s.f_src for s in states])
            chis = [gather([s.chi_hat[i] for s in states], [s.chi_src.get(i) for s in states])
                    for i in self.parts[j]]
            out[j] = (rs, readout_logits(F, chis, self.params.group("readout", (j,))))
        return out

    # ------------------------------------------------------------- step

    def step(self, st: Step, learn: bool = True, holdout: frozenset = frozenset(),
             predict: Iterable[EntityRef] = (), apply: bool = True):
        """Process one step. Returns ``(report, predictions)`` where
        predictions maps ``(ref, t)`` to ``(beta, target_or_None)`` for
        held-out belief points and for the explicitly requested refs."""
        t = st.t
        if self.t is not None and t <= self.t:
            raise ValueError(f"step {t} does not follow step {self.t}")
        self.t = t
        self._truncate(t)
        tape = Tape()
        touched: set[EntityRef] = set()
        with tape:
            self._intrinsic(st.intrinsic, t, touched)

            targets: dict[EntityRef, np.ndarray] = {}
            withheld: dict[EntityRef, np.ndarray] = {}
            for ev in st.beliefs:
                if (ev.entity, t) in holdout:
                    withheld[ev.entity] = np.asarray(ev.vector)
                    continue
                s = self.state(ev.entity)
                set_belief(s, ev.vector, t)
                targets[ev.entity] = s.belief
                touched.add(ev.entity)
            for ref in self._observed - set(targets):
                carry_forward(self.store.states[ref], t)
            self._observed = set(targets)

            self._interactions(st.interactions, t, touched)

            if self.eager:
                for ref, s in self.store.states.items():
                    if self.config.mode == "full_history":
                        self._aggregate_intrinsic_full(s, t)
                        for i in self.parts[ref.entity_type]:
                            self._aggregate_extrinsic_full(s, i, t)
                    touched.add(ref)

            report = self._supervise(t, targets, learn, apply)

            predictions = {}
            want = list(dict.fromkeys(list(withheld) + [r for r in predict if r not in withheld]))
            if want:
                with no_grad():
                    for j, (rs, logits) in self._readout(want, t, refresh=True).items():
                        beta = dc._softmax(logits.value) if self.tasks[j] == "classification" else logits.value
                        for k, r in enumerate(rs):
                            predictions[(r, t)] = (beta[k].copy(), withheld.get(r))
                for r in want:
                    touched.add(r)
        for ref in touched:
            self.snap[ref] = self._snapshot_of(self.store.states[ref])
        if len(tape):
            self._tapes.append((t, tape))
        return report, predictions

    def _supervise(self, t: int, targets: dict, learn: bool, apply: bool) -> StepReport:
        loss_by_type: dict[str, float] = {}
        count_by_type: dict[str, int] = {}
        if not targets:
            return StepReport(t, {}, {}, 0, self.epoch_mean)
        refs = list(targets)
        ctx = no_grad() if not learn else nullcontext()
        with ctx:
            total = None
            for j, (rs, logits) in self._readout(refs, t, refresh=True).items():
                tgt = np.stack([targets[r] for r in rs])
                lj = loss_from_output(tgt, logits, self.tasks[j])
                loss_by_type[j] = float(lj.value)
                count_by_type[j] = len(rs)
                total = lj if total is None else dc.add(total, lj)
            n = len(refs)
            objective = dc.scale(1.0 / n, total)
            if learn:
                dc.backward(objective)
                if apply and self.optimizer is not None and self.config.update == "step":
                    self.optimizer.step()
        self.loss_sum += float(total.value)
        self.count += n
        return StepReport(t, loss_by_type, count_by_type, n, self.epoch_mean)


# --------------------------------------------------------------- checkpoints

def make_checkpoint(schema: OntologySchema, params: ParameterStore, config: TrainConfig, optimizer=None) -> dict:
    return {
        "schema_hash": schema.hash(),
        "seed": params.seed,
        "step": optimizer.t if optimizer is not None else 0,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "config": config.to_dict(),
        "params": params.to_dict(),
    }


class CheckpointError(ValueError):
    pass


def load_checkpoint(checkpoint: dict, schema: OntologySchema) -> tuple[ParameterStore, TrainConfig]:
    if checkpoint.get("schema_hash") != schema.hash():
        raise CheckpointError("checkpoint schema_hash does not match the schema")
    config = TrainConfig.from_dict(checkpoint.get("config", {}))
    params = build_parameters(schema, config.mode, checkpoint.get("seed", 0),
                              config.readout_hidden, config.space_hidden)
    params.load_dict(checkpoint["params"])
    return params, config


def write_checkpoint(checkpoint: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint, fh)


def read_checkpoint(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    trajectory: list[float]
    checkpoint: dict
    params: ParameterStore
    reports: list[StepReport] = field(default_factory=list)


def train(schema: OntologySchema, log_: EventLog, config: TrainConfig, holdout: frozenset = frozenset(),
          params: ParameterStore | None = None, on_report: Callable[[int, StepReport], None] | None = None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit all four mapping families jointly. Offline mode replays the log
    ``epochs`` times with a fresh entity store per pass; online mode makes a
    single pass. Returns the per-pass mean loss trajectory and a checkpoint."""
    if params is None:
        params = build_parameters(schema, config.mode, config.seed, config.readout_hidden, config.space_hidden)
    opt = dc.make_optimizer(config.optimizer, params, config.lr,
                            **({"beta1": config.beta1, "beta2": config.beta2, "eps": config.eps}
                               if config.optimizer == "adam" else {}))
    engine = Engine(schema, params, config, opt)
    trajectory: list[float] = []
    steps = list(replay(log_))
    passes = 1 if config.online else config.epochs
    for epoch in range(passes):
        engine.reset()
        for st in steps:
            report, _ = engine.step(st, learn=True, holdout=holdout)
            if on_report is not None:
                on_report(epoch, report)
        engine.freeze_all()
        if config.update == "epoch":
            opt.step()
        mean = engine.epoch_mean
        trajectory.append(float("nan") if mean is None else mean)
        if on_epoch is not None:
            on_epoch(epoch, trajectory[-1])
        log.info("epoch %d mean loss %s", epoch, mean)
    return TrainResult(trajectory, make_checkpoint(schema, params, config, opt), params)


def replay_predictions(schema: OntologySchema, log_: EventLog, params: ParameterStore, config: TrainConfig,
                       holdout: frozenset = frozenset(), predict_at: dict | None = None,
                       until: int | None = None):
    """Replay without learning; returns predictions and the final engine."""
    engine = Engine(schema, params, config)
    preds = {}
    predict_at = predict_at or {}
    with no_grad():
        for st in replay(log_):
            if until is not None and st.t > until:
                break
            _, p = engine.step(st, learn=False, holdout=holdout, predict=predict_at.get(st.t, ()))
            preds.update(p)
    return preds, engine


def mean_loss(schema, log_, params, config, holdout=frozenset()) -> float:
    """Mean supervised loss of a fixed model over one replay."""
    engine = Engine(schema, params, config)
    with no_grad():
        for st in replay(log_):
            engine.step(st, learn=False, holdout=holdout)
    return engine.epoch_mean


# --------------------------------------------------------------- evaluation

def select_holdout(log_: EventLog, fraction: float, seed: int = 0,
                   entity_types: Iterable[str] | None = None) -> frozenset:
    """Deterministic random subset of the observed ``(entity, t)`` label points."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("holdout fraction must lie in [0, 1]")
    types = None if entity_types is None else set(entity_types)
    points = sorted({(ev.entity, ev.t) for ev in log_.events if ev.kind == "belief_update"
                     and (types is None or ev.entity.entity_type in types)})
    rng = np.random.default_rng(seed)
    keep = rng.random(len(points)) < fraction
    return frozenset(p for p, k in zip(points, keep) if k)


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate(schema: OntologySchema, log_: EventLog, checkpoint: dict, holdout: frozenset,
             positive_index: int = -1) -> dict:
    """Metrics on held-out belief points, which are hidden during replay."""
    if not holdout:
        raise ValueError("empty holdout")
    params, config = load_checkpoint(checkpoint, schema)
    preds, _ = replay_predictions(schema, log_, params, config, holdout=holdout)
    per_type: dict[str, dict] = {}
    rows: dict[str, list] = {}
    for (ref, t), (beta, target) in sorted(preds.items()):
        if target is None:
            continue
        rows.setdefault(ref.entity_type, []).append((beta, target))
    from .aggregators import loss as point_loss
    all_losses = []
    for j, rs in sorted(rows.items()):
        task = schema.entity(j).task
        betas = np.stack([b for b, _ in rs])
        tgts = np.stack([g for _, g in rs])
        losses = [point_loss(g, b, task) for b, g in rs]
        all_losses += losses
        m = {"n": len(rs), "mean_loss": float(np.mean(losses))}
        if task == "classification":
            m["accuracy"] = float(np.mean(betas.argmax(axis=1) == tgts.argmax(axis=1)))
            if betas.shape[1] == 2:
                k = positive_index % 2
                m["auc"] = auc(betas[:, k], tgts[:, k] > 0.5)
            else:
                aucs = [auc(betas[:, c], tgts.argmax(axis=1) == c) for c in range(betas.shape[1])]
                m["auc"] = float(np.nanmean(aucs))
        else:
            m["rmse"] = float(np.sqrt(np.mean((betas - tgts) ** 2)))
        per_type[j] = m
    return {"mean_loss": float(np.mean(all_losses)) if all_losses else float("nan"),
            "n": len(all_losses), "by_type": per_type}


def infer(schema: OntologySchema, log_: EventLog, checkpoint: dict, entity: EntityRef, t: int) -> dict:
    """Estimate for ``entity`` at step ``t`` plus the L2 norm of each readout
    input block (intrinsic latent and one per interaction type)."""
    entity = EntityRef(*entity)
    rng = log_.t_range
    if rng is None or not rng[0] <= t <= rng[1]:
        raise ValueError(f"t={t} outside the replayed range {rng}")
    params, config = load_checkpoint(checkpoint, schema)
    preds, engine = replay_predictions(schema, log_, params, config, until=t)
    if entity not in engine.store:
        raise KeyError(f"unknown entity {entity} at t={t}")
    with no_grad():
        (rs, logits), = engine._readout([entity], t, refresh=False).values()
    st = engine.store.states[entity]
    task = schema.entity(entity.entity_type).task
    beta = dc._softmax(logits.value[0]) if task == "classification" else logits.value[0]
    attribution = {"intrinsic": float(np.linalg.norm(st.f_hat))}
    for i in engine.parts[entity.entity_type]:
        attribution[i] = float(np.linalg.norm(st.chi_hat[i]))
    return {"entity": [entity.entity_type, entity.index], "t": t, "beta": beta.tolist(),
            "attribution": attribution, "data_vector": snapshot_data_vector(st).tolist()}
