"""Synthetic disease-spread scenario over humans, venues and objects.

Humans are infected or virus-free. Infection spreads on handshakes directly
and on visits/touches through the contamination level of the venue or object,
which infected humans raise and which decays geometrically. Infected humans
recover with a fixed per-step probability. State at step ``t`` depends only on
state at ``t-1`` and the interactions logged at ``t``.

Besides the generator this module provides two posterior oracles for
``P(human infected at t | observed labels)``: exhaustive enumeration for toy
scenarios and a guided particle filter otherwise.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .events import EventLog, belief_event, interaction_event, intrinsic_event, make_log
from .ontology import OntologySchema, schema_from_dict
from .state import EntityRef

log = logging.getLogger(__name__)

HUMAN, VENUE, OBJECT = "human", "venue", "object"
# belief layout: [virus-free, infected]
INFECTED = 1


def epidemic_schema(latent_dim: int = 4, takeaway_dim: int = 4) -> OntologySchema:
    def ent(j, f):
        return {"id": j, "intrinsic_dim": f, "belief_dim": 2, "latent_intrinsic_dim": latent_dim,
                "task": "classification"}

    def inter(i, roles):
        return {"id": i, "tau_dim": 1,
                "roles": [{"role_id": r, "entity_type": j, "takeaway_dim": takeaway_dim} for r, j in roles],
                "latent_extrinsic_dims": {j: latent_dim for _, j in roles}}

    return schema_from_dict({
        "entity_types": [ent(HUMAN, 2), ent(VENUE, 1), ent(OBJECT, 1)],
        "interaction_types": [
            inter("handshake", [("a", HUMAN), ("b", HUMAN)]),
            inter("touch", [("human", HUMAN), ("object", OBJECT)]),
            inter("visit", [("human", HUMAN), ("venue", VENUE)]),
        ],
    })


@dataclass
class SimConfig:
    humans: int = 50
    venues: int = 5
    objects: int = 20
    steps: int = 200
    # per-human probability per step of initiating each interaction type
    handshake_rate: float = 0.5
    visit_rate: float = 0.7
    touch_rate: float = 0.7
    p_handshake: float = 0.3
    p_visit: float = 0.1
    p_touch: float = 0.05
    susceptibility_range: tuple[float, float] = (0.0, 1.0)
    # susceptibility = lo + (hi - lo) * age ** power
    susceptibility_power: float = 3.0
    p_recover: float = 0.02
    initial_infection_rate: float = 0.2
    initial_infected: tuple[int, ...] | None = None
    label_rate: float = 0.2
    intrinsic_rate: float = 0.05
    intrinsic_noise: float = 0.05
    contamination_decay: float = 0.5
    contamination_threshold: float = 0.1
    shed: float = 1.0
    tau_range: tuple[float, float] = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.susceptibility_range = tuple(self.susceptibility_range)
        self.tau_range = tuple(self.tau_range)
        if self.initial_infected is not None:
            self.initial_infected = tuple(self.initial_infected)
        probs = ("handshake_rate", "visit_rate", "touch_rate", "p_handshake", "p_visit", "p_touch",
                 "p_recover", "initial_infection_rate", "label_rate", "intrinsic_rate",
                 "contamination_decay")
        for name in probs:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("susceptibility_range", "tau_range"):
            lo, hi = getattr(self, name)
            if not 0.0 <= lo <= hi <= 1.0:
                raise ValueError(f"{name} must be an interval inside [0, 1], got {(lo, hi)}")
        for name in ("humans", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("venues", "objects"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.susceptibility_power <= 0:
            raise ValueError("susceptibility_power must be positive")
        if self.shed < 0 or self.intrinsic_noise < 0 or self.contamination_threshold <= 0:
            raise ValueError("shed and intrinsic_noise must be nonnegative, contamination_threshold positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Scenario:
    """Everything the generator draws before running the infection process."""

    susceptibility: np.ndarray          # (humans,)
    venue_decay: np.ndarray             # (venues,)
    object_decay: np.ndarray            # (objects,)
    initial_prob: np.ndarray            # (humans,) prior infection probability at t=0
    # per step: list of (itype, participants {role: (type, index)}, tau)
    schedule: list[list[tuple[str, dict, float]]]
    features: dict = field(default_factory=dict)  # static human/venue/object attributes

    @property
    def humans(self) -> int:
        return len(self.susceptibility)

    @property
    def steps(self) -> int:
        return len(self.schedule)


@dataclass
class GroundTruth:
    infected: np.ndarray         # (steps, humans) bool
    contamination: np.ndarray    # (steps, venues + objects) float
    contaminated: np.ndarray     # (steps, venues + objects) bool

    def rows(self, venues: int):
        T, H = self.infected.shape
        for t in range(T):
            for h in range(H):
                yield {"entity": [HUMAN, h], "t": t, "infected": bool(self.infected[t, h])}
            for k in range(self.contaminated.shape[1]):
                ref = [VENUE, k] if k < venues else [OBJECT, k - venues]
                yield {"entity": ref, "t": t, "infected": bool(self.contaminated[t, k])}


@dataclass
class Simulation:
    config: SimConfig
    schema: OntologySchema
    scenario: Scenario
    truth: GroundTruth
    log: EventLog
    # (ref, t) -> observed infected flag
    observations: dict

    @property
    def venues(self) -> int:
        return len(self.scenario.venue_decay)

    def prevalence(self) -> np.ndarray:
        return self.truth.infected.mean(axis=1)

    def write(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "schema.json"), "w", encoding="utf-8") as fh:
            fh.write(self.schema.dumps())
        self.log.write(os.path.join(out_dir, "events.jsonl"))
        with open(os.path.join(out_dir, "truth.jsonl"), "w", encoding="utf-8") as fh:
            for row in self.truth.rows(self.venues):
                fh.write(json.dumps(row) + "\n")


# ------------------------------------------------------------------ dynamics

def _exposure(schedule_t, H_prev: np.ndarray, C_prev: np.ndarray, sc: Scenario, cfg: SimConfig):
    """Escape probabilities and contamination deposits for one step.

    ``H_prev`` is (P, humans) bool and ``C_prev`` (P, venues + objects);
    the leading particle axis lets the oracle reuse this code.
    """
    P = H_prev.shape[0]
    escape = np.ones((P, sc.humans))
    deposit = np.zeros_like(C_prev)
    s = sc.susceptibility
    nv = len(sc.venue_decay)
    for itype, parts, tau in schedule_t:
        if itype == "handshake":
            a, b = parts["a"][1], parts["b"][1]
            escape[:, b] *= 1.0 - cfg.p_handshake * s[b] * tau * H_prev[:, a]
            escape[:, a] *= 1.0 - cfg.p_handshake * s[a] * tau * H_prev[:, b]
        else:
            h = parts["human"][1]
            if itype == "visit":
                k, p = parts["venue"][1], cfg.p_visit
            else:
                k, p = nv + parts["object"][1], cfg.p_touch
            escape[:, h] *= 1.0 - p * s[h] * tau * C_prev[:, k]
            deposit[:, k] += cfg.shed * tau * H_prev[:, h]
    return escape, deposit


def _decay(sc: Scenario) -> np.ndarray:
    return np.concatenate([sc.venue_decay, sc.object_decay])


def infection_prob(schedule_t, H_prev, C_prev, sc, cfg):
    """Per-human probability of being infected at the next step, and the
    (deterministic) next contamination levels."""
    escape, deposit = _exposure(schedule_t, H_prev, C_prev, sc, cfg)
    p_inf = np.where(H_prev, 1.0 - cfg.p_recover, 1.0 - escape)
    C_next = np.minimum(1.0, _decay(sc) * C_prev + deposit)
    return p_inf, C_next


def run_truth(sc: Scenario, cfg: SimConfig, rng: np.random.Generator) -> GroundTruth:
    T, Hn = sc.steps, sc.humans
    nc = len(sc.venue_decay) + len(sc.object_decay)
    Hs = np.zeros((T, Hn), dtype=bool)
    Cs = np.zeros((T, nc))
    if cfg.initial_infected is not None:
        Hs[0, list(cfg.initial_infected)] = True
    else:
        Hs[0] = rng.random(Hn) < sc.initial_prob
    for t in range(1, T):
        p_inf, C_next = infection_prob(sc.schedule[t], Hs[t - 1][None], Cs[t - 1][None], sc, cfg)
        Hs[t] = rng.random(Hn) < p_inf[0]
        Cs[t] = C_next[0]
    return GroundTruth(Hs, Cs, Cs >= cfg.contamination_threshold)


def random_scenario(cfg: SimConfig, rng: np.random.Generator) -> Scenario:
    H, V, O = cfg.humans, cfg.venues, cfg.objects
    age = rng.random(H)
    predisposition = rng.random(H)
    sanitation = rng.random(V)
    disinfection = rng.random(O)
    lo, hi = cfg.susceptibility_range
    # cleaner venues/objects shed contamination faster
    sc = Scenario(
        susceptibility=lo + (hi - lo) * age ** cfg.susceptibility_power,
        venue_decay=cfg.contamination_decay * (1.0 - 0.5 * sanitation),
        object_decay=cfg.contamination_decay * (1.0 - 0.5 * disinfection),
        initial_prob=np.full(H, cfg.initial_infection_rate),
        schedule=[[] for _ in range(cfg.steps)],
        features={HUMAN: np.stack([age, predisposition], axis=1),
                  VENUE: sanitation[:, None], OBJECT: disinfection[:, None]},
    )
    tlo, thi = cfg.tau_range
    for t in range(1, cfg.steps):
        step = sc.schedule[t]
        for h in range(H):
            if H > 1 and rng.random() < cfg.handshake_rate:
                other = int(rng.integers(H - 1))
                other += other >= h
                step.append(("handshake", {"a": (HUMAN, h), "b": (HUMAN, other)}, rng.uniform(tlo, thi)))
            if V and rng.random() < cfg.visit_rate:
                step.append(("visit", {"human": (HUMAN, h), "venue": (VENUE, int(rng.integers(V)))},
                             rng.uniform(tlo, thi)))
            if O and rng.random() < cfg.touch_rate:
                step.append(("touch", {"human": (HUMAN, h), "object": (OBJECT, int(rng.integers(O)))},
                             rng.uniform(tlo, thi)))
    return sc


def emit(sc: Scenario, truth: GroundTruth, cfg: SimConfig, rng: np.random.Generator,
         schema: OntologySchema | None = None, label_rates: dict | None = None,
         label_plan: dict | None = None) -> tuple[EventLog, dict]:
    """Turn a scenario plus its ground truth into an event log.

    Labels are drawn per entity per step with ``cfg.label_rate`` unless
    ``label_plan`` fixes the exact ``{(ref, t), ...}`` set to observe.
    """
    schema = schema or epidemic_schema()
    events = []
    obs = {}
    kinds = [(HUMAN, sc.humans), (VENUE, len(sc.venue_decay)), (OBJECT, len(sc.object_decay))]
    feats = sc.features
    nv = len(sc.venue_decay)
    for t in range(sc.steps):
        for j, n in kinds:
            for k in range(n):
                if t == 0 or rng.random() < cfg.intrinsic_rate:
                    base = feats[j][k] if j in feats else np.zeros(schema.entity(j).intrinsic_dim)
                    f = base + cfg.intrinsic_noise * rng.standard_normal(len(base))
                    events.append(intrinsic_event(t, (j, k), f))
        for j, n in kinds:
            rate = cfg.label_rate if label_rates is None else label_rates.get(j, cfg.label_rate)
            for k in range(n):
                ref = EntityRef(j, k)
                draw = rng.random()
                seen = (ref, t) in label_plan if label_plan is not None else draw < rate
                if seen:
                    val = bool(truth.infected[t, k]) if j == HUMAN else bool(
                        truth.contaminated[t, k if j == VENUE else nv + k])
                    obs[(ref, t)] = val
                    events.append(belief_event(t, ref, [0.0, 1.0] if val else [1.0, 0.0]))
        for itype, parts, tau in sc.schedule[t]:
            events.append(interaction_event(t, itype, parts, [tau]))
    return make_log(schema, events), obs


def generate(cfg: SimConfig) -> Simulation:
    """Draw a random scenario, run the infection process and emit the log.
    All randomness flows from ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    schema = epidemic_schema()
    sc = random_scenario(cfg, rng)
    truth = run_truth(sc, cfg, rng)
    log_, obs = emit(sc, truth, cfg, rng, schema)
    return Simulation(cfg, schema, sc, truth, log_, obs)


def chain_scenario(copies: int = 1, p_first: float = 0.5, p_rest: float = 0.05) -> Scenario:
    """``copies`` disjoint A-B-C handshake chains: A-B at step 1, B-C at step 2."""
    H = 3 * copies
    sched = [[], [], []]
    for c in range(copies):
        a, b, cc = 3 * c, 3 * c + 1, 3 * c + 2
        sched[1].append(("handshake", {"a": (HUMAN, a), "b": (HUMAN, b)}, 1.0))
        sched[2].append(("handshake", {"a": (HUMAN, b), "b": (HUMAN, cc)}, 1.0))
    init = np.tile([p_first, p_rest, p_rest], copies)
    return Scenario(np.ones(H), np.zeros(0), np.zeros(0), init, sched,
                    features={HUMAN: np.tile([[0.5, 0.5]], (H, 1))})


def chain_config(**kw) -> SimConfig:
    base = dict(humans=3, venues=0, objects=0, steps=3, p_handshake=0.9, p_recover=0.0,
                susceptibility_range=(1.0, 1.0), tau_range=(1.0, 1.0), intrinsic_rate=0.0,
                intrinsic_noise=0.0)
    base.update(kw)
    return SimConfig(**base)


def simulate_scenario(sc: Scenario, cfg: SimConfig, label_plan=None, seed: int | None = None) -> Simulation:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    schema = epidemic_schema()
    truth = run_truth(sc, cfg, rng)
    log_, obs = emit(sc, truth, cfg, rng, schema, label_plan=label_plan)
    return Simulation(cfg, schema, sc, truth, log_, obs)


# ------------------------------------------------------------------- oracles

EXACT_MAX_ENTITIES = 12
EXACT_MAX_STEPS = 20


class OracleScaleError(ValueError):
    pass


def _obs_by_step(sim: Simulation, exclude, humans_only: bool):
    by_t: dict[int, list[tuple[str, int, bool]]] = {}
    for (ref, t), val in sim.observations.items():
        if (ref, t) in exclude or (humans_only and ref.entity_type != HUMAN):
            continue
        by_t.setdefault(t, []).append((ref.entity_type, ref.index, val))
    return by_t


def exact_posterior(sim: Simulation, entity, t: int, condition: str = "past", exclude=frozenset()) -> float:
    """Exact ``P(entity infected at t | labels)`` by enumerating every joint
    infection trajectory (merged on identical states, which is lossless).

    ``condition="past"`` uses labels at steps ``<= t``; ``"all"`` uses every
    label in the log. Labels listed in ``exclude`` are ignored.
    """
    sc, cfg = sim.scenario, sim.config
    entity = EntityRef(*entity)
    n_ent = sc.humans + len(sc.venue_decay) + len(sc.object_decay)
    if n_ent > EXACT_MAX_ENTITIES or sc.steps > EXACT_MAX_STEPS:
        raise OracleScaleError(f"exact mode supports <= {EXACT_MAX_ENTITIES} entities and "
                               f"<= {EXACT_MAX_STEPS} steps, got {n_ent} and {sc.steps}")
    if condition not in ("past", "all"):
        raise ValueError("condition must be 'past' or 'all'")
    obs = _obs_by_step(sim, exclude, humans_only=False)
    nv = len(sc.venue_decay)
    last = t if condition == "past" else sc.steps - 1
    decay = _decay(sc)
    target = _value_fn(entity, cfg, nv)

    def consistent(H, C, step):
        for j, k, val in obs.get(step, ()):
            if _value_fn(EntityRef(j, k), cfg, nv)(H, C) != val:
                return False
        return True

    # states: (H bits, C levels, query bit or None) -> probability
    dist: dict = {}
    nc = len(decay)
    if cfg.initial_infected is not None:
        H0 = np.zeros(sc.humans, dtype=bool)
        H0[list(cfg.initial_infected)] = True
        dist[(tuple(H0), (0.0,) * nc, None)] = 1.0
    else:
        p0 = sc.initial_prob
        for bits in itertools.product((False, True), repeat=sc.humans):
            b = np.array(bits)
            pr = float(np.prod(np.where(b, p0, 1.0 - p0)))
            if pr > 0:
                dist[(bits, (0.0,) * nc, None)] = pr
    for step in range(last + 1):
        if step > 0:
            new: dict = {}
            for (H, C, q), pr in dist.items():
                Hp = np.array(H)[None]
                Cp = np.array(C, dtype=float)[None]
                p_inf, C_next = infection_prob(sc.schedule[step], Hp, Cp, sc, cfg)
                p_inf = p_inf[0]
                Cn = tuple(float(x) for x in C_next[0])
                free = [h for h in range(sc.humans) if 0.0 < p_inf[h] < 1.0]
                fixed = p_inf >= 1.0
                for outcome in itertools.product((False, True), repeat=len(free)):
                    Hn = fixed.copy()
                    w = pr
                    for h, o in zip(free, outcome):
                        Hn[h] = o
                        w *= p_inf[h] if o else 1.0 - p_inf[h]
                    key = (tuple(bool(x) for x in Hn), Cn, q)
                    new[key] = new.get(key, 0.0) + w
            dist = new
        dist = {k: v for k, v in dist.items() if consistent(np.array(k[0]), np.array(k[1]), step)}
        if step == t:
            dist = {(H, C, target(np.array(H), np.array(C))): pr for (H, C, _), pr in dist.items()}
    total = sum(dist.values())
    if total <= 0:
        raise ValueError("observations have zero probability under the model")
    return sum(pr for (_, _, q), pr in dist.items() if q) / total


def _value_fn(ref: EntityRef, cfg: SimConfig, nv: int):
    if ref.entity_type == HUMAN:
        return lambda H, C: bool(H[ref.index])
    k = ref.index if ref.entity_type == VENUE else nv + ref.index
    return lambda H, C: bool(C[k] >= cfg.contamination_threshold)


def particle_posteriors(sim: Simulation, points, exclude=frozenset(), particles: int = 2000,
                        seed: int = 0) -> dict:
    """Filtering posteriors ``P(human infected at t | human labels <= t)`` for
    every ``(ref, t)`` in ``points`` with a guided particle filter.

    Observed humans are clamped to their label and the particle weight picks up
    the probability of that transition; systematic resampling keeps the
    weights balanced. Labels in ``exclude`` are not conditioned on.
    """
    sc, cfg = sim.scenario, sim.config
    rng = np.random.default_rng(seed)
    obs = _obs_by_step(sim, exclude, humans_only=True)
    want: dict[int, list[EntityRef]] = {}
    for ref, t in points:
        ref = EntityRef(*ref)
        if ref.entity_type != HUMAN:
            raise ValueError("particle oracle only covers humans")
        want.setdefault(t, []).append(ref)
    Hn = sc.humans
    nc = len(sc.venue_decay) + len(sc.object_decay)
    H = np.zeros((particles, Hn), dtype=bool)
    C = np.zeros((particles, nc))
    logw = np.zeros(particles)
    if cfg.initial_infected is not None:
        H[:, list(cfg.initial_infected)] = True
        p_first = None
    else:
        p_first = np.broadcast_to(sc.initial_prob, (particles, Hn))
    out = {}
    fallbacks = 0
    last = max(want) if want else -1
    for t in range(last + 1):
        if t == 0:
            p_inf = p_first
        else:
            p_inf, C = infection_prob(sc.schedule[t], H, C, sc, cfg)
        if p_inf is not None:
            H = rng.random((particles, Hn)) < p_inf
        with np.errstate(divide="ignore"):
            for j, k, val in obs.get(t, ()):
                if p_inf is not None:
                    pk = p_inf[:, k]
                    logw += np.log(pk if val else 1.0 - pk)
                    H[:, k] = val
                elif H[0, k] != val:
                    logw[:] = -np.inf
        if not np.isfinite(logw).any():
            fallbacks += 1
            logw[:] = 0.0
        w = np.exp(logw - logw.max())
        w /= w.sum()
        for ref in want.get(t, ()):
            out[(ref, t)] = float(w @ H[:, ref.index])
        ess = 1.0 / np.sum(w * w)
        if ess < particles / 2:
            pos = (rng.random() + np.arange(particles)) / particles
            idx = np.minimum(np.searchsorted(np.cumsum(w), pos), particles - 1)
            H, C = H[idx], C[idx]
            logw = np.zeros(particles)
        else:
            with np.errstate(divide="ignore"):
                logw = np.log(w)
    if fallbacks:
        log.debug("particle filter hit %d zero-likelihood steps", fallbacks)
    return out


def oracle_posterior(sim: Simulation, entity, t: int, mode: str = "auto", exclude=frozenset(),
                     **kw) -> float:
    """Posterior probability that ``entity`` is infected at ``t`` given the
    labels of the log up to ``t``; exact at toy scale, Monte-Carlo otherwise."""
    entity = EntityRef(*entity)
    if (entity, t) in sim.observations and (entity, t) not in exclude:
        return float(sim.observations[(entity, t)])
    sc = sim.scenario
    small = (sc.humans + len(sc.venue_decay) + len(sc.object_decay) <= EXACT_MAX_ENTITIES
             and sc.steps <= EXACT_MAX_STEPS)
    if mode == "exact" or (mode == "auto" and small):
        return exact_posterior(sim, entity, t, exclude=exclude, **kw)
    return particle_posteriors(sim, [(entity, t)], exclude=exclude, **kw)[(entity, t)]


def config_to_json(cfg: SimConfig) -> str:
    return json.dumps(asdict(cfg))
