"""Small fixed schemas and logs used by tests, gradcheck and the demos."""

from __future__ import annotations

import numpy as np

from .events import EventLog, belief_event, interaction_event, intrinsic_event, make_log
from .ontology import OntologySchema, schema_from_dict
from .state import EntityRef

NODE = "node"
PAIR = "pair"


def pair_schema(intrinsic_dim: int = 2, latent_dim: int = 3, takeaway_dim: int = 2,
                tau_dim: int = 1) -> OntologySchema:
    """One entity type taking part in one binary interaction type."""
    return schema_from_dict({
        "entity_types": [{"id": NODE, "intrinsic_dim": intrinsic_dim, "belief_dim": 2,
                          "latent_intrinsic_dim": latent_dim, "task": "classification"}],
        "interaction_types": [{
            "id": PAIR, "tau_dim": tau_dim,
            "roles": [{"role_id": "a", "entity_type": NODE, "takeaway_dim": takeaway_dim},
                      {"role_id": "b", "entity_type": NODE, "takeaway_dim": takeaway_dim}],
            "latent_extrinsic_dims": {NODE: latent_dim},
        }],
    })


def node(k: int) -> EntityRef:
    return EntityRef(NODE, k)


def onehot(c: int) -> list[float]:
    return [1.0 - c, float(c)]


def two_entity_log(schema: OntologySchema, steps: int = 3, seed: int = 0) -> EventLog:
    """Two nodes that exchange features, labels and one interaction per step.

    Beliefs are soft so every gradient term is generic (no exact zeros).
    """
    rng = np.random.default_rng(seed)
    d = schema.entity(NODE).intrinsic_dim
    tau_dim = schema.interaction(PAIR).tau_dim
    events = []
    for t in range(steps):
        for k in range(2):
            events.append(intrinsic_event(t, node(k), rng.normal(size=d)))
        for k in range(2):
            p = float(rng.uniform(0.2, 0.8))
            events.append(belief_event(t, node(k), [1 - p, p]))
        events.append(interaction_event(t, PAIR, {"a": node(0), "b": node(1)}, rng.normal(size=tau_dim)))
    return make_log(schema, events)


def tiny_dataset(entities: int = 8, steps: int = 50, seed: int = 7,
                 feature_rate: float = 0.5, label_rate: float = 0.5,
                 pair_rate: float = 0.3) -> tuple[OntologySchema, EventLog]:
    """Fixed learnable dataset: each node carries a static hidden point, seen
    through noisy intrinsic updates; its class is which side of a line the
    point falls on. Classes are balanced by construction."""
    schema = pair_schema()
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(entities, 2))
    score = x[:, 0] + x[:, 1]
    cls = (score > np.median(score)).astype(int)
    events = []
    for t in range(steps):
        for k in range(entities):
            if t == 0 or rng.random() < feature_rate:
                events.append(intrinsic_event(t, node(k), x[k] + 0.05 * rng.normal(size=2)))
        for k in range(entities):
            if rng.random() < label_rate:
                events.append(belief_event(t, node(k), onehot(int(cls[k]))))
        for k in range(entities):
            if rng.random() < pair_rate:
                other = int(rng.integers(entities - 1))
                other += other >= k
                events.append(interaction_event(t, PAIR, {"a": node(k), "b": node(other)},
                                                [float(rng.uniform())]))
    return schema, make_log(schema, events)
