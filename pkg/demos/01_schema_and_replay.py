"""
Schemas, event logs and replay
==============================

Declare a small ontology, write an event log by hand, and watch the state
store carry every entity's latest values forward from step to step.
"""

import json

from hyperlearn import diffcore as dc
from hyperlearn.aggregators import build_parameters
from hyperlearn.events import belief_event, interaction_event, intrinsic_event, make_log, replay
from hyperlearn.ontology import schema_from_dict
from hyperlearn.state import EntityRef
from hyperlearn.trainer import Engine, TrainConfig

# %%
# Two entity types and two interaction types. Latent sizes default to the
# raw sizes when left out.
schema = schema_from_dict({
    "entity_types": [
        {"id": "human", "intrinsic_dim": 2, "belief_dim": 2},
        {"id": "venue", "intrinsic_dim": 1, "belief_dim": 2},
    ],
    "interaction_types": [
        {"id": "handshake", "tau_dim": 1,
         "roles": [{"role_id": "a", "entity_type": "human", "takeaway_dim": 2},
                   {"role_id": "b", "entity_type": "human", "takeaway_dim": 2}]},
        {"id": "visit", "tau_dim": 1,
         "roles": [{"role_id": "human", "entity_type": "human", "takeaway_dim": 2},
                   {"role_id": "venue", "entity_type": "venue", "takeaway_dim": 2}]},
    ],
})
print("schema hash", schema.hash()[:12])
for j in schema.entity_types:
    print(j.id, "data vector blocks:", schema.layout(j.id))

# %%
alice, bob, cafe = EntityRef("human", 0), EntityRef("human", 1), EntityRef("venue", 0)
log = make_log(schema, [
    intrinsic_event(0, alice, [0.3, 0.9]),
    intrinsic_event(0, bob, [0.7, 0.1]),
    intrinsic_event(0, cafe, [0.5]),
    interaction_event(1, "visit", {"human": alice, "venue": cafe}, [0.8]),
    belief_event(2, bob, [0.0, 1.0]),
    interaction_event(4, "handshake", {"a": alice, "b": bob}, [0.4]),
])
print(log.dumps().splitlines()[0])  # header line
print(len(log), "events over steps", log.t_range)

# %%
# Replay fills in the quiet step 3 as an empty step. An untrained engine is
# enough to see which snapshots move: only entities with events change.
engine = Engine(schema, build_parameters(schema), TrainConfig(lookback=8))
with dc.no_grad():
    for st in replay(log):
        before = {r: s.vector().copy() for r, s in engine.snap.items()}
        engine.step(st, learn=False)
        moved = sorted(f"{r.entity_type}{r.index}" for r in engine.snap
                       if r not in before or (engine.snap[r].vector() != before[r]).any())
        print(f"t={st.t}: {len(st.events())} events, changed {moved or 'nothing'}")

# %%
# The debug dump lists the stored latent blocks per entity.
for line in engine.store.dump(4).splitlines():
    row = json.loads(line)
    print(row["type"], row["index"], "belief", row["belief"], "chi_hat types", list(row["chi_hat"]))
