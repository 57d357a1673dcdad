"""
Learning who is infected from a contact log
===========================================

Simulate a small town, hide a fifth of the infection labels, train the
markovian estimator and compare it with a particle-filter posterior that
knows the true dynamics. Takes a couple of minutes on one core.
"""

import numpy as np

from hyperlearn.epidemic import HUMAN, SimConfig, generate, particle_posteriors
from hyperlearn.trainer import TrainConfig, auc, evaluate, make_checkpoint, select_holdout, train
from hyperlearn.aggregators import build_parameters

sim = generate(SimConfig(seed=0))
prev = sim.prevalence()
print(f"{len(sim.log)} events, {len(sim.observations)} labels, prevalence {prev.min():.2f}..{prev.max():.2f}")

# %%
holdout = select_holdout(sim.log, 0.2, seed=0, entity_types=[HUMAN])
points = sorted(holdout)
y = np.array([sim.observations[p] for p in points], dtype=float)
oracle = particle_posteriors(sim, points, exclude=holdout, particles=2000)
print("oracle AUC", round(auc([oracle[p] for p in points], y), 3))

# %%
cfg = TrainConfig(epochs=10, lr=3e-3)
params = build_parameters(sim.schema, cfg.mode, cfg.seed)
before = evaluate(sim.schema, sim.log, make_checkpoint(sim.schema, params, cfg), holdout)
res = train(sim.schema, sim.log, cfg, holdout=holdout, params=params,
            on_epoch=lambda e, m: print(f"  epoch {e + 1} loss {m:.4f}"))
after = evaluate(sim.schema, sim.log, res.checkpoint, holdout)
print("model AUC", round(before["by_type"][HUMAN]["auc"], 3), "->", round(after["by_type"][HUMAN]["auc"], 3))
