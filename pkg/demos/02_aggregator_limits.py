"""
How the two time aggregators behave at their limits
===================================================

The full-history aggregator pools an entity's record window with attention
that decays with age; the markovian one is a gated recurrent update.
"""

import numpy as np

from hyperlearn import aggregators as agg
from hyperlearn import diffcore as dc
from hyperlearn.state import History

rng = np.random.default_rng(0)

# %%
# Same five records, three decay rates. Large decay puts nearly all weight
# on the newest record; small decay spreads it out.
h = History(16)
for t in (0, 2, 5, 8, 9):
    h.append(rng.normal(size=2), t)
base = {"W_enc": dc.parameter(rng.normal(size=(3, 2))), "b_enc": dc.parameter(np.zeros(3)),
        "w_att": dc.parameter(np.zeros(3))}
for lam_raw in (-4.0, 0.0, 10.0):
    params = dict(base, lam_raw=dc.parameter(np.array([lam_raw])))
    _, w = agg.time_aggregate_full(h, 9, params, return_weights=True)
    lam = float(dc.softplus(params["lam_raw"]).value[0])
    print(f"decay {lam:6.3f}  weights by age {np.round(w, 4)}")

# %%
# A saturated update gate either keeps the previous latent or replaces it.
def gru(bias_z, d=3, k=2):
    p = {f"W_{g}": dc.parameter(rng.normal(size=(d, k + d))) for g in "zrh"}
    p.update({f"b_{g}": dc.parameter(rng.normal(size=d)) for g in "rh"})
    p["W_z"].value[...] = 0.0
    p["b_z"] = dc.parameter(np.full(d, bias_z))
    return p

u, prev = rng.normal(size=2), rng.normal(size=3)
print("previous", prev)
print("gate shut", agg.time_aggregate_markov(u, prev, gru(-800.0)).value)
print("gate open", agg.time_aggregate_markov(u, prev, gru(800.0)).value)
print("halfway  ", agg.time_aggregate_markov(u, prev, gru(0.0)).value)
