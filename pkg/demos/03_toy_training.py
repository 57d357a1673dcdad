"""
Training on a tiny learnable log
================================

Eight nodes, each with a hidden point seen through noisy features, and a
class given by which side of a line the point falls on. Both aggregation
modes learn it quickly.
"""

from hyperlearn import aggregators as agg
from hyperlearn.toy import node, tiny_dataset
from hyperlearn.trainer import TrainConfig, infer, mean_loss, select_holdout, train, evaluate

schema, log = tiny_dataset()
print(len(log), "events,", schema.entity_types[0].id, "entities x 50 steps")

# %%
for mode in agg.MODES:
    cfg = TrainConfig(mode=mode, epochs=20, lr=0.01, lookback=16)
    params = agg.build_parameters(schema, mode, cfg.seed)
    start = mean_loss(schema, log, params, cfg)
    res = train(schema, log, cfg, params=params)
    print(f"{mode:13s} loss {start:.3f} -> {res.trajectory[-1]:.4f}  ({res.params.count()} parameters)")

# %%
# Hold out a fifth of the labels: they are scored but never fed in.
holdout = select_holdout(log, 0.2, seed=0)
res = train(schema, log, TrainConfig(epochs=20, lr=0.01), holdout=holdout)
m = evaluate(schema, log, res.checkpoint, holdout)
print("holdout", m["n"], "points, accuracy", round(m["by_type"]["node"]["accuracy"], 3),
      "auc", round(m["by_type"]["node"]["auc"], 3))

# %%
# Where an estimate comes from: the norm of each latent block.
out = infer(schema, log, res.checkpoint, node(3), 30)
print("beta", [round(b, 3) for b in out["beta"]], "attribution", out["attribution"])
