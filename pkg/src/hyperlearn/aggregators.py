"""The four learnable mapping families, shared per type.

* intrinsic time-aggregator, one per entity type ``j``
* extrinsic time-aggregator, one per ``(j, i)`` pair
* space-aggregator, one per interaction type ``i`` with a head per role
* readout, one per entity type ``j``

Every function accepts either single vectors or row batches; the trainer
batches all instances of a type that are processed in the same step.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Node, ParameterStore, ShapeError
from .ontology import InteractionTypeSpec, OntologySchema
from .state import History

MODES = ("markovian", "full_history")


# ------------------------------------------------------------ construction

def _add_time_params(store: ParameterStore, family: str, key: tuple, in_dim: int, d: int, mode: str):
    if mode == "markovian":
        for gate in ("z", "r", "h"):
            store.add(family, key, f"W_{gate}", (d, in_dim + d), fan_in=in_dim + d)
            store.add(family, key, f"b_{gate}", (d,), fan_in=in_dim + d)
    elif mode == "full_history":
        store.add(family, key, "W_enc", (d, in_dim), fan_in=in_dim)
        store.add(family, key, "b_enc", (d,), fan_in=in_dim)
        store.add(family, key, "w_att", (d,), fan_in=d)
        # softplus(0) = ln 2
        store.add(family, key, "lam_raw", (1,), init=0.0)
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")


def space_input_dim(schema: OntologySchema, it: InteractionTypeSpec) -> int:
    return sum(schema.layout(r.entity_type).total for r in it.roles) + it.tau_dim


def build_parameters(schema: OntologySchema, mode: str = "markovian", seed: int = 0,
                     readout_hidden: int = 16, space_hidden: int | None = None) -> ParameterStore:
    """Allocate one parameter set per type, in a fixed order so a seed fully
    determines the initial values."""
    store = ParameterStore(seed)
    for e in schema.entity_types:
        lay = schema.layout(e.id)
        store.add("readout", (e.id,), "W1", (readout_hidden, lay.latent_total), fan_in=lay.latent_total)
        store.add("readout", (e.id,), "b1", (readout_hidden,), fan_in=lay.latent_total)
        store.add("readout", (e.id,), "W2", (e.belief_dim, readout_hidden), fan_in=readout_hidden)
        store.add("readout", (e.id,), "b2", (e.belief_dim,), fan_in=readout_hidden)
        _add_time_params(store, "intrinsic", (e.id,), e.intrinsic_dim, e.latent_intrinsic_dim, mode)
    for it in schema.interaction_types:
        for j in sorted(it.latent_extrinsic_dims):
            _add_time_params(store, "extrinsic", (j, it.id), it.takeaway_dim_for(j),
                             it.latent_extrinsic_dims[j], mode)
        in_dim = space_input_dim(schema, it)
        hidden = space_hidden or 2 * max(r.takeaway_dim for r in it.roles)
        store.add("space", (it.id,), "W_enc", (hidden, in_dim), fan_in=in_dim)
        store.add("space", (it.id,), "b_enc", (hidden,), fan_in=in_dim)
        for r in it.roles:
            store.add("space", (it.id,), f"W_{r.role_id}", (r.takeaway_dim, hidden), fan_in=hidden)
            store.add("space", (it.id,), f"b_{r.role_id}", (r.takeaway_dim,), fan_in=hidden)
    return store


# --------------------------------------------------------- time-aggregation

def attention_weights(scores: np.ndarray, ages: np.ndarray, lam: float) -> np.ndarray:
    s = scores - lam * ages
    e = np.exp(s - s.max())
    return e / e.sum()


def time_aggregate_full(history: History | Sequence, t: int, params: dict[str, Node],
                        latent_dim: int | None = None, window: int | None = None,
                        return_weights: bool = False):
    """Decay-attention pooling over a timestamped history.

    Each record is encoded ``e_n = tanh(W v_n + b)`` and scored
    ``w·e_n - lam * (t - t_n)``; the output is the softmax-weighted sum of the
    encodings. An empty history gives the zero vector.
    """
    records = list(history)
    if window is None and isinstance(history, History):
        window = history.window
    W = params["W_enc"]
    d = latent_dim or W.shape[0]
    if not records:
        out = dc.constant(np.zeros(d))
        return (out, np.zeros(0)) if return_weights else out
    ages = np.array([t - r.timestamp for r in records], dtype=float)
    if window is not None and (ages.max() > window or ages.min() < 0):
        raise AssertionError(f"history record outside window [t-{window}, t] at t={t}: ages {ages}")
    sources = [(r.source if r.source is not None else (dc.constant(r.value), None)) for r in records]
    if any(isinstance(s, tuple) and s[0].requires_grad for s in sources):
        V = dc.take_rows(sources)
    else:
        V = dc.constant(np.stack([r.value for r in records]))
    E = dc.tanh(dc.affine(W, V, params["b_enc"]))
    lam = dc.softplus(params["lam_raw"])
    scores = dc.sub(dc.matmul(E, params["w_att"]), dc.hadamard(lam, ages))
    alpha = dc.softmax(scores)
    out = dc.matmul(alpha, E)
    return (out, alpha.value) if return_weights else out


def time_aggregate_markov(update, prev, params: dict[str, Node]) -> Node:
    """One gated-recurrent step: blend ``prev`` with a candidate built from
    ``update`` by the update gate ``z`` (z=0 keeps prev, z=1 overwrites)."""
    update, prev = dc.as_node(update), dc.as_node(prev)
    d = params["b_z"].shape[0]
    if prev.shape[-1] != d or params["W_z"].shape[1] != update.shape[-1] + d:
        raise ShapeError("time_aggregate_markov",
                         f"update dim {params['W_z'].shape[1] - d}, latent dim {d}",
                         (update.shape, prev.shape))
    x = dc.concat(update, prev)
    z = dc.sigmoid(dc.affine(params["W_z"], x, params["b_z"]))
    r = dc.sigmoid(dc.affine(params["W_r"], x, params["b_r"]))
    h = dc.tanh(dc.affine(params["W_h"], dc.concat(update, dc.hadamard(r, prev)), params["b_h"]))
    # (1 - z) * prev + z * h is exact at both saturation points
    keep = dc.sub(np.ones(z.shape), z)
    return dc.add(dc.hadamard(keep, prev), dc.hadamard(z, h))


# -------------------------------------------------------- space-aggregation

def belief_masks(schema: OntologySchema, it: InteractionTypeSpec) -> dict[str, np.ndarray]:
    """Per output role, a 0/1 column mask hiding that role's own belief block."""
    total = space_input_dim(schema, it)
    masks = {}
    offset = 0
    for r in it.roles:
        lay = schema.layout(r.entity_type)
        m = np.ones(total)
        m[offset:offset + lay.belief_dim] = 0.0
        masks[r.role_id] = m
        offset += lay.total
    return masks


def space_aggregate(schema: OntologySchema, it: InteractionTypeSpec, snapshots: Sequence, tau,
                    params: dict[str, Node], mask_self_belief: bool = True) -> dict[str, Node]:
    """Personalised takeaway per role from the participants' previous-step
    data vectors and the environment vector ``tau``.

    ``snapshots`` holds one data vector (or row batch) per role in schema
    order. For role ``r`` the belief block of ``r``'s own snapshot is zeroed
    so an entity's target never reaches its own features.
    """
    if len(snapshots) != len(it.roles):
        raise ShapeError("space_aggregate", f"{len(it.roles)} snapshots", len(snapshots))
    snaps = [dc.as_node(s) for s in snapshots]
    for r, s in zip(it.roles, snaps):
        want = schema.layout(r.entity_type).total
        if s.shape[-1] != want:
            raise ShapeError("space_aggregate", f"role {r.role_id!r} snapshot dim {want}", s.shape)
    tau = dc.as_node(tau)
    if tau.shape[-1] != it.tau_dim:
        raise ShapeError("space_aggregate", f"tau dim {it.tau_dim}", tau.shape)
    parts = snaps + ([tau] if it.tau_dim else [])
    x = dc.concat(*parts)
    W, b = params["W_enc"], params["b_enc"]
    out = {}
    if mask_self_belief:
        masks = belief_masks(schema, it)
        for r in it.roles:
            hidden = dc.tanh(dc.affine(W, dc.hadamard(x, masks[r.role_id]), b))
            out[r.role_id] = dc.tanh(dc.affine(params[f"W_{r.role_id}"], hidden, params[f"b_{r.role_id}"]))
    else:
        hidden = dc.tanh(dc.affine(W, x, b))
        for r in it.roles:
            out[r.role_id] = dc.tanh(dc.affine(params[f"W_{r.role_id}"], hidden, params[f"b_{r.role_id}"]))
    return out


# ----------------------------------------------------------- readout, loss

def readout_logits(f_hat, chi_hats: Sequence, params: dict[str, Node]) -> Node:
    """affine -> tanh -> affine over ``f_hat ⊕ chi_hats``; the entity's own
    belief is deliberately not an input."""
    x = dc.concat(dc.as_node(f_hat), *[dc.as_node(c) for c in chi_hats])
    if x.shape[-1] != params["W1"].shape[1]:
        raise ShapeError("readout", f"input dim {params['W1'].shape[1]}", x.shape)
    h = dc.tanh(dc.affine(params["W1"], x, params["b1"]))
    return dc.affine(params["W2"], h, params["b2"])


def readout(f_hat, chi_hats: Sequence, params: dict[str, Node], task: str) -> Node:
    logits = readout_logits(f_hat, chi_hats, params)
    return dc.softmax(logits) if task == "classification" else logits


def _check_simplex(target: np.ndarray):
    if np.any(target < -1e-9) or not np.allclose(target.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError(f"classification target off the probability simplex: {target}")


def loss_from_output(target, output: Node, task: str) -> Node:
    """Summed loss over rows given readout logits (classification) or values."""
    target = np.asarray(target, dtype=float)
    if target.shape != output.shape:
        raise ShapeError("loss", output.shape, target.shape)
    if task == "classification":
        _check_simplex(target)
        return dc.cross_entropy(target, output)
    return dc.squared_error(output, target)


def loss(target, estimate, task: str) -> float:
    """Distance between a belief vector and an estimate (probabilities for
    classification, values for regression)."""
    target = np.asarray(target, dtype=float)
    estimate = np.asarray(dc.as_node(estimate).value, dtype=float)
    if target.shape != estimate.shape:
        raise ShapeError("loss", estimate.shape, target.shape)
    if task == "classification":
        _check_simplex(target)
        with np.errstate(divide="ignore"):
            logs = np.where(target > 0, np.log(np.clip(estimate, 1e-300, None)), 0.0)
        return float(-(target * logs).sum())
    return float(((target - estimate) ** 2).mean())
