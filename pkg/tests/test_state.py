import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperlearn.ontology import parse_schema
from hyperlearn.state import (EntityRef, EntityStore, History, StateError, carry_forward, init_entity,
                              record_intrinsic, record_takeaway, set_belief, snapshot_data_vector)


def test_init_entity(fig_schema):
    h = init_entity(fig_schema, EntityRef("human", 0))
    np.testing.assert_array_equal(h.f_hat, np.zeros(4))
    np.testing.assert_array_equal(h.belief, [0.5, 0.5])
    assert h.belief_ts == -1 and not h.observed
    assert set(h.chi_hat) == {"handshake", "touch", "visit"}
    assert len(h.intrinsic_history) == 0
    assert init_entity(fig_schema, EntityRef("animal", 0)).chi_hat == {}


def test_regression_prior_is_zero():
    s = parse_schema('{"entity_types": [{"id": "r", "intrinsic_dim": 1, "belief_dim": 3, '
                     '"task": "regression"}]}')
    np.testing.assert_array_equal(init_entity(s, EntityRef("r", 0)).belief, np.zeros(3))


def test_unknown_type():
    s = parse_schema('{"entity_types": [{"id": "r", "intrinsic_dim": 1, "belief_dim": 2}]}')
    with pytest.raises(StateError):
        init_entity(s, EntityRef("nope", 0))


def test_window_eviction():
    h = History(window=3)
    for t in (1, 2, 4):
        h.append(np.zeros(1), t)
    h.append(np.zeros(1), 5)
    assert h.timestamps == [2, 4, 5]


def test_append_to_empty():
    h = History(3)
    h.append([1.0], 0)
    assert len(h) == 1


def test_time_regression():
    h = History(3)
    h.append([1.0], 4)
    with pytest.raises(StateError, match="regression"):
        h.append([1.0], 3)
    with pytest.raises(StateError):
        History(3).append([1.0], -1)


def test_takeaways(fig_schema):
    h = init_entity(fig_schema, EntityRef("human", 0), lookback=3)
    record_takeaway(h, "visit", [1.0, 0, 0], 2)
    record_takeaway(h, "visit", [0, 2.0, 0], 2)
    hist = h.extrinsic_history["visit"]
    assert hist.timestamps == [2, 2]
    assert [r.value[1] for r in hist] == [0.0, 2.0]
    with pytest.raises(StateError):
        record_takeaway(init_entity(fig_schema, EntityRef("animal", 0)), "visit", [0, 0, 0], 0)


def test_intrinsic_dim_checked(fig_schema):
    h = init_entity(fig_schema, EntityRef("human", 0))
    with pytest.raises(StateError):
        record_intrinsic(h, [1.0], 0, intrinsic_dim=3)


def test_carry_forward_keeps_timestamp(fig_schema):
    h = init_entity(fig_schema, EntityRef("human", 0))
    set_belief(h, [0.0, 1.0], 2)
    carry_forward(h, 3)
    carry_forward(h, 4)
    assert h.belief_ts == 2
    np.testing.assert_array_equal(h.belief, [0.0, 1.0])
    assert h.observed_mask == {2: True, 3: False, 4: False}
    set_belief(h, [1.0, 0.0], 5)
    assert h.observed_mask[5] and h.belief_ts == 5


def test_no_events_keeps_init(fig_schema):
    h = init_entity(fig_schema, EntityRef("venue", 1))
    before = snapshot_data_vector(h)
    for t in range(3):
        carry_forward(h, t)
    np.testing.assert_array_equal(snapshot_data_vector(h), before)


def test_fresh_snapshot(fig_schema):
    h = init_entity(fig_schema, EntityRef("human", 0))
    snap = snapshot_data_vector(h)
    assert len(snap) == fig_schema.layout("human").total
    np.testing.assert_array_equal(snap[:2], [0.5, 0.5])
    np.testing.assert_array_equal(snap[2:], 0.0)


def test_snapshot_is_pure(fig_schema):
    h = init_entity(fig_schema, EntityRef("human", 0))
    h.f_hat = np.array([1.0, 2.0, 3.0, 4.0])
    a = snapshot_data_vector(h)
    a[:] = -1
    np.testing.assert_array_equal(snapshot_data_vector(h)[2:6], [1, 2, 3, 4])


def test_store_dump(fig_schema):
    store = EntityStore(fig_schema, lookback=4)
    store.get(EntityRef("human", 1))
    store.get(EntityRef("venue", 0))
    rows = [json.loads(line) for line in store.dump(0, include_histories=True).splitlines()]
    assert [r["type"] for r in rows] == ["human", "venue"]
    assert store.count_by_type() == {"human": 1, "venue": 1}


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_window_invariant(window, gaps):
    h = History(window)
    t = 0
    for g in gaps:
        t += g
        h.append([float(t)], t)
        assert all(t - window <= r.timestamp <= t for r in h)
        assert h.timestamps == sorted(h.timestamps)
