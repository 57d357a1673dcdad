import numpy as np
import pytest

from hyperlearn.ontology import schema_from_dict


FIG_SCHEMA = {
    "entity_types": [
        {"id": "human", "intrinsic_dim": 3, "belief_dim": 2, "latent_intrinsic_dim": 4},
        {"id": "animal", "intrinsic_dim": 2, "belief_dim": 2, "latent_intrinsic_dim": 4},
        {"id": "object", "intrinsic_dim": 1, "belief_dim": 2, "latent_intrinsic_dim": 4},
        {"id": "venue", "intrinsic_dim": 1, "belief_dim": 2, "latent_intrinsic_dim": 4},
    ],
    "interaction_types": [
        {"id": "visit", "tau_dim": 1,
         "roles": [{"role_id": "human", "entity_type": "human", "takeaway_dim": 3},
                   {"role_id": "venue", "entity_type": "venue", "takeaway_dim": 3}],
         "latent_extrinsic_dims": {"human": 5, "venue": 5}},
        {"id": "handshake", "tau_dim": 1,
         "roles": [{"role_id": "a", "entity_type": "human", "takeaway_dim": 3},
                   {"role_id": "b", "entity_type": "human", "takeaway_dim": 3}],
         "latent_extrinsic_dims": {"human": 6}},
        {"id": "touch", "tau_dim": 1,
         "roles": [{"role_id": "human", "entity_type": "human", "takeaway_dim": 3},
                   {"role_id": "object", "entity_type": "object", "takeaway_dim": 3}],
         "latent_extrinsic_dims": {"human": 7, "object": 5}},
    ],
}


@pytest.fixture
def fig_schema():
    return schema_from_dict(FIG_SCHEMA)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.report_lines():
        terminalreporter.write_line(line)
