"""Session fixtures: one trained toy model shared across the suite."""

import pytest

from sepme import toy_diffusion as td

CONCEPTS = ["A", "B", "C", "D", "E"]
FORGOTTEN = ["A", "B", "C"]
SEED = 0


@pytest.fixture(scope="session")
def trained_model():
    """(dataset, concepts, schedule, theta, loss trace) at default scale."""
    dims = td.ModelDims()
    schedule = td.make_schedule(200)
    concepts = td.build_concepts(CONCEPTS, dims.token_count, dims.token_dim, seed=SEED)
    data = td.make_default_dataset(CONCEPTS)
    theta, trace = td.train_dm(data, concepts, schedule, dims, td.DmHyper(seed=SEED))
    return data, concepts, schedule, theta, trace
