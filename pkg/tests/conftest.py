import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "execution"))

import settings  # noqa: E402
from condense import ConstraintSet, CostWeights  # noqa: E402
from datamat import DataRecord, HorizonSpec  # noqa: E402
from sysmodel import SystemModel  # noqa: E402

EXAMPLE1_U = [-0.6, 0.0, 0.0, 0.0, 0.5, 0.5, 1.0]
EXAMPLE1_Y = [-0.1, 0.0, 0.0, 0.0, 0.5, 1.0, 2.1]

# basis of ker(W_p) used in the worked first example: coordinates 2, 3, 4
EXAMPLE1_VP = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0],
])


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance checks (run by default)")


@pytest.fixture(autouse=True)
def restore_settings():
    """CLI runs may overwrite module-level defaults; put them back after every test."""
    names = ("TOL_RANK", "TOL_OPT", "FACET_STEP", "MAX_WORKERS", "SEED", "MAX_RETRIES")
    saved = {name: getattr(settings, name) for name in names}
    yield
    for name, value in saved.items():
        setattr(settings, name, value)


@pytest.fixture
def example1_model():
    return SystemModel(A=1.2, B=1.0, C=1.0, D=1.0)


@pytest.fixture
def example1_data():
    return DataRecord(EXAMPLE1_U, EXAMPLE1_Y)


@pytest.fixture
def example1_horizons():
    return HorizonSpec(N_p=1, N_f=2, n=1)


@pytest.fixture
def example1_weights():
    return CostWeights(Q=0.5, R=0.5)


@pytest.fixture
def example1_constraints():
    return ConstraintSet.box(1.0, 4.0)


@pytest.fixture
def double_integrator():
    return SystemModel(
        A=[[1.0, 1.0], [0.0, 1.0]],
        B=[[0.5], [1.0]],
        C=[[1.0, 0.0]],
        D=[[0.0]],
    )


@pytest.fixture
def double_integrator_weights():
    return CostWeights(Q=1.0, R=0.01)


@pytest.fixture
def double_integrator_constraints():
    return ConstraintSet.box(1.0, 25.0)


@pytest.fixture
def example1_vp():
    return EXAMPLE1_VP.copy()
