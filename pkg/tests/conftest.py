import numpy as np
import pytest

from artifact.model import build_desk_model
from artifact.oracle import Oracle1DModel, hjb_discounted, hjb_ergodic


@pytest.fixture(scope="session")
def desk():
    return build_desk_model()


@pytest.fixture(scope="session")
def desk_oracle(desk):
    return Oracle1DModel.from_model(desk)


@pytest.fixture(scope="session")
def desk_discounted_025(desk_oracle):
    return hjb_discounted(desk_oracle, 0.25)


@pytest.fixture(scope="session")
def desk_ergodic(desk_oracle):
    return hjb_ergodic(desk_oracle)


def const_cost_model(c=1.0, **kw):
    return build_desk_model({"name": "constant", "params": [c], "M_ell": abs(c) + 1e-12, "L_ell": 0.0}, **kw)


def xonly_model(**kw):
    return build_desk_model({"name": "state_tanh2", "params": [1.0], "M_ell": 1.0, "L_ell": 0.77}, **kw)


@pytest.fixture
def rng0():
    return np.random.default_rng(0)


def doc_model(**over):
    """Desk JSON document with fields overridden (no assumption audit)."""
    from artifact.model import model_from_json
    doc = build_desk_model().to_json()
    doc.update(over)
    return model_from_json(doc)


def free_model(lam, g, drift=None):
    """F = 0 (or the given drift) with the given spectrum and noise gains."""
    return doc_model(eigenvalues=list(lam), noise_gains=list(g), drift=drift or {"name": "zero", "params": []})


DESK_X_GRID = np.linspace(-2.0, 2.0, 21)
DESK_BETAS = [0.5, 0.25, 0.125, 0.0625]
DESK_T = [5.0, 10.0, 20.0, 40.0]


@pytest.fixture(scope="session")
def desk_sweep(desk):
    from artifact.bsde import BsdeConfig
    from artifact.ergodic import vanishing_discount_sweep
    return vanishing_discount_sweep(desk, DESK_X_GRID, DESK_BETAS, BsdeConfig(h=0.05), n_paths=1000, seed=5,
                                    workers=4)


def _long_time(desk, terminal):
    from artifact.bsde import BsdeConfig
    from artifact.ergodic import long_time_sweep
    m = desk.with_terminal(*terminal) if terminal else desk
    return long_time_sweep(m, np.zeros(1), DESK_T, bsde_config=BsdeConfig(h=0.05), n_paths=1000, seed=5,
                           workers=4)


@pytest.fixture(scope="session")
def desk_long_softabs(desk):
    return _long_time(desk, ("softabs", [1.0], 1.0))


@pytest.fixture(scope="session")
def desk_long_zero(desk):
    return _long_time(desk, None)
