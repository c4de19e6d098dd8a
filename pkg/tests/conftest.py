import numpy as np
import pytest
from hypothesis import settings

from netspill.equilibrium import GameParams, PublicState
from netspill.network import Network
from netspill.simulate import DgpSpec, build_state, generate_data

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def random_connected(n, rng, p=0.5):
    """Random graph on ``n`` nodes with a spanning path so no node is isolated."""
    edges = [(i, i + 1) for i in range(n - 1)]
    for i in range(n):
        for j in range(i + 2, n):
            if rng.uniform() < p:
                edges.append((i, j))
    return Network.from_edges(n, edges)


def random_state(n, k, rng, p=0.5):
    net = random_connected(n, rng, p)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, k - 1))])
    Z = (rng.uniform(size=n) < 0.5).astype(float)
    return PublicState(net, X, Z)


def random_theta(k, rng, lam_max=0.9):
    t3 = rng.uniform(-lam_max, lam_max) * np.sqrt(2 * np.pi)
    return GameParams(rng.normal(0, 0.7, k), rng.normal(0, 1.0), t3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_state():
    return build_state(DgpSpec())


@pytest.fixture(scope="session")
def covariate_spec():
    return DgpSpec(theta0=GameParams([-0.5, 0.5], 1.0, 1.5), n_covariates=1,
                   alpha1=(2.0, 0.5), beta1=(1.0, 0.2), alpha0=(4.0, 0.1), beta0=(3.0, 0.3))


@pytest.fixture(scope="session")
def covariate_fit(covariate_spec):
    from netspill.firststage import fit_first_stage
    from netspill.secondstage import estimate_second_stage
    S = build_state(covariate_spec)
    data = generate_data(S, covariate_spec, 0)
    fs = fit_first_stage(S, data.D)
    ss = estimate_second_stage(S, data.D, data.Y, fs)
    return S, data, fs, ss


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
