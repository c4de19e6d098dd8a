import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq
from scipy.stats import norm

from netspill.equilibrium import (GameParams, best_response, PublicState, fixed_point_defect, grad_sigma,
                                  grad_sigma_implicit, solve_equilibrium, uniqueness_margin)
from netspill.errors import ConvergenceError, UniquenessError, ValidationError
from netspill.network import Network

from conftest import random_state, random_theta


def mp_fixed_point(S, theta):
    """High-precision root of sigma = Phi(a + theta3 M sigma) via mpmath."""
    mp.mp.dps = 40
    M = S.net.averaging.toarray()
    a = S.X @ theta.theta1 + theta.theta2 * S.Z
    n = S.n

    def F(*s):
        return [s[i] - mp.ncdf(a[i] + theta.theta3 * sum(M[i, j] * s[j] for j in range(n)))
                for i in range(n)]

    root = mp.findroot(F, [0.5] * n)
    return np.array([float(root[i]) for i in range(n)]) if n > 1 else np.array([float(root)])


def test_pair_matches_bisection():
    # two linked agents share one score each: solve the scalar map for agent 0 by bisection
    net = Network.from_edges(2, [(0, 1)])
    S = PublicState(net, np.ones((2, 1)), np.array([1.0, 0.0]))
    th = GameParams([-0.3], 0.8, 2.0)
    a = np.array([-0.3 + 0.8, -0.3])

    def g(s0):
        s1 = norm.cdf(a[1] + 2.0 * s0)
        return s0 - norm.cdf(a[0] + 2.0 * s1)

    s0 = brentq(g, 0.0, 1.0, xtol=1e-15)
    eq = solve_equilibrium(S, th)
    assert abs(eq.sigma[0] - s0) < 1e-12
    assert abs(eq.sigma[1] - norm.cdf(a[1] + 2.0 * s0)) < 1e-12


def test_small_instances_match_high_precision_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(2, 5))
        S = random_state(n, 2, rng)
        th = random_theta(2, rng, lam_max=0.99)
        eq = solve_equilibrium(S, th)
        assert np.max(np.abs(eq.sigma - mp_fixed_point(S, th))) <= 1e-8


def test_zero_spillover_is_probit(rng):
    S = random_state(5, 2, rng)
    th = GameParams([0.2, -0.4], 0.7, 0.0)
    eq = solve_equilibrium(S, th)
    assert np.allclose(eq.sigma, norm.cdf(S.X @ th.theta1 + 0.7 * S.Z), atol=1e-15)


def float_fixed_point(S, th, sigma):
    """Iterate until the map stops changing ``sigma`` in floating point."""
    for _ in range(100_000):
        new = best_response(S, th, sigma)
        if np.max(np.abs(new - sigma)) <= 4e-16:
            return new
        sigma = new
    raise AssertionError("no floating-point fixed point")


def test_contraction_along_path(rng):
    for _ in range(20):
        S = random_state(int(rng.integers(2, 9)), 2, rng)
        th = random_theta(2, rng, lam_max=0.98)
        eq = solve_equilibrium(S, th, record=True)
        lam = uniqueness_margin(th)[0]
        star = mp_fixed_point(S, th) if S.n <= 4 else float_fixed_point(S, th, eq.sigma)
        err = np.max(np.abs(eq.path - star), axis=1)
        assert np.all(err[1:] <= lam * err[:-1] + 1e-15)


def test_uniqueness_error_and_override(rng):
    S = random_state(4, 1, rng)
    th = GameParams([0.0], 0.0, 3.0)
    with pytest.raises(UniquenessError, match="lambda"):
        solve_equilibrium(S, th)
    eq = solve_equilibrium(S, th, allow_nonunique=True)
    assert not eq.unique_regime
    assert fixed_point_defect(S, th, eq.sigma) <= 1e-11


def test_convergence_error_carries_residual(rng):
    S = random_state(4, 1, rng)
    with pytest.raises(ConvergenceError) as info:
        solve_equilibrium(S, GameParams([0.1], 0.5, 2.0), max_iter=2)
    assert info.value.residual > 0


def test_bad_tolerance(rng):
    S = random_state(3, 1, rng)
    with pytest.raises(ValidationError):
        solve_equilibrium(S, GameParams([0.0], 0.0, 0.5), tol=0.0)


@given(st.integers(0, 10_000))
def test_equilibrium_invariants(seed):
    rng = np.random.default_rng(seed)
    S = random_state(int(rng.integers(2, 12)), 2, rng, p=0.3)
    th = random_theta(2, rng)
    eq = solve_equilibrium(S, th)
    assert np.all((eq.sigma > 0) & (eq.sigma < 1))
    assert np.all((eq.pi >= 0) & (eq.pi <= 1))
    assert fixed_point_defect(S, th, eq.sigma) <= 1e-11
    assert np.allclose(eq.pi, S.net.averaging @ eq.sigma)


@given(st.integers(0, 10_000))
def test_relabeling_equivariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 10))
    S = random_state(n, 2, rng, p=0.4)
    th = random_theta(2, rng)
    perm = rng.permutation(n)
    a = solve_equilibrium(S, th).sigma
    b = solve_equilibrium(S.permute(perm), th).sigma
    assert np.allclose(b, a[perm], atol=1e-11)


@given(st.integers(0, 10_000))
def test_comparative_statics_in_own_shifter(seed):
    # raising theta2 raises every treated agent's probability when theta3 >= 0
    rng = np.random.default_rng(seed)
    S = random_state(6, 1, rng)
    th = GameParams([0.1], 0.3, abs(rng.uniform(0, 2.0)))
    lo = solve_equilibrium(S, th).sigma
    hi = solve_equilibrium(S, GameParams(th.theta1, 0.8, th.theta3)).sigma
    assert np.all(hi >= lo - 1e-14)


def test_grad_sigma_zero_spillover_closed_form(rng):
    S = random_state(6, 2, rng)
    th = GameParams([0.1, -0.2], 0.4, 0.0)
    G = grad_sigma(S, th)
    idx = S.X @ th.theta1 + 0.4 * S.Z
    assert np.allclose(G[:, 2], norm.pdf(idx) * S.Z, atol=1e-5)
    assert np.allclose(G[:, 0], norm.pdf(idx) * S.X[:, 0], atol=1e-5)


def test_grad_sigma_matches_central_and_implicit(rng):
    for _ in range(10):
        S = random_state(8, 2, rng, p=0.4)
        th = random_theta(2, rng, lam_max=0.8)
        G = grad_sigma(S, th)
        h = 1e-4
        vec = th.as_vector()
        C = np.empty_like(G)
        for k in range(vec.size):
            up, dn = vec.copy(), vec.copy()
            up[k] += h
            dn[k] -= h
            C[:, k] = (solve_equilibrium(S, GameParams.from_vector(up)).sigma
                       - solve_equilibrium(S, GameParams.from_vector(dn)).sigma) / (2 * h)
        assert np.max(np.abs(G - C)) <= 1e-3 * np.max(np.abs(C))
        assert np.allclose(grad_sigma_implicit(S, th), C, atol=1e-7)


def test_grad_sigma_bound(rng):
    # each column is bounded by sup|direct term| / (1 - lambda)
    for _ in range(10):
        S = random_state(7, 2, rng)
        th = random_theta(2, rng, lam_max=0.9)
        G = grad_sigma(S, th)
        lam = uniqueness_margin(th)[0]
        R = np.column_stack([S.X, S.Z, np.ones(S.n)])
        bound = np.max(np.abs(R), axis=0) / np.sqrt(2 * np.pi) / (1 - lam)
        assert np.all(np.max(np.abs(G), axis=0) <= bound * (1 + 1e-3))


def test_public_state_validation(rng):
    net = Network.from_edges(3, [(0, 1), (1, 2)])
    with pytest.raises(ValidationError, match="row counts"):
        PublicState(net, np.ones((2, 1)), np.zeros(3))
    with pytest.raises(ValidationError, match="binary"):
        PublicState(net, np.ones((3, 1)), np.array([0, 0.5, 1]))
    S = PublicState(net, np.ones((3, 1)), np.zeros(3))
    with pytest.raises(ValidationError):
        solve_equilibrium(S, GameParams([0.0, 1.0], 0.0, 0.0))
