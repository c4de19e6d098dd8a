import numpy as np
import pytest
from hypothesis import given, strategies as st

from netspill.effects import (DEFAULT_GRID, EffectCurve, ade, ase, average_potential_outcome,
                              effect_curves, first_stage_marginal_effects)
from netspill.equilibrium import GameParams, PublicState, base_index, solve_equilibrium
from netspill.errors import ValidationError
from netspill.network import Network
from netspill.secondstage import OutcomeParams

# reference arm-mean lines, intercept-only mu_X
ARM1 = OutcomeParams([0.497], [0.0], [-0.347], [0.0])
ARM0 = OutcomeParams([0.128], [0.0], [-0.021], [0.0])
MU = [1.0]


def test_reference_potential_outcome_line():
    assert average_potential_outcome(ARM1, MU, 0.0) == pytest.approx(0.497, abs=1e-15)
    mid = average_potential_outcome(ARM1, MU, 0.5)
    ends = average_potential_outcome(ARM1, MU, np.array([0.0, 1.0]))
    assert abs(mid - ends.mean()) <= 1e-12


def test_reference_direct_effect():
    assert ade(ARM1, ARM0, MU, 0.0) == pytest.approx(0.369, abs=1e-12)
    assert ade(ARM1, ARM0, MU, 1.0) == pytest.approx(0.043, abs=1e-12)
    assert ade(ARM1, ARM1, MU, 0.3) == 0.0


def test_reference_spillover_effect():
    assert ase(ARM1, MU, 0.4, 0.5, d=1) == pytest.approx(-0.0347, abs=1e-12)
    assert ase(ARM1, MU, 0.4, 0.4) == 0.0


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_spillover_telescopes_and_flips(a, b, c):
    assert ase(ARM0, MU, a, b) + ase(ARM0, MU, b, c) == pytest.approx(ase(ARM0, MU, a, c), abs=1e-14)
    assert ase(ARM1, MU, a, b) == pytest.approx(-ase(ARM1, MU, b, a), abs=1e-15)


@given(st.floats(0, 1))
def test_direct_effect_is_apo_difference(p):
    d = average_potential_outcome(ARM1, MU, p) - average_potential_outcome(ARM0, MU, p)
    assert ade(ARM1, ARM0, MU, p) == pytest.approx(d, abs=1e-14)


def test_pi_range_checked():
    with pytest.raises(ValidationError):
        ade(ARM1, ARM0, MU, 1.2)
    with pytest.raises(ValidationError):
        average_potential_outcome(ARM1, [1.0, 2.0], 0.5)


def test_curves_and_delta_method(covariate_fit):
    S, _, _, ss = covariate_fit
    curves = effect_curves(ss, X=S.X)
    mu = S.X.mean(axis=0)
    assert np.array_equal(curves["ADE"].pi_grid, DEFAULT_GRID)
    assert np.allclose(curves["ADE"].values, curves["APO1"].values - curves["APO0"].values)
    assert np.allclose(curves["ADE"].values, ade(ss.gamma1, ss.gamma0, mu, DEFAULT_GRID))
    for c in curves.values():
        assert np.all(c.se >= 0)
    # at pi = 0 the APO1 variance is mu' V_alpha1 mu
    k = ss.k
    v = mu @ ss.vcov1[:k, :k] @ mu
    assert curves["APO1"].se[0] == pytest.approx(np.sqrt(v), rel=1e-12)
    # ASE at the reference point has no variance; elsewhere |d| * se(mu'beta)
    assert curves["ASE1"].se[0] == 0.0
    kb = slice(k + 1, 2 * k + 1)
    sb = np.sqrt(mu @ ss.vcov1[kb, kb] @ mu)
    assert curves["ASE1"].se[50] == pytest.approx(0.5 * sb, rel=1e-10)


def test_delta_method_numeric_gradient(covariate_fit):
    """ADE(0.7) standard error via a numerical gradient through the stacked vcov."""
    S, _, _, ss = covariate_fit
    mu = S.X.mean(axis=0)
    g = np.concatenate([ss.gamma1.as_vector(), ss.gamma0.as_vector()])
    p = g.size // 2

    def f(vec):
        a = OutcomeParams.from_vector(vec[:p], ss.k)
        b = OutcomeParams.from_vector(vec[p:], ss.k)
        return ade(a, b, mu, 0.7)

    grad = np.array([(f(g + h) - f(g - h)) / 2e-6 for h in np.eye(g.size) * 1e-6])
    se = np.sqrt(grad @ ss.stacked_vcov() @ grad)
    assert effect_curves(ss, X=S.X, grid=[0.7])["ADE"].se[0] == pytest.approx(se, rel=1e-6)


def test_effect_curve_validation():
    with pytest.raises(ValidationError):
        EffectCurve("ADE", [0.2, 0.1], [1.0, 2.0])
    with pytest.raises(ValidationError):
        EffectCurve("XYZ", [0.1], [1.0])
    with pytest.raises(ValidationError):
        EffectCurve("ADE", [0.1, 0.2], [1.0])


def test_marginal_effects_trivial_cases():
    net = Network.from_edges(2, [(0, 1)])
    S = PublicState(net, np.ones((2, 1)), np.zeros(2))
    assert np.all(first_stage_marginal_effects(S, GameParams([0.0], 0.0, 0.0)) == 0)
    me = first_stage_marginal_effects(S, GameParams([0.0], 0.0, 0.0))
    assert me.shape == (3,)
    one = PublicState(net, np.zeros((2, 1)), np.zeros(2))
    me = first_stage_marginal_effects(one, GameParams([0.0], 0.7, 0.0))
    assert me[1] == pytest.approx(0.7 / np.sqrt(2 * np.pi), abs=1e-15)


def test_marginal_effects_numeric_oracle(covariate_fit):
    S, _, fs, _ = covariate_fit
    th = fs.theta_hat
    eq = solve_equilibrium(S, th)
    me = first_stage_marginal_effects(S, th, eq)
    h = 1e-6
    from scipy.stats import norm
    idx = base_index(S, th) + th.theta3 * eq.pi
    # shift each regressor by h with pi held at its equilibrium value
    coef = th.as_vector()
    for j in range(coef.size):
        up = norm.cdf(idx + coef[j] * h).mean()
        dn = norm.cdf(idx - coef[j] * h).mean()
        assert me[j] == pytest.approx((up - dn) / (2 * h), abs=1e-6)
