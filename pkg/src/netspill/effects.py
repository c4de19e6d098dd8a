"""Causal estimands built from fitted parameters.

Potential outcomes are affine in the neighborhood score once covariates are
averaged out: ``E[Y(d, pi)] = mu_X'alpha_d + (mu_X'beta_d) pi``.  Direct and
spillover effects are differences of these lines; curve standard errors come
from the delta method on the joint second-stage covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._normal import norm_pdf
from .equilibrium import Equilibrium, GameParams, PublicState, base_index, solve_equilibrium
from .errors import ValidationError
from .secondstage import OutcomeParams, SecondStageFit

DEFAULT_GRID = np.round(np.arange(101) * 0.01, 2)
ESTIMANDS = ("ADE", "ASE", "APO1", "APO0")


def _check_pi(pi):
    p = np.asarray(pi, dtype=float)
    if np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p)):
        raise ValidationError("neighborhood score must lie in [0, 1]")
    return p


def _mu(gamma: OutcomeParams, mu_X):
    mu = np.atleast_1d(np.asarray(mu_X, dtype=float))
    if mu.shape != gamma.alpha.shape:
        raise ValidationError("mu_X length does not match the covariate count")
    return mu


def average_potential_outcome(gamma_d: OutcomeParams, mu_X, pi):
    """``mu_X'alpha_d + (mu_X'beta_d) pi``; ``pi`` may be an array."""
    mu = _mu(gamma_d, mu_X)
    p = _check_pi(pi)
    out = mu @ gamma_d.alpha + (mu @ gamma_d.beta) * p
    return float(out) if out.ndim == 0 else out


def ade(gamma1: OutcomeParams, gamma0: OutcomeParams, mu_X, pi):
    """Average direct effect of own take-up at neighborhood score ``pi``."""
    mu = _mu(gamma1, mu_X)
    _mu(gamma0, mu)
    p = _check_pi(pi)
    out = mu @ (gamma1.alpha - gamma0.alpha) + (mu @ (gamma1.beta - gamma0.beta)) * p
    return float(out) if out.ndim == 0 else out


def ase(gamma_d: OutcomeParams, mu_X, pi, pi_tilde, d: int | None = None):
    """Average spillover effect of moving the score from ``pi`` to ``pi_tilde``.

    ``d`` only labels the arm that ``gamma_d`` belongs to.
    """
    if d is not None and d not in (0, 1):
        raise ValidationError("arm must be 0 or 1")
    mu = _mu(gamma_d, mu_X)
    diff = _check_pi(pi_tilde) - _check_pi(pi)
    out = diff * (mu @ gamma_d.beta)
    return float(out) if np.ndim(out) == 0 else out


def first_stage_marginal_effects(S: PublicState, theta_hat: GameParams,
                                 eq: Equilibrium | None = None) -> np.ndarray:
    """Sample-average effect of each first-stage regressor on take-up.

    ``(1/n) sum_i phi(X_i'theta1 + theta2 Z_i + theta3 pi_i) * theta_k`` with the
    equilibrium score held fixed.  Ordered as ``(theta1..., theta2, theta3)``.
    """
    if eq is None:
        eq = solve_equilibrium(S, theta_hat)
    idx = base_index(S, theta_hat) + theta_hat.theta3 * eq.pi
    return float(np.mean(norm_pdf(idx))) * theta_hat.as_vector()


@dataclass(frozen=True, eq=False)
class EffectCurve:
    """An estimand evaluated along a grid of neighborhood scores."""

    estimand: str
    pi_grid: np.ndarray
    values: np.ndarray
    se: np.ndarray | None = field(default=None, repr=False)
    arm: int | None = None
    pi_base: float | None = None

    def __post_init__(self):
        if self.estimand not in ESTIMANDS:
            raise ValidationError(f"unknown estimand {self.estimand!r}")
        g = _check_pi(self.pi_grid)
        if g.ndim != 1 or np.any(np.diff(g) <= 0):
            raise ValidationError("grid must be strictly increasing")
        v = np.asarray(self.values, dtype=float)
        if v.shape != g.shape:
            raise ValidationError("values and grid lengths differ")
        object.__setattr__(self, "pi_grid", g)
        object.__setattr__(self, "values", v)
        if self.se is not None:
            s = np.asarray(self.se, dtype=float)
            if s.shape != g.shape:
                raise ValidationError("se and grid lengths differ")
            object.__setattr__(self, "se", s)


def _gradient_rows(fit: SecondStageFit, mu, grid, w1a, w1b, w0a, w0b):
    """Rows of the linear map from stacked (gamma1, gamma0) to curve values."""
    k = fit.k
    c = fit.cf_order
    p = fit.vcov1.shape[0]
    G = np.zeros((grid.size, 2 * p))
    G[:, 0:k] = w1a * mu
    G[:, p:p + k] = w0a * mu
    if fit.spillover:
        G[:, k + c:2 * k + c] = np.outer(w1b(grid), mu)
        G[:, p + k + c:p + 2 * k + c] = np.outer(w0b(grid), mu)
    return G


def _delta_se(G, V):
    var = np.einsum("gi,ij,gj->g", G, V, G)
    return np.sqrt(np.clip(var, 0.0, None))


def effect_curves(fit: SecondStageFit, mu_X=None, grid=None, pi_base: float = 0.0,
                  X=None) -> dict:
    """APO, ADE and ASE curves with delta-method standard errors.

    Parameters
    ----------
    fit : SecondStageFit
    mu_X : array_like, optional
        Covariate mean; defaults to the column means of ``X`` (or of the
        fitted regressors' covariate block when ``X`` is not given).
    grid : array_like, optional
        Neighborhood-score grid; defaults to 0, 0.01, ..., 1.
    pi_base : float
        Reference score for the spillover curves, which report the effect of
        moving from ``pi_base`` to each grid value.

    Returns
    -------
    dict
        Keys ``APO1, APO0, ADE, ASE1, ASE0`` mapping to :class:`EffectCurve`.
    """
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    grid = _check_pi(grid)
    pi_base = float(_check_pi(pi_base))
    if mu_X is None:
        src = X if X is not None else fit.W[:, :fit.k]
        mu_X = np.asarray(src, dtype=float).mean(axis=0)
    g1, g0 = fit.gamma1, fit.gamma0
    mu = _mu(g1, mu_X)
    V = fit.stacked_vcov()
    one = np.ones_like(grid)
    zero = np.zeros_like(grid)

    def lin(a):
        return lambda g: a * g

    specs = {
        "APO1": (average_potential_outcome(g1, mu, grid), one, lin(1.0), zero, lin(0.0), 1),
        "APO0": (average_potential_outcome(g0, mu, grid), zero, lin(0.0), one, lin(1.0), 0),
        "ADE": (ade(g1, g0, mu, grid), one, lin(1.0), -one, lin(-1.0), None),
        "ASE1": (ase(g1, mu, pi_base, grid, 1), zero, lambda g: g - pi_base, zero, lin(0.0), 1),
        "ASE0": (ase(g0, mu, pi_base, grid, 0), zero, lin(0.0), zero, lambda g: g - pi_base, 0),
    }
    out = {}
    for key, (vals, w1a, w1b, w0a, w0b, arm) in specs.items():
        G = _gradient_rows(fit, mu, grid, w1a[:, None], w1b, w0a[:, None], w0b)
        out[key] = EffectCurve(key[:3] if key.startswith("ASE") else key, grid,
                               np.broadcast_to(vals, grid.shape).astype(float),
                               _delta_se(G, V), arm,
                               pi_base if key.startswith("ASE") else None)
    return out
