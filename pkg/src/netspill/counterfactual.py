"""Predicted outcomes under counterfactual assignment rules.

A rule replaces the assignment vector, the equilibrium is re-solved at the
estimated game parameters, and each unit's outcome prediction mixes the two
arms' conditional means with weights ``sigma_i`` and ``1 - sigma_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .equilibrium import GameParams, PublicState, solve_equilibrium
from .errors import ValidationError
from .firststage import fit_first_stage
from .secondstage import MILLS_CLAMP, SecondStageFit, conditional_mean, estimate_second_stage

VARIANTS = ("with-interference", "no-interference")


@dataclass(frozen=True)
class PolicyRule:
    """Assign ``Z_i = 1`` whenever ``covariate_i <= tau``."""

    covariate: str
    tau: float

    def indicator(self, S: PublicState) -> np.ndarray:
        if self.covariate not in S.x_names:
            raise ValidationError(f"unknown covariate {self.covariate!r}; have {list(S.x_names)}")
        col = S.X[:, S.x_names.index(self.covariate)]
        return (col <= self.tau).astype(float)

    @classmethod
    def parse(cls, text: str) -> "PolicyRule":
        """Parse ``name<=value``; ``inf`` and ``-inf`` are accepted."""
        if "<=" not in text:
            raise ValidationError(f"rule must look like 'name<=tau', got {text!r}")
        name, val = (p.strip() for p in text.split("<=", 1))
        try:
            tau = float(val)
        except ValueError:
            raise ValidationError(f"bad threshold in rule {text!r}") from None
        if not name:
            raise ValidationError("rule needs a covariate name")
        return cls(name, tau)


@dataclass(frozen=True, eq=False)
class PolicyPrediction:
    tau: float
    predictions: np.ndarray = field(repr=False)
    mean_outcome: float
    treated_share: float
    mean_sigma: float
    mean_pi: float
    variant: str


def apply_policy(S: PublicState, rule: PolicyRule) -> PublicState:
    """Public state with the assignment replaced by the rule's indicator."""
    return S.with_assignment(rule.indicator(S))


def predict_mean_outcome(S_new: PublicState, theta_hat: GameParams, fit: SecondStageFit,
                         variant: str = "with-interference", paper_literal: bool = False,
                         tau: float = float("nan"), clamp: float = MILLS_CLAMP,
                         **solve_kw) -> PolicyPrediction:
    """Average predicted outcome after re-solving the equilibrium on ``S_new``.

    The ``no-interference`` variant solves with ``theta3 = 0`` and evaluates
    every score-dependent regressor at zero.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}")
    if variant == "no-interference":
        theta_hat = GameParams(theta_hat.theta1, theta_hat.theta2, 0.0)
    eq = solve_equilibrium(S_new, theta_hat, **solve_kw)
    sigma = np.clip(eq.sigma, clamp, 1.0 - clamp)
    pi = eq.pi if variant == "with-interference" else np.zeros(S_new.n)
    yhat = conditional_mean(S_new.X, sigma, pi, fit.gamma1, fit.gamma0, fit.cf_order,
                            fit.spillover, paper_literal)
    return PolicyPrediction(float(tau), yhat, float(np.mean(yhat)), float(S_new.Z.mean()),
                            float(np.mean(eq.sigma)), float(np.mean(eq.pi)), variant)


def default_tau_grid(S: PublicState, covariate: str) -> np.ndarray:
    """Empirical quantiles 0, 5, ..., 100 percent of the policy covariate."""
    if covariate not in S.x_names:
        raise ValidationError(f"unknown covariate {covariate!r}")
    col = S.X[:, S.x_names.index(covariate)]
    return np.quantile(col, np.linspace(0.0, 1.0, 21))


def sweep_threshold(S: PublicState, theta_hat: GameParams, fit: SecondStageFit, covariate: str,
                    tau_grid=None, variant: str = "with-interference",
                    paper_literal: bool = False, **solve_kw) -> list:
    """One :class:`PolicyPrediction` per threshold on the grid."""
    if tau_grid is None:
        tau_grid = default_tau_grid(S, covariate)
    out = []
    for tau in np.asarray(tau_grid, dtype=float):
        S_new = apply_policy(S, PolicyRule(covariate, float(tau)))
        out.append(predict_mean_outcome(S_new, theta_hat, fit, variant, paper_literal,
                                        tau=float(tau), **solve_kw))
    return out


def fit_no_interference(S: PublicState, D, Y, cf_order: int = 1):
    """Conventional selection-model fit that ignores spillovers.

    Probit first stage (``theta3 = 0``) and control-function regressions
    without score columns.  Returns ``(first, second)``.
    """
    first = fit_first_stage(S, D, spillover=False)
    second = estimate_second_stage(S, D, Y, first, cf_order=cf_order, spillover=False)
    return first, second
