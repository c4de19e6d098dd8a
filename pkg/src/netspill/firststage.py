"""Nested fixed-point maximum likelihood for the treatment-choice game.

Every likelihood evaluation re-solves the equilibrium.  The outer loop is a
Newton iteration whose Hessian is the outer product of per-agent scores
(BHHH), with step halving until the likelihood does not fall.  In the
default guaranteed-unique mode ``theta3`` lives in ``|theta3| <= 0.999
sqrt(2 pi)``: trial points are projected onto that interval and, once the
likelihood pushes against the cap, ``theta3`` is held there while the other
coordinates keep moving.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from ._normal import clamp
from .equilibrium import (DEFAULT_EPS, DEFAULT_TOL, Equilibrium, GameParams, PublicState,
                          grad_sigma, solve_equilibrium, uniqueness_margin)
from .errors import ConvergenceError, IdentificationError, ValidationError

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
LAMBDA_CAP = 0.999
# forward-difference scores carry O(eps) truncation bias; see fit_first_stage
STALL_GRAD_FACTOR = 100.0


@dataclass(frozen=True, eq=False)
class FirstStageFit:
    theta_hat: GameParams
    vcov: np.ndarray
    loglik: float
    score_rows: np.ndarray
    converged: bool
    newton_iters: int
    equilibrium: Equilibrium
    grad: np.ndarray = field(repr=False, default=None)
    free: np.ndarray = field(repr=False, default=None)
    constraint_bound: bool = False
    trace: list = field(repr=False, default_factory=list)
    dsigma: np.ndarray = field(repr=False, default=None)
    stalled: bool = False

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def information(self) -> np.ndarray:
        """Outer-product information ``(1/n) sum s_i s_i'`` over free coordinates."""
        s = self.score_rows[:, self.free]
        return s.T @ s / s.shape[0]

    @property
    def lambda_hat(self) -> float:
        return uniqueness_margin(self.theta_hat)[0]


def _check_choice(S: PublicState, D) -> np.ndarray:
    D = np.asarray(D, dtype=float).ravel()
    if D.shape != (S.n,):
        raise ValidationError("choice vector length does not match n")
    if not np.isin(D, (0.0, 1.0)).all():
        raise ValidationError("choices D must be binary")
    return D


def _mean_loglik(D, sigma) -> float:
    s = clamp(sigma, PROB_CLAMP)
    return float(np.mean(D * np.log(s) + (1.0 - D) * np.log1p(-s)))


def loglik(S: PublicState, D, theta: GameParams, eq: Equilibrium | None = None, **solve_kw) -> float:
    """Mean per-agent log-likelihood at ``theta``."""
    D = _check_choice(S, D)
    if eq is None:
        eq = solve_equilibrium(S, theta, **solve_kw)
    return _mean_loglik(D, eq.sigma)


def score_from_gradient(D, sigma, dsigma) -> np.ndarray:
    s = clamp(sigma, PROB_CLAMP)
    w = D / s - (1.0 - D) / (1.0 - s)
    return w[:, None] * dsigma


def score(S: PublicState, D, theta: GameParams, eps: float = DEFAULT_EPS,
          eq: Equilibrium | None = None, **solve_kw) -> np.ndarray:
    """Per-agent score rows, ``(n, dim(theta))``, via :func:`grad_sigma`."""
    D = _check_choice(S, D)
    if eq is None:
        eq = solve_equilibrium(S, theta, **solve_kw)
    G = grad_sigma(S, theta, eps=eps, base=eq, **solve_kw)
    return score_from_gradient(D, eq.sigma, G)


def _check_rank(R, what="identification condition fails"):
    if np.linalg.matrix_rank(R) < R.shape[1]:
        raise IdentificationError(f"{what}: regressor moment matrix is singular")


def fit_probit(R, D, tol: float = 1e-10, max_iter: int = 100) -> np.ndarray:
    """Probit MLE by Newton's method with the analytic Hessian.

    Used as the starting value for the full fit.
    """
    R = np.asarray(R, dtype=float)
    D = np.asarray(D, dtype=float)
    _check_rank(R)
    b = np.zeros(R.shape[1])
    q = 2.0 * D - 1.0

    def ll(beta):
        return float(np.sum(log_ndtr(q * (R @ beta))))

    cur = ll(b)
    for _ in range(max_iter):
        # lambda = phi(q xb)/Phi(q xb), evaluated stably through erfcx
        z = q * (R @ b)
        ratio = _mills(z)
        g = R.T @ (q * ratio)
        w = ratio * (ratio + z)
        H = (R * w[:, None]).T @ R
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise IdentificationError("probit start: singular information (separation)") from None
        t = 1.0
        while t > 1e-10:
            new = ll(b + t * step)
            if new >= cur:
                break
            t *= 0.5
        b = b + t * step
        cur = new
        if np.max(np.abs(t * step)) < tol:
            return b
    raise ConvergenceError("probit start did not converge")


def _mills(z):
    from scipy.special import erfcx
    # phi(z)/Phi(z) = sqrt(2/pi) / erfcx(-z/sqrt(2))
    return np.sqrt(2.0 / np.pi) / erfcx(-z / np.sqrt(2.0))


def fit_first_stage(S: PublicState, D, spillover: bool = True, unique_mode: bool = True,
                    theta_start: GameParams | None = None, eps: float = DEFAULT_EPS,
                    solve_tol: float = DEFAULT_TOL, step_tol: float = 1e-8,
                    grad_tol: float = 1e-6, max_newton: int = 200) -> FirstStageFit:
    """Estimate game parameters by nested fixed-point maximum likelihood.

    Parameters
    ----------
    S : PublicState
    D : array_like
        Observed binary take-up.
    spillover : bool
        If False, ``theta3`` is held at zero (plain probit through the same
        machinery).
    unique_mode : bool
        Keep every trial point inside ``lambda <= 0.999`` (projection onto the
        cap; ``constraint_bound`` records whether it was ever touched).
    theta_start : GameParams, optional
        Defaults to the probit fit with ``theta3 = 0``.

    Notes
    -----
    Convergence needs a step of at most ``step_tol`` and a mean score of at
    most ``grad_tol``.  Near the uniqueness cap the forward-difference score
    is biased by more than ``grad_tol``; when no ascent is resolvable and the
    score is within ``STALL_GRAD_FACTOR * grad_tol`` the fit is accepted with
    ``stalled=True``.

    Returns
    -------
    FirstStageFit
        ``vcov`` is the inverse outer-product information divided by ``n``;
        rows/columns of fixed coordinates are zero.
    """
    D = _check_choice(S, D)
    n, k = S.n, S.k
    dim = k + 2
    free = np.ones(dim, dtype=bool)
    if not spillover:
        free[-1] = False
    allow = not unique_mode

    if theta_start is None:
        b = fit_probit(np.column_stack([S.X, S.Z]), D)
        theta = GameParams(b[:k], b[k], 0.0)
    else:
        theta = theta_start
        if not spillover:
            theta = GameParams(theta.theta1, theta.theta2, 0.0)

    def solve(th, init=None):
        return solve_equilibrium(S, th, tol=solve_tol, allow_nonunique=allow, init=init)

    def evaluate(th, eq):
        G = grad_sigma(S, th, eps=eps, base=eq, tol=solve_tol, allow_nonunique=allow)
        return score_from_gradient(D, eq.sigma, G), G

    cap = LAMBDA_CAP * np.sqrt(2.0 * np.pi)
    eq = solve(theta)
    if spillover:
        _check_rank(np.column_stack([S.X, S.Z, eq.pi]))
    ll = _mean_loglik(D, eq.sigma)
    trace = [ll]
    bound = False
    converged = stalled = False
    it = 0
    rows, G = evaluate(theta, eq)
    active = np.zeros(dim, dtype=bool)
    for it in range(1, max_newton + 1):
        g_all = rows.mean(axis=0)
        # theta3 pinned at the uniqueness cap while the likelihood pushes outward
        active[:] = False
        if spillover and unique_mode and abs(theta.theta3) >= cap * (1 - 1e-12) \
                and np.sign(g_all[-1]) == np.sign(theta.theta3):
            active[-1] = True
            bound = True
        move = free & ~active
        sf = rows[:, move]
        g = g_all[move]
        info = sf.T @ sf / n
        try:
            direction = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            raise IdentificationError("identification condition fails: singular information") from None
        vec = theta.as_vector()
        step_size = 1.0
        accepted = None
        for _ in range(60):
            trial = vec.copy()
            trial[move] += step_size * direction
            if unique_mode and abs(trial[-1]) > cap:
                trial[-1] = np.sign(trial[-1]) * cap
                bound = True
            th_trial = GameParams.from_vector(trial)
            eq_trial = solve(th_trial, init=eq.sigma)
            ll_trial = _mean_loglik(D, eq_trial.sigma)
            if ll_trial >= ll:
                accepted = (th_trial, eq_trial, ll_trial, np.max(np.abs(trial - vec)))
                break
            step_size *= 0.5
        if accepted is None:
            # no ascent left along the search direction
            gmax = np.max(np.abs(g))
            converged = gmax <= grad_tol
            if not converged and gmax <= STALL_GRAD_FACTOR * grad_tol:
                converged = stalled = True
            break
        gain = accepted[2] - ll
        theta, eq, ll, moved = accepted
        trace.append(ll)
        rows, G = evaluate(theta, eq)
        gmax = np.max(np.abs(rows[:, move].mean(axis=0)))
        if moved <= step_tol and gmax <= grad_tol:
            converged = True
            break
        if moved <= step_tol and gain <= 1e-14 * max(1.0, abs(ll)) \
                and gmax <= STALL_GRAD_FACTOR * grad_tol:
            # no further ascent is resolvable; the residual gradient is difference noise
            converged = stalled = True
            break
    if not converged:
        raise ConvergenceError(
            f"first stage did not converge after {it} Newton iterations", trace=trace)

    sf = rows[:, free]
    info = sf.T @ sf / n
    vcov = np.zeros((dim, dim))
    try:
        vcov[np.ix_(free, free)] = np.linalg.inv(info) / n
    except np.linalg.LinAlgError:
        raise IdentificationError("identification condition fails: singular information") from None
    vcov = 0.5 * (vcov + vcov.T)
    return FirstStageFit(theta, vcov, ll, rows, True, it, eq, rows.mean(axis=0),
                         free, bound, trace, G, stalled)
