"""Control-function outcome regressions with generated regressors.

Per arm ``d`` the outcome is regressed on ``W_i = [X_i, lam_i, pi_i X_i,
pi_i lam_i]`` over the subsample with ``D_i = d``, where ``lam_i`` is the
inverse Mills ratio evaluated at the fitted equilibrium probability.  Because
``sigma`` and ``pi`` come from the first-stage estimate, the sandwich variance
gets an extra term that propagates first-stage uncertainty through the
derivative of ``W`` in theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._normal import norm_pdf, norm_ppf
from .equilibrium import DEFAULT_EPS, PublicState, grad_sigma
from .errors import IdentificationError, ValidationError
from .firststage import FirstStageFit

MILLS_CLAMP = 1e-6


# ---------------------------------------------------------------------------
# inverse Mills ratios

def _open_unit(sigma):
    s = np.asarray(sigma, dtype=float)
    if not np.all((s > 0.0) & (s < 1.0)):
        raise ValidationError("probability outside the open unit interval")
    return s


def mills1(sigma):
    """``E[v | v <= Phi^{-1}(sigma)] = -phi(Phi^{-1}(sigma)) / sigma``."""
    s = _open_unit(sigma)
    return -norm_pdf(norm_ppf(s)) / s


def mills0(sigma):
    """``E[v | v > Phi^{-1}(sigma)] = phi(Phi^{-1}(sigma)) / (1 - sigma)``."""
    s = _open_unit(sigma)
    return norm_pdf(norm_ppf(s)) / (1.0 - s)


def mills_quadratic(sigma):
    """Second-order control-function term for the treated arm.

    ``t phi(t) / sigma + (phi(t) / sigma)**2`` with ``t = Phi^{-1}(sigma)``;
    this equals ``1 - Var(v | v <= t)``.
    """
    s = _open_unit(sigma)
    t = norm_ppf(s)
    r = norm_pdf(t) / s
    return t * r + r * r


def mills_quadratic0(sigma):
    """Untreated-arm counterpart, the same expression for ``-v`` above ``t``."""
    return mills_quadratic(1.0 - _open_unit(sigma))


def dmills1(sigma):
    s = _open_unit(sigma)
    t = norm_ppf(s)
    f = norm_pdf(t)
    return t / s + f / (s * s)


def dmills0(sigma):
    s = _open_unit(sigma)
    t = norm_ppf(s)
    f = norm_pdf(t)
    q = 1.0 - s
    return -t / q + f / (q * q)


def dmills_quadratic(sigma):
    s = _open_unit(sigma)
    t = norm_ppf(s)
    f = norm_pdf(t)
    return (1.0 - t * t) / s - 3.0 * t * f / s**2 - 2.0 * f * f / s**3


def dmills_quadratic0(sigma):
    return -dmills_quadratic(1.0 - _open_unit(sigma))


# ---------------------------------------------------------------------------
# regressors

def regressor_names(x_names, cf_order: int = 1, spillover: bool = True) -> list[str]:
    x_names = list(x_names)
    cf = ["lambda"] + (["lambda2"] if cf_order == 2 else [])
    names = x_names + cf
    if spillover:
        names += [f"pi*{nm}" for nm in x_names] + [f"pi*{c}" for c in cf]
    return names


def _check_order(cf_order):
    if cf_order not in (1, 2):
        raise ValidationError("cf_order must be 1 or 2")


def _control_terms(sigma, d, cf_order):
    """Control-function columns (and their sigma-derivatives) for arm ``d``."""
    if d == 1:
        cols = [mills1(sigma)]
        ders = [dmills1(sigma)]
        if cf_order == 2:
            cols.append(mills_quadratic(sigma))
            ders.append(dmills_quadratic(sigma))
    else:
        cols = [mills0(sigma)]
        ders = [dmills0(sigma)]
        if cf_order == 2:
            cols.append(mills_quadratic0(sigma))
            ders.append(dmills_quadratic0(sigma))
    return np.column_stack(cols), np.column_stack(ders)


def _select_arm(D, a1, a0):
    D = np.asarray(D, dtype=float)
    return np.where(D[:, None] == 1.0, a1, a0)


def arm_regressors(X, sigma, pi, d: int, cf_order: int = 1, spillover: bool = True):
    """Regressors for every unit evaluated as if in arm ``d``."""
    _check_order(cf_order)
    X = np.asarray(X, dtype=float)
    pi = np.asarray(pi, dtype=float)
    lam, _ = _control_terms(sigma, d, cf_order)
    blocks = [X, lam]
    if spillover:
        blocks += [pi[:, None] * X, pi[:, None] * lam]
    return np.column_stack(blocks)


def build_regressors(X, sigma, pi, D, cf_order: int = 1, spillover: bool = True):
    """Stack ``[X, lam, pi X, pi lam]`` with ``lam`` picked by own treatment."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    for a in (sigma, pi, D):
        if np.shape(a) != (n,):
            raise ValidationError("regressor inputs have inconsistent lengths")
    W1 = arm_regressors(X, sigma, pi, 1, cf_order, spillover)
    W0 = arm_regressors(X, sigma, pi, 0, cf_order, spillover)
    return _select_arm(D, W1, W0)


def regressor_jacobian(X, sigma, pi, D, dsigma, dpi, cf_order: int = 1,
                       spillover: bool = True, clamped=None):
    """Derivative of each unit's regressor row in theta, shape ``(n, p, dim)``.

    ``dsigma`` and ``dpi`` are ``(n, dim)`` Jacobians of the equilibrium
    probabilities and neighborhood scores.  Units whose probability was
    clamped get a zero derivative through the Mills terms.
    """
    X = np.asarray(X, dtype=float)
    n, k = X.shape
    D = np.asarray(D, dtype=float)
    lam1, dl1 = _control_terms(sigma, 1, cf_order)
    lam0, dl0 = _control_terms(sigma, 0, cf_order)
    lam = _select_arm(D, lam1, lam0)
    dlam = _select_arm(D, dl1, dl0)
    if clamped is not None:
        dlam = dlam * (~np.asarray(clamped))[:, None]
    c = lam.shape[1]
    dim = dsigma.shape[1]
    p = (k + c) * (2 if spillover else 1)
    J = np.zeros((n, p, dim))
    # d lam / d theta
    J[:, k:k + c, :] = dlam[:, :, None] * dsigma[:, None, :]
    if spillover:
        off = k + c
        J[:, off:off + k, :] = X[:, :, None] * dpi[:, None, :]
        J[:, off + k:off + k + c, :] = (lam[:, :, None] * dpi[:, None, :]
                                        + np.asarray(pi)[:, None, None] * J[:, k:k + c, :])
    return J


# ---------------------------------------------------------------------------
# estimation

@dataclass(frozen=True)
class OutcomeParams:
    """Coefficients of one arm in regressor order ``(alpha, rho_u, beta, rho_e)``.

    With a second-order control function ``rho_u`` and ``rho_e`` hold two
    loadings each (linear, quadratic).  Without spillover columns ``beta`` and
    ``rho_e`` are zero.
    """

    alpha: np.ndarray
    rho_u: np.ndarray
    beta: np.ndarray
    rho_e: np.ndarray

    def __post_init__(self):
        for nm in ("alpha", "rho_u", "beta", "rho_e"):
            a = np.atleast_1d(np.asarray(getattr(self, nm), dtype=float)).copy()
            a.setflags(write=False)
            object.__setattr__(self, nm, a)

    @property
    def cf_order(self) -> int:
        return self.rho_u.size

    def as_vector(self, spillover: bool = True) -> np.ndarray:
        if spillover:
            return np.concatenate([self.alpha, self.rho_u, self.beta, self.rho_e])
        return np.concatenate([self.alpha, self.rho_u])

    @classmethod
    def from_vector(cls, vec, k: int, cf_order: int = 1, spillover: bool = True):
        vec = np.asarray(vec, dtype=float)
        c = cf_order
        alpha, rho_u = vec[:k], vec[k:k + c]
        if spillover:
            beta, rho_e = vec[k + c:2 * k + c], vec[2 * k + c:2 * k + 2 * c]
        else:
            beta, rho_e = np.zeros(k), np.zeros(c)
        return cls(alpha, rho_u, beta, rho_e)

    __hash__ = None

    def __eq__(self, other):
        if not isinstance(other, OutcomeParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, a), getattr(other, a))
                   for a in ("alpha", "rho_u", "beta", "rho_e"))


@dataclass(frozen=True, eq=False)
class SecondStageFit:
    gamma1: OutcomeParams
    gamma0: OutcomeParams
    vcov1: np.ndarray
    vcov0: np.ndarray
    naive_vcov1: np.ndarray
    naive_vcov0: np.ndarray
    residuals: np.ndarray
    cov10: np.ndarray = field(repr=False, default=None)
    names: list = field(repr=False, default=None)
    cf_order: int = 1
    spillover: bool = True
    clamp_count: int = 0
    W: np.ndarray = field(repr=False, default=None)
    D: np.ndarray = field(repr=False, default=None)
    sigma: np.ndarray = field(repr=False, default=None)
    pi: np.ndarray = field(repr=False, default=None)
    fitted_mean: float = float("nan")

    @property
    def k(self) -> int:
        return self.gamma1.alpha.size

    def se(self, arm: int, corrected: bool = True) -> np.ndarray:
        if arm == 1:
            v = self.vcov1 if corrected else self.naive_vcov1
        else:
            v = self.vcov0 if corrected else self.naive_vcov0
        return np.sqrt(np.clip(np.diag(v), 0.0, None))

    def stacked_vcov(self) -> np.ndarray:
        """Joint covariance of ``(gamma1, gamma0)``."""
        p = self.vcov1.shape[0]
        V = np.zeros((2 * p, 2 * p))
        V[:p, :p] = self.vcov1
        V[p:, p:] = self.vcov0
        c = self.cov10 if self.cov10 is not None else np.zeros((p, p))
        V[p:, :p] = c
        V[:p, p:] = c.T
        return V


def ols_fit(Y, W, mask, what="second-stage rank condition fails"):
    Wm = W[mask]
    if Wm.shape[0] == 0:
        raise IdentificationError("empty subsample")
    if Wm.shape[0] < Wm.shape[1] or np.linalg.matrix_rank(Wm) < Wm.shape[1]:
        raise IdentificationError(what)
    gamma, *_ = np.linalg.lstsq(Wm, np.asarray(Y)[mask], rcond=None)
    return gamma


def fit_second_stage(Y, D, W):
    """Least squares of ``Y`` on ``W`` separately within ``D == 1`` and ``D == 0``.

    Returns
    -------
    gamma1, gamma0 : ndarray
    residuals : ndarray
        ``Y - W gamma_{D_i}`` for every unit.
    """
    Y = np.asarray(Y, dtype=float)
    D = np.asarray(D, dtype=float)
    W = np.asarray(W, dtype=float)
    treated = D == 1.0
    g1 = ols_fit(Y, W, treated)
    g0 = ols_fit(Y, W, ~treated)
    resid = Y - np.where(treated, W @ g1, W @ g0)
    return g1, g0, resid


def corrected_vcov(W, mask, residuals, jac_term, info_inv, dof_adjust: bool = False):
    """Two-step sandwich covariance of one arm's coefficients.

    Parameters
    ----------
    W : ndarray, (n, p)
        Generated regressors.
    mask : ndarray of bool
        Units in this arm.
    residuals : ndarray, (n,)
    jac_term : ndarray, (n, dim)
        ``gamma' dW_i/dtheta`` per unit.  Pass zeros to drop the correction.
    info_inv : ndarray, (dim, dim)
        Inverse first-stage information (``n`` times the first-stage vcov).

    Returns
    -------
    vcov, naive_vcov, J : ndarray
        ``J`` is the ``(p, dim)`` cross-derivative matrix used in the correction.
    """
    n = W.shape[0]
    m = np.asarray(mask, dtype=float)
    Wm = W * m[:, None]
    upsilon = Wm.T @ W / n
    try:
        u_inv = np.linalg.inv(upsilon)
    except np.linalg.LinAlgError:
        raise IdentificationError("second-stage rank condition fails") from None
    e = residuals * m
    meat = (W * (e * e)[:, None]).T @ W / n
    J = Wm.T @ jac_term / n
    naive = u_inv @ meat @ u_inv / n
    if dof_adjust:
        p = W.shape[1]
        nd = m.sum()
        naive = naive * (nd / (nd - p))
    naive = 0.5 * (naive + naive.T)
    # first-stage term added as B B' so the correction stays PSD in floating point
    B = u_inv @ J @ _psd_root(info_inv)
    vcov = naive + B @ B.T / n
    return vcov, naive, J


def _psd_root(A):
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def conditional_mean(X, sigma, pi, gamma1: OutcomeParams, gamma0: OutcomeParams,
                     cf_order: int = 1, spillover: bool = True, paper_literal: bool = False):
    """Per-unit ``E[Y_i | S] = sigma E[Y|D=1,S] + (1 - sigma) E[Y|D=0,S]``.

    ``paper_literal`` drops the estimated loadings on the Mills terms and puts
    unit weight on them instead.
    """
    X = np.asarray(X, dtype=float)
    W1 = arm_regressors(X, sigma, pi, 1, cf_order, spillover)
    W0 = arm_regressors(X, sigma, pi, 0, cf_order, spillover)
    if paper_literal:
        k = X.shape[1]
        c = cf_order
        g1 = gamma1.as_vector(spillover).copy()
        g0 = gamma0.as_vector(spillover).copy()
        for g in (g1, g0):
            g[k:k + c] = 1.0
            if spillover:
                g[2 * k + c:] = 1.0
    else:
        g1 = gamma1.as_vector(spillover)
        g0 = gamma0.as_vector(spillover)
    s = np.asarray(sigma, dtype=float)
    return s * (W1 @ g1) + (1.0 - s) * (W0 @ g0)


def estimate_second_stage(S: PublicState, D, Y, first: FirstStageFit, cf_order: int = 1,
                          spillover: bool = True, clamp: float = MILLS_CLAMP,
                          dof_adjust: bool = False, dsigma=None,
                          eps: float = DEFAULT_EPS) -> SecondStageFit:
    """Fit both arms at the first-stage estimate and attach corrected variances.

    ``dsigma`` (the ``(n, dim)`` Jacobian of equilibrium probabilities at the
    estimate) is recomputed by forward differences when not supplied.
    """
    _check_order(cf_order)
    D = np.asarray(D, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if D.shape != (S.n,) or Y.shape != (S.n,):
        raise ValidationError("D and Y must have length n")
    if not np.isfinite(Y).all():
        raise ValidationError("outcome has non-finite values")
    eq = first.equilibrium
    raw = eq.sigma
    clamped = (raw < clamp) | (raw > 1.0 - clamp)
    sigma = np.clip(raw, clamp, 1.0 - clamp)
    pi = eq.pi if spillover else np.zeros(S.n)
    W = build_regressors(S.X, sigma, pi, D, cf_order, spillover)
    g1, g0, resid = fit_second_stage(Y, D, W)

    if dsigma is None:
        dsigma = first.dsigma
    if dsigma is None:
        dsigma = grad_sigma(S, first.theta_hat, eps=eps, base=eq)
    dpi = np.asarray(S.net.averaging @ dsigma)
    if not spillover:
        dpi = np.zeros_like(dpi)
    jac = regressor_jacobian(S.X, sigma, pi, D, dsigma, dpi, cf_order, spillover, clamped)
    info_inv = S.n * first.vcov
    treated = D == 1.0
    t1 = np.einsum("npd,p->nd", jac, g1)
    t0 = np.einsum("npd,p->nd", jac, g0)
    v1, nv1, J1 = corrected_vcov(W, treated, resid, t1, info_inv, dof_adjust)
    v0, nv0, J0 = corrected_vcov(W, ~treated, resid, t0, info_inv, dof_adjust)
    n = S.n
    U1 = np.linalg.inv((W * treated[:, None]).T @ W / n)
    U0 = np.linalg.inv((W * (~treated)[:, None]).T @ W / n)
    cov10 = U0 @ J0 @ info_inv @ J1.T @ U1 / n

    k = S.k
    gamma1 = OutcomeParams.from_vector(g1, k, cf_order, spillover)
    gamma0 = OutcomeParams.from_vector(g0, k, cf_order, spillover)
    fitted = conditional_mean(S.X, sigma, pi, gamma1, gamma0, cf_order, spillover)
    return SecondStageFit(gamma1, gamma0, v1, v0, nv1, nv0, resid, cov10,
                          regressor_names(S.x_names, cf_order, spillover), cf_order,
                          spillover, int(clamped.sum()), W, D, sigma, pi,
                          float(np.mean(fitted)))
