"""Bayes-Nash equilibrium of the binary treatment-choice game.

Each agent takes up treatment when ``v_i <= X_i'theta1 + theta2*Z_i +
theta3*pi_i`` with ``v_i`` standard normal private information and ``pi_i`` the
average of neighbors' equilibrium take-up probabilities.  Equilibrium
probabilities solve ``sigma = Phi(X theta1 + theta2 Z + theta3 M sigma)`` with
``M`` the row-normalized adjacency; the map is a sup-norm contraction with
modulus ``|theta3| / sqrt(2 pi)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._normal import PDF_MAX, norm_cdf, norm_pdf
from .errors import ConvergenceError, UniquenessError, ValidationError
from .network import Network

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 10_000
DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class GameParams:
    """Payoff parameters ``(theta1, theta2, theta3)`` of the choice game."""

    theta1: np.ndarray
    theta2: float
    theta3: float

    def __post_init__(self):
        t1 = np.atleast_1d(np.asarray(self.theta1, dtype=float)).copy()
        t1.setflags(write=False)
        object.__setattr__(self, "theta1", t1)
        object.__setattr__(self, "theta2", float(self.theta2))
        object.__setattr__(self, "theta3", float(self.theta3))

    @property
    def k(self) -> int:
        return self.theta1.size

    @property
    def dim(self) -> int:
        return self.theta1.size + 2

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta1, [self.theta2, self.theta3]])

    @classmethod
    def from_vector(cls, vec) -> "GameParams":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[:-2], vec[-2], vec[-1])

    @property
    def margin(self) -> float:
        return uniqueness_margin(self)[0]

    def __eq__(self, other):
        if not isinstance(other, GameParams):
            return NotImplemented
        return np.array_equal(self.as_vector(), other.as_vector())

    __hash__ = None


def uniqueness_margin(theta: GameParams):
    """Contraction modulus ``lambda = |theta3| sup phi`` and whether it is < 1."""
    lam = abs(theta.theta3) * PDF_MAX
    return lam, lam < 1.0


def param_names(x_names) -> list[str]:
    return [f"theta1[{nm}]" for nm in x_names] + ["theta2", "theta3"]


@dataclass(frozen=True, eq=False)
class PublicState:
    """Public information ``(G, X, Z)`` shared by all agents.

    ``X`` should carry an intercept column when one is wanted; ``x_names``
    labels its columns.
    """

    net: Network
    X: np.ndarray
    Z: np.ndarray
    x_names: tuple = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Z = np.asarray(self.Z, dtype=float).ravel()
        n = self.net.n
        if X.shape[0] != n or Z.shape[0] != n:
            raise ValidationError(
                f"row counts differ: network {n}, X {X.shape[0]}, Z {Z.shape[0]}")
        if not np.isin(Z, (0.0, 1.0)).all():
            raise ValidationError("assignment Z must be binary")
        if not np.isfinite(X).all():
            raise ValidationError("X has non-finite entries")
        X = X.copy()
        Z = Z.copy()
        X.setflags(write=False)
        Z.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        names = self.x_names
        if names is None:
            names = tuple(f"x{j}" for j in range(X.shape[1]))
        names = tuple(names)
        if len(names) != X.shape[1]:
            raise ValidationError("x_names length does not match X columns")
        object.__setattr__(self, "x_names", names)

    @property
    def n(self) -> int:
        return self.net.n

    @property
    def k(self) -> int:
        return self.X.shape[1]

    def with_assignment(self, Z) -> "PublicState":
        return PublicState(self.net, self.X, Z, self.x_names)

    def permute(self, perm) -> "PublicState":
        perm = np.asarray(perm)
        return PublicState(self.net.permute(perm), self.X[perm], self.Z[perm], self.x_names)

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for a in (self.net.indptr, self.net.indices, self.X, self.Z):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class Equilibrium:
    """Fixed-point choice probabilities and neighborhood scores."""

    sigma: np.ndarray
    pi: np.ndarray
    iterations: int
    residual: float
    unique_regime: bool = True
    path: np.ndarray | None = field(default=None, repr=False)


def neighborhood_score(sigma, net: Network) -> np.ndarray:
    """Average of ``sigma`` over each agent's neighbors."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (net.n,):
        raise ValidationError("sigma length does not match network size")
    return net.averaging @ sigma


def base_index(S: PublicState, theta: GameParams) -> np.ndarray:
    """``X theta1 + theta2 Z``: the part of the payoff index free of spillovers."""
    if theta.k != S.k:
        raise ValidationError(f"theta1 has {theta.k} entries, X has {S.k} columns")
    return S.X @ theta.theta1 + theta.theta2 * S.Z


def best_response(S: PublicState, theta: GameParams, sigma) -> np.ndarray:
    return norm_cdf(base_index(S, theta) + theta.theta3 * neighborhood_score(sigma, S.net))


def solve_equilibrium(S: PublicState, theta: GameParams, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, allow_nonunique: bool = False,
                      init=None, record: bool = False) -> Equilibrium:
    """Solve for equilibrium take-up probabilities by fixed-point iteration.

    Parameters
    ----------
    S : PublicState
    theta : GameParams
    tol : float
        Stop once the sup-norm change between successive iterates is ``<= tol``.
    max_iter : int
        Iteration ceiling; exceeding it raises :class:`ConvergenceError`.
    allow_nonunique : bool
        Run even when ``|theta3| >= sqrt(2 pi)``.  The fixed point reached from
        the starting point is returned and flagged ``unique_regime=False``.
    init : array_like, optional
        Starting iterate; defaults to 0.5 for every agent.
    record : bool
        Keep every iterate in ``Equilibrium.path`` (row ``t`` is iterate ``t``).
    """
    if not tol > 0:
        raise ValidationError("tol must be positive")
    lam, unique = uniqueness_margin(theta)
    if not unique and not allow_nonunique:
        raise UniquenessError(
            f"uniqueness not guaranteed: lambda={lam:.6g} >= 1 (|theta3|={abs(theta.theta3):.6g})")
    M = S.net.averaging
    a = base_index(S, theta)
    t3 = theta.theta3

    if t3 == 0.0:
        sigma = norm_cdf(a)
        path = np.vstack([np.full(S.n, 0.5), sigma]) if record else None
        return Equilibrium(sigma, M @ sigma, 1, 0.0, unique, path)

    sigma = np.full(S.n, 0.5) if init is None else np.array(init, dtype=float)
    trail = [sigma] if record else None
    residual = np.inf
    for it in range(1, max_iter + 1):
        new = norm_cdf(a + t3 * (M @ sigma))
        residual = float(np.max(np.abs(new - sigma)))
        sigma = new
        if record:
            trail.append(sigma)
        if residual <= tol:
            pi = M @ sigma
            path = np.vstack(trail) if record else None
            return Equilibrium(sigma, pi, it, residual, unique, path)
    raise ConvergenceError(
        f"equilibrium not reached in {max_iter} iterations (residual {residual:.3g})",
        residual=residual)


def fixed_point_defect(S: PublicState, theta: GameParams, sigma) -> float:
    """Sup-norm of ``sigma - Phi(index(sigma))``."""
    return float(np.max(np.abs(np.asarray(sigma) - best_response(S, theta, sigma))))


def grad_sigma(S: PublicState, theta: GameParams, eps: float = DEFAULT_EPS,
               base: Equilibrium | None = None, tol: float = DEFAULT_TOL,
               max_iter: int = DEFAULT_MAX_ITER, allow_nonunique: bool = False):
    """Forward-difference Jacobian of equilibrium probabilities in theta.

    Column ``k`` is ``(sigma*(theta + eps e_k) - sigma*(theta)) / eps``; every
    perturbed equilibrium is re-solved to ``tol``, warm-started at the base
    solution.  Returns an ``(n, dim(theta))`` array.
    """
    if not eps > 0:
        raise ValidationError("eps must be positive")
    if base is None:
        base = solve_equilibrium(S, theta, tol, max_iter, allow_nonunique)
    vec = theta.as_vector()
    out = np.empty((S.n, vec.size))
    for k in range(vec.size):
        step = vec.copy()
        step[k] += eps
        eq = solve_equilibrium(S, GameParams.from_vector(step), tol, max_iter,
                               allow_nonunique, init=base.sigma)
        out[:, k] = (eq.sigma - base.sigma) / eps
    return out


def grad_sigma_implicit(S: PublicState, theta: GameParams, base: Equilibrium | None = None):
    """Exact Jacobian from the implicit function theorem.

    Solves ``(I - diag(theta3 phi_i) M) J = diag(phi_i) R`` with ``R = [X, Z,
    pi]``.  Used as a cross-check for :func:`grad_sigma`.
    """
    import scipy.sparse as sp
    from scipy.sparse.linalg import spsolve

    if base is None:
        base = solve_equilibrium(S, theta)
    idx = base_index(S, theta) + theta.theta3 * base.pi
    dens = norm_pdf(idx)
    R = np.column_stack([S.X, S.Z, base.pi])
    A = sp.identity(S.n, format="csc") - sp.diags(theta.theta3 * dens) @ S.net.averaging
    rhs = dens[:, None] * R
    sol = spsolve(A.tocsc(), rhs)
    return np.asarray(sol).reshape(S.n, -1)
