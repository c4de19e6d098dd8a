"""Synthetic data and the Monte Carlo experiment.

The public state (network, covariates, assignment) is drawn once and held
fixed; each replication draws fresh private shocks ``v`` and random outcome
coefficients, refits both stages and records estimates, standard errors and
interval hits.  Replication ``r`` draws from the stream
``SeedSequence(seed, spawn_key=(REP_KEY, r))`` so results do not depend on
execution order or on how many worker processes are used.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .equilibrium import GameParams, PublicState, solve_equilibrium
from .errors import NetspillError, ValidationError
from .firststage import fit_first_stage
from .network import Network, build_radius_graph, remove_isolated
from .secondstage import estimate_second_stage

log = logging.getLogger(__name__)

NET_KEY, STATE_KEY, REP_KEY = 0, 1, 2
Z95 = 1.959963984540054


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# ---------------------------------------------------------------------------
# networks

def _mean_overlap(rho):
    # expected fraction of a unit square within distance rho of a uniform point
    return np.pi * rho**2 - 8.0 / 3.0 * rho**3 + 0.5 * rho**4


def square_side_for_degree(n: int, radius: float, target_degree: float) -> float:
    """Side length giving expected mean degree ``target_degree`` (edge effects included)."""
    if target_degree >= n - 1:
        raise ValidationError("target degree must be below n - 1")

    def excess(side):
        return (n - 1) * _mean_overlap(min(radius / side, 1.0)) - target_degree

    lo = radius * 1.0000001
    hi = radius * np.sqrt(np.pi * (n - 1) / target_degree) * 4.0
    return brentq(excess, lo, hi, xtol=1e-10)


def generate_geometric_network(n: int, radius: float = 500.0, seed: int = 0,
                               target_degree: float = 16.0):
    """Random geometric graph on a square sized for the target mean degree.

    Returns ``(network, coords)`` with isolated nodes already removed, so the
    final size can be slightly below ``n``.
    """
    side = square_side_for_degree(n, radius, target_degree)
    coords = _rng(seed, NET_KEY).uniform(0.0, side, size=(n, 2))
    net = build_radius_graph(coords, radius)
    net, (coords,), _ = remove_isolated(net, coords)
    return net, coords


# ---------------------------------------------------------------------------
# data generating process

@dataclass(frozen=True)
class DgpSpec:
    """Data generating process for simulated experiments.

    ``alpha1, beta1, alpha0, beta0`` are the conditional-mean coefficients on
    ``X`` (intercept first); ``loadings`` shift the intercept of each random
    coefficient by ``loading * v_i``.
    """

    theta0: GameParams = GameParams([-2.0], 1.0, 1.5)
    alpha1: tuple = (2.0,)
    beta1: tuple = (1.0,)
    alpha0: tuple = (4.0,)
    beta0: tuple = (3.0,)
    loadings: tuple = (0.3, 0.4, 0.2, 0.2)
    noise_sd: float = 1.0
    seed: int = 20240101
    n: int = 538
    radius: float = 500.0
    target_degree: float = 16.0
    z_prob: float = 0.27
    n_covariates: int = 0
    cf_order: int = 1

    def __post_init__(self):
        if self.noise_sd < 0:
            raise ValidationError("noise_sd must be nonnegative")
        k = 1 + self.n_covariates
        for nm in ("alpha1", "beta1", "alpha0", "beta0"):
            v = tuple(float(x) for x in np.atleast_1d(getattr(self, nm)))
            if len(v) != k:
                raise ValidationError(f"{nm} needs {k} entries")
            object.__setattr__(self, nm, v)
        if self.theta0.k != k:
            raise ValidationError(f"theta1 needs {k} entries")
        if len(self.loadings) != 4:
            raise ValidationError("four loadings required")
        object.__setattr__(self, "loadings", tuple(float(x) for x in self.loadings))

    @property
    def x_names(self):
        return ("const",) + tuple(f"x{j + 1}" for j in range(self.n_covariates))

    def truth(self) -> dict:
        """True values of every reported parameter."""
        out = {}
        names = self.x_names
        for nm, v in zip(names, self.theta0.theta1):
            out[f"theta1[{nm}]"] = v
        out["theta2"] = self.theta0.theta2
        out["theta3"] = self.theta0.theta3
        for arm, a, b in ((1, self.alpha1, self.beta1), (0, self.alpha0, self.beta0)):
            for nm, v in zip(names, a):
                out[f"alpha{arm}[{nm}]"] = v
            for nm, v in zip(names, b):
                out[f"beta{arm}[{nm}]"] = v
        la1, lb1, la0, lb0 = self.loadings
        out.update({"rho_u1": la1, "rho_e1": lb1, "rho_u0": la0, "rho_e0": lb0})
        return out


def build_state(spec: DgpSpec, net: Network | None = None, Z=None, X=None) -> PublicState:
    """Public state for ``spec``; missing pieces are drawn from the spec seed."""
    if net is None:
        net, _ = generate_geometric_network(spec.n, spec.radius, spec.seed, spec.target_degree)
    rng = _rng(spec.seed, STATE_KEY)
    n = net.n
    if X is None:
        extra = rng.standard_normal((n, spec.n_covariates))
        X = np.column_stack([np.ones(n), extra])
    if Z is None:
        Z = (rng.uniform(size=n) < spec.z_prob).astype(float)
    return PublicState(net, X, Z, spec.x_names)


@dataclass(frozen=True, eq=False)
class SimulatedData:
    D: np.ndarray
    Y: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray
    coefficients: np.ndarray = field(repr=False)  # columns alpha1, beta1, alpha0, beta0


def generate_data(S: PublicState, spec: DgpSpec, rng=None, eq=None) -> SimulatedData:
    """Draw choices and outcomes from the game and random-coefficient model.

    ``rng`` may be a Generator or an integer replication index (mapped to that
    replication's stream).
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = _rng(spec.seed, REP_KEY, int(rng or 0))
    if eq is None:
        eq = solve_equilibrium(S, spec.theta0)
    n = S.n
    v = rng.standard_normal(n)
    index = S.X @ spec.theta0.theta1 + spec.theta0.theta2 * S.Z + spec.theta0.theta3 * eq.pi
    D = (v <= index).astype(float)
    noise = rng.standard_normal((n, 4)) * spec.noise_sd
    means = np.column_stack([S.X @ np.asarray(spec.alpha1), S.X @ np.asarray(spec.beta1),
                             S.X @ np.asarray(spec.alpha0), S.X @ np.asarray(spec.beta0)])
    coef = means + np.outer(v, spec.loadings) + noise
    a1, b1, a0, b0 = coef.T
    Y = np.where(D == 1.0, a1 + b1 * eq.pi, a0 + b0 * eq.pi)
    return SimulatedData(D, Y, v, eq.sigma, eq.pi, coef)


# ---------------------------------------------------------------------------
# naive comparators

def _hc0(R, resid, bread_inv):
    meat = (R * (resid * resid)[:, None]).T @ R
    return bread_inv @ meat @ bread_inv.T


def _to_arms(coef, V, k):
    """Map (a0, b0, a1-a0, b1-b0) blocks to (a1, b1, a0, b0)."""
    p = 4 * k
    T = np.zeros((p, p))
    I = np.eye(k)
    T[0:k, 0:k] = I
    T[0:k, 2 * k:3 * k] = I          # a1 = a0 + (a1 - a0)
    T[k:2 * k, k:2 * k] = I
    T[k:2 * k, 3 * k:4 * k] = I      # b1 = b0 + (b1 - b0)
    T[2 * k:3 * k, 0:k] = I          # a0
    T[3 * k:4 * k, k:2 * k] = I      # b0
    return T @ coef, T @ V @ T.T


def comparators(Y, D, X, pi, Z) -> dict:
    """Naive OLS and 2SLS estimates of ``(alpha1, beta1, alpha0, beta0)``.

    Both regress ``Y`` on ``(X, pi X, D X, D pi X)``; 2SLS instruments the two
    ``D`` blocks with ``(Z X, Z pi X)``.  Standard errors are HC0.
    """
    Y = np.asarray(Y, float)
    D = np.asarray(D, float)
    Z = np.asarray(Z, float)
    X = np.asarray(X, float)
    pi = np.asarray(pi, float)
    k = X.shape[1]
    piX = pi[:, None] * X
    R = np.column_stack([X, piX, D[:, None] * X, D[:, None] * piX])
    out = {}

    if np.linalg.matrix_rank(R) < R.shape[1]:
        raise ValidationError("comparator regressors are rank deficient")
    b, *_ = np.linalg.lstsq(R, Y, rcond=None)
    bread = np.linalg.inv(R.T @ R)
    V = _hc0(R, Y - R @ b, bread)
    out["ols"] = _to_arms(b, V, k)

    Q = np.column_stack([X, piX, Z[:, None] * X, Z[:, None] * piX])
    if np.linalg.matrix_rank(Q) < Q.shape[1]:
        raise ValidationError("instrument matrix is rank deficient")
    Rhat = Q @ np.linalg.lstsq(Q, R, rcond=None)[0]
    b2 = np.linalg.solve(Rhat.T @ R, Rhat.T @ Y)
    bread2 = np.linalg.inv(Rhat.T @ R)
    V2 = _hc0(Rhat, Y - R @ b2, bread2)
    out["2sls"] = _to_arms(b2, V2, k)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo

def _param_names(spec: DgpSpec):
    return list(spec.truth().keys())


def run_replication(S: PublicState, spec: DgpSpec, r: int, eq0=None) -> dict:
    """Simulate and fit one replication; raises on fit failure."""
    data = generate_data(S, spec, r, eq0)
    fs = fit_first_stage(S, data.D)
    ss = estimate_second_stage(S, data.D, data.Y, fs, cf_order=spec.cf_order)
    k = S.k
    c = spec.cf_order
    g1, g0 = ss.gamma1, ss.gamma0
    se1, se0 = ss.se(1), ss.se(0)
    nse1, nse0 = ss.se(1, False), ss.se(0, False)

    def split(vec):
        # alpha, beta, linear rho_u, linear rho_e
        return vec[:k], vec[k + c:2 * k + c], vec[k], vec[2 * k + c]

    a1, b1, ru1, re1 = split(g1.as_vector())
    a0, b0, ru0, re0 = split(g0.as_vector())
    sa1, sb1, sru1, sre1 = split(se1)
    sa0, sb0, sru0, sre0 = split(se0)
    na1, nb1, _, _ = split(nse1)
    na0, nb0, _, _ = split(nse0)
    est = np.concatenate([fs.theta_hat.as_vector(), a1, b1, a0, b0, [ru1, re1, ru0, re0]])
    se = np.concatenate([fs.std_errors, sa1, sb1, sa0, sb0, [sru1, sre1, sru0, sre0]])
    naive = np.concatenate([np.full(k + 2, np.nan), na1, nb1, na0, nb0, np.full(4, np.nan)])

    min_eig = min(np.linalg.eigvalsh(ss.vcov1 - ss.naive_vcov1).min(),
                  np.linalg.eigvalsh(ss.vcov0 - ss.naive_vcov0).min())
    comp = comparators(data.Y, data.D, S.X, fs.equilibrium.pi, S.Z)
    return {
        "rep": r,
        "estimate": est,
        "se": se,
        "naive_se": naive,
        "min_eig": float(min_eig),
        "ols": comp["ols"][0],
        "ols_se": np.sqrt(np.diag(comp["ols"][1])),
        "2sls": comp["2sls"][0],
        "2sls_se": np.sqrt(np.diag(comp["2sls"][1])),
        "takeup": float(data.D.mean()),
        "mean_sigma": float(data.sigma.mean()),
        "theta3_at_cap": bool(fs.constraint_bound and abs(fs.theta_hat.theta3) > 2.5),
        "newton_iters": fs.newton_iters,
    }


def _safe_replication(args):
    S, spec, r, eq0 = args
    try:
        return run_replication(S, spec, r, eq0)
    except (NetspillError, np.linalg.LinAlgError) as exc:
        return {"rep": r, "error": f"{type(exc).__name__}: {exc}"}


@dataclass(frozen=True, eq=False)
class McResult:
    """Aggregated Monte Carlo output.

    ``rows`` holds one dict per parameter with keys ``name, truth, bias,
    mc_se, mean_se, emp_sd, coverage``.  ``comparator_rows`` does the same for
    the naive OLS/2SLS estimators of the outcome coefficients.
    """

    rows: list
    reps: int
    failures: list
    comparator_rows: list
    draws: dict = field(repr=False)
    state_fingerprint: str = ""
    mean_takeup: float = float("nan")

    @property
    def n_failures(self) -> int:
        return len(self.failures)

    def row(self, name) -> dict:
        for r in self.rows:
            if r["name"] == name:
                return r
        raise KeyError(name)


class MonteCarloError(NetspillError, RuntimeError):
    pass


def _summarize(names, truth, est, se):
    rows = []
    m = est.shape[0]
    for j, nm in enumerate(names):
        e = est[:, j]
        s = se[:, j]
        err = e - truth[j]
        sd = float(np.std(e, ddof=1)) if m > 1 else float("nan")
        rows.append({
            "name": nm,
            "truth": float(truth[j]),
            "mean_estimate": float(np.mean(e)),
            "bias": float(np.mean(err)),
            "mc_se": sd / np.sqrt(m) if m > 1 else float("nan"),
            "mean_se": float(np.mean(s)),
            "emp_sd": sd,
            "coverage": float(np.mean(np.abs(err) <= Z95 * s)),
        })
    return rows


def run_monte_carlo(spec: DgpSpec, reps: int = 500, workers: int = 1,
                    S: PublicState | None = None, max_failure_rate: float = 0.05) -> McResult:
    """Repeat simulate-and-fit ``reps`` times over a fixed public state."""
    if reps < 1:
        raise ValidationError("reps must be >= 1")
    if S is None:
        S = build_state(spec)
    eq0 = solve_equilibrium(S, spec.theta0)
    fp = S.fingerprint()
    tasks = [(S, spec, r, eq0) for r in range(reps)]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_safe_replication, tasks, chunksize=max(1, reps // (4 * workers))))
    else:
        results = [_safe_replication(t) for t in tasks]
    if S.fingerprint() != fp:
        raise MonteCarloError("public state changed during the experiment")
    results.sort(key=lambda d: d["rep"])
    failures = [(d["rep"], d["error"]) for d in results if "error" in d]
    for r, msg in failures:
        log.warning("replication %d failed (seed=%d, stream key=(%d, %d)): %s",
                    r, spec.seed, REP_KEY, r, msg)
    if len(failures) > max_failure_rate * reps:
        raise MonteCarloError(f"{len(failures)} of {reps} replications failed")
    ok = [d for d in results if "error" not in d]
    if not ok:
        raise MonteCarloError("every replication failed")

    truth_map = spec.truth()
    names = list(truth_map)
    truth = np.array([truth_map[nm] for nm in names])
    est = np.vstack([d["estimate"] for d in ok])
    se = np.vstack([d["se"] for d in ok])
    rows = _summarize(names, truth, est, se)

    k = S.k
    out_names = [nm for nm in names if nm.startswith(("alpha", "beta"))]
    out_truth = np.array([truth_map[nm] for nm in out_names])
    comp_rows = []
    for key in ("ols", "2sls"):
        ce = np.vstack([d[key] for d in ok])
        cs = np.vstack([d[f"{key}_se"] for d in ok])
        for row in _summarize(out_names, out_truth, ce, cs):
            row["estimator"] = key
            comp_rows.append(row)
    for row in _summarize(out_names, out_truth, est[:, k + 2:k + 2 + 4 * k], se[:, k + 2:k + 2 + 4 * k]):
        row["estimator"] = "control_function"
        comp_rows.append(row)

    draws = {
        "names": names,
        "estimate": est,
        "se": se,
        "naive_se": np.vstack([d["naive_se"] for d in ok]),
        "min_eig": np.array([d["min_eig"] for d in ok]),
        "ols": np.vstack([d["ols"] for d in ok]),
        "2sls": np.vstack([d["2sls"] for d in ok]),
        "takeup": np.array([d["takeup"] for d in ok]),
        "theta3_at_cap": np.array([d["theta3_at_cap"] for d in ok]),
        "reps": np.array([d["rep"] for d in ok]),
    }
    return McResult(rows, reps, failures, comp_rows, draws, fp,
                    float(np.mean(draws["takeup"])))


def with_loadings(spec: DgpSpec, loadings) -> DgpSpec:
    return replace(spec, loadings=tuple(loadings))
