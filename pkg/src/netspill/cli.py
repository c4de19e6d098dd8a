"""Command-line front end.

Subcommands ``simulate``, ``estimate``, ``effects``, ``predict`` and ``mc``
read CSV inputs (or an INI config whose keys mirror the long flag names) and
write CSV/JSON outputs plus a ``manifest.json`` describing the run.  Flags on
the command line override config keys.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .counterfactual import (PolicyRule, default_tau_grid, fit_no_interference,
                             predict_mean_outcome, sweep_threshold)
from .effects import effect_curves, first_stage_marginal_effects
from .equilibrium import GameParams, PublicState, param_names
from .errors import NetspillError
from .firststage import fit_first_stage
from .network import (build_radius_graph, load_coordinates, load_covariates, load_edge_list,
                      load_vector, remove_isolated, write_edge_list)
from .secondstage import estimate_second_stage
from .simulate import (DgpSpec, build_state, generate_data, generate_geometric_network,
                       run_monte_carlo)

log = logging.getLogger("netspill")

EXIT_ERROR = 1
EXIT_USAGE = 2


class MissingFile(Exception):
    def __init__(self, path):
        self.path = path
        super().__init__(f"file not found: {path}")


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path):
    if path is None:
        return None
    p = Path(path)
    if not p.is_file():
        raise MissingFile(p)
    return p


# ---------------------------------------------------------------------------
# inputs

INPUT_KEYS = ("edges", "coords", "covariates", "assignment", "choice", "outcome")


def load_inputs(args, need_outcome=True):
    """Build the public state and observed vectors from the input flags.

    Returns ``(S, D, Y, ids)`` where ``ids`` maps rows back to input ids after
    isolated agents are dropped.
    """
    paths = {k: _require(getattr(args, k, None)) for k in INPUT_KEYS}
    if paths["assignment"] is None:
        raise NetspillError("--assignment is required")
    if paths["choice"] is None:
        raise NetspillError("--choice is required")
    if need_outcome and paths["outcome"] is None:
        raise NetspillError("--outcome is required")
    Z = load_vector(paths["assignment"])
    n = Z.size
    D = load_vector(paths["choice"])
    Y = load_vector(paths["outcome"]) if paths["outcome"] else np.zeros(n)
    if paths["covariates"] is not None:
        names, extra = load_covariates(paths["covariates"])
    else:
        names, extra = [], np.empty((n, 0))
    for nm, v in (("covariates", extra), ("choice", D), ("outcome", Y)):
        if len(v) != n:
            raise NetspillError(f"row counts differ: assignment has {n}, {nm} has {len(v)}")
    X = np.column_stack([np.ones(n), extra])
    x_names = ["const"] + list(names)
    if paths["edges"] is not None:
        net = load_edge_list(paths["edges"], n=n)
    elif paths["coords"] is not None:
        if args.radius is None:
            raise NetspillError("--coords needs --radius")
        net = build_radius_graph(load_coordinates(paths["coords"]), float(args.radius))
    else:
        raise NetspillError("either --edges or --coords/--radius is required")
    if net.n != n:
        raise NetspillError(f"row counts differ: assignment has {n}, network has {net.n}")
    ids = np.arange(n)
    net, (X, Z, D, Y, ids), dropped = remove_isolated(net, X, Z, D, Y, ids)
    if dropped.size:
        log.warning("dropped %d isolated agent(s): %s", dropped.size, dropped.tolist()[:20])
    S = PublicState(net, X, Z, x_names)
    return S, D, Y, ids, paths, dropped


def _fit(args, S, D, Y, second=True):
    fs = fit_first_stage(S, D, unique_mode=not args.allow_nonunique)
    ss = estimate_second_stage(S, D, Y, fs, cf_order=args.cf_order) if second else None
    return fs, ss


# ---------------------------------------------------------------------------
# manifest

def _options(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def write_manifest(out: Path, args, inputs: dict, outputs: list, extra=None):
    opts = _options(args)
    blob = json.dumps(opts, sort_keys=True, default=_json_default).encode()
    manifest = {
        "command": args.command,
        "options": opts,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items() if p},
        "outputs": {name: _sha256(out / name) for name in outputs},
        "versions": {"netspill": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands

def _theta_rows(S, fs):
    names = param_names(S.x_names)
    return [(nm, e, s) for nm, e, s in zip(names, fs.theta_hat.as_vector(), fs.std_errors)]


def _gamma_rows(ss):
    rows = []
    for arm, g in ((1, ss.gamma1), (0, ss.gamma0)):
        vec = g.as_vector(ss.spillover)
        for nm, e, s, ns in zip(ss.names, vec, ss.se(arm), ss.se(arm, corrected=False)):
            rows.append((arm, nm, e, s, ns))
    return rows


def cmd_estimate(args) -> int:
    S, D, Y, ids, paths, dropped = load_inputs(args, need_outcome=not args.first_stage_only)
    out = _outdir(args)
    fs, ss = _fit(args, S, D, Y, second=not args.first_stage_only)
    outputs = ["theta_hat.csv", "equilibrium.csv", "fit.json"]
    write_csv(out / "theta_hat.csv", ["parameter", "estimate", "se"], _theta_rows(S, fs))
    eq = fs.equilibrium
    write_csv(out / "equilibrium.csv", ["id", "sigma", "pi"], zip(ids, eq.sigma, eq.pi))
    me = first_stage_marginal_effects(S, fs.theta_hat, eq)
    info = {
        "n": S.n,
        "dropped_isolated": dropped.tolist(),
        "mean_degree": float(S.net.degrees.mean()),
        "loglik": fs.loglik,
        "newton_iterations": fs.newton_iters,
        "lambda": fs.lambda_hat,
        "uniqueness_cap_touched": fs.constraint_bound,
        "equilibrium_iterations": eq.iterations,
        "takeup_rate": float(D.mean()),
        "marginal_effects": dict(zip(param_names(S.x_names), me.tolist())),
    }
    if ss is not None:
        write_csv(out / "gamma_hat.csv", ["arm", "regressor", "estimate", "se", "naive_se"],
                  _gamma_rows(ss))
        outputs.insert(1, "gamma_hat.csv")
        info.update({"cf_order": ss.cf_order, "mills_clamped": ss.clamp_count,
                     "mean_fitted_outcome": ss.fitted_mean})
    write_json(out / "fit.json", info)
    write_manifest(out, args, paths, outputs)
    return 0


def cmd_effects(args) -> int:
    S, D, Y, ids, paths, _ = load_inputs(args)
    out = _outdir(args)
    fs, ss = _fit(args, S, D, Y)
    grid = np.round(np.arange(0.0, 1.0 + 1e-9, args.grid_step), 12)
    grid = grid[grid <= 1.0]
    curves = effect_curves(ss, mu_X=S.X.mean(axis=0), grid=grid, pi_base=args.pi_base)
    write_csv(out / "ade_curve.csv", ["pi", "estimate", "se"],
              zip(grid, curves["ADE"].values, curves["ADE"].se))
    rows = []
    for arm in (1, 0):
        c = curves[f"ASE{arm}"]
        rows += [(arm, args.pi_base, p, v, s) for p, v, s in zip(grid, c.values, c.se)]
    write_csv(out / "ase_curve.csv", ["arm", "pi_base", "pi", "estimate", "se"], rows)
    rows = []
    for arm in (1, 0):
        c = curves[f"APO{arm}"]
        rows += [(arm, p, v, s) for p, v, s in zip(grid, c.values, c.se)]
    write_csv(out / "apo_curves.csv", ["arm", "pi", "estimate", "se"], rows)
    write_manifest(out, args, paths, ["ade_curve.csv", "ase_curve.csv", "apo_curves.csv"])
    return 0


def cmd_predict(args) -> int:
    if not args.sweep and not args.rule:
        raise NetspillError("predict needs --rule NAME<=TAU or --sweep")
    S, D, Y, ids, paths, _ = load_inputs(args)
    out = _outdir(args)
    fs, ss = _fit(args, S, D, Y)
    f0, s0 = fit_no_interference(S, D, Y, cf_order=args.cf_order)
    solve_kw = {"allow_nonunique": args.allow_nonunique}
    if args.sweep:
        covariate = args.covariate or (PolicyRule.parse(args.rule).covariate if args.rule else None)
        if covariate is None:
            raise NetspillError("--sweep needs --covariate")
        taus = default_tau_grid(S, covariate)
    else:
        rule = PolicyRule.parse(args.rule)
        covariate, taus = rule.covariate, np.array([rule.tau])
    with_int = sweep_threshold(S, fs.theta_hat, ss, covariate, taus, "with-interference",
                               args.paper_literal, **solve_kw)
    no_int = sweep_threshold(S, f0.theta_hat, s0, covariate, taus, "no-interference",
                             args.paper_literal)
    rows = [(a.tau, a.mean_outcome, b.mean_outcome, a.treated_share, a.mean_sigma, a.mean_pi)
            for a, b in zip(with_int, no_int)]
    write_csv(out / "policy_curve.csv",
              ["tau", "mean_outcome_interference", "mean_outcome_no_interference",
               "treated_share", "mean_sigma", "mean_pi"], rows)
    factual = predict_mean_outcome(S, fs.theta_hat, ss, paper_literal=args.paper_literal,
                                   **solve_kw)
    write_manifest(out, args, paths, ["policy_curve.csv"],
                   {"factual_mean_outcome": factual.mean_outcome, "covariate": covariate})
    return 0


def _parse_floats(text):
    return tuple(float(t) for t in str(text).replace(";", ",").split(",") if t.strip())


def dgp_from_args(args) -> DgpSpec:
    spec = DgpSpec()
    changes = {}
    for key in ("alpha1", "beta1", "alpha0", "beta0", "loadings"):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = _parse_floats(val)
    for key, cast in (("noise_sd", float), ("n", int), ("radius", float),
                      ("target_degree", float), ("z_prob", float), ("n_covariates", int),
                      ("cf_order", int), ("seed", int)):
        val = getattr(args, key, None)
        if val is not None:
            changes[key] = cast(val)
    if args.theta is not None:
        t = _parse_floats(args.theta)
        changes["theta0"] = GameParams(t[:-2], t[-2], t[-1])
    return replace(spec, **changes)


def cmd_simulate(args) -> int:
    spec = dgp_from_args(args)
    out = _outdir(args)
    net, coords = generate_geometric_network(spec.n, spec.radius, spec.seed, spec.target_degree)
    S = build_state(spec, net=net)
    data = generate_data(S, spec, args.rep)
    write_edge_list(S.net, out / "edges.csv")
    ids = np.arange(S.n)
    write_csv(out / "coords.csv", ["id", "x", "y"], ([i, x, y] for i, (x, y) in zip(ids, coords)))
    write_csv(out / "assignment.csv", ["id", "Z"], zip(ids, S.Z))
    write_csv(out / "choice.csv", ["id", "D"], zip(ids, data.D))
    write_csv(out / "outcome.csv", ["id", "Y"], zip(ids, data.Y))
    outputs = ["edges.csv", "coords.csv", "assignment.csv", "choice.csv", "outcome.csv", "truth.json"]
    if spec.n_covariates:
        write_csv(out / "covariates.csv", ["id"] + list(S.x_names[1:]),
                  ([i] + list(row) for i, row in zip(ids, S.X[:, 1:])))
        outputs.append("covariates.csv")
    write_json(out / "truth.json", {"parameters": spec.truth(), "n": S.n,
                                    "mean_degree": float(S.net.degrees.mean()),
                                    "mean_sigma": float(data.sigma.mean())})
    write_manifest(out, args, {}, outputs)
    return 0


MC_COLUMNS = ["parameter", "truth", "mean_estimate", "bias", "mc_se", "mean_se", "emp_sd",
              "coverage"]


def cmd_mc(args) -> int:
    spec = dgp_from_args(args)
    out = _outdir(args)
    reps = 3000 if args.full_reps else args.reps
    res = run_monte_carlo(spec, reps=reps, workers=args.workers)
    keys = ["name", "truth", "mean_estimate", "bias", "mc_se", "mean_se", "emp_sd", "coverage"]
    write_csv(out / "mc_table.csv", MC_COLUMNS + ["reps", "failures"],
              ([r[k] for k in keys] + [reps - res.n_failures, res.n_failures] for r in res.rows))
    write_csv(out / "comparators.csv", ["estimator"] + MC_COLUMNS + ["bias_over_mc_se"],
              ([r["estimator"]] + [r[k] for k in keys]
               + [r["bias"] / r["mc_se"] if r["mc_se"] > 0 else float("nan")]
               for r in res.comparator_rows))
    write_manifest(out, args, {}, ["mc_table.csv", "comparators.csv"],
                   {"state_fingerprint": res.state_fingerprint,
                    "failures": [list(f) for f in res.failures],
                    "mean_takeup": res.mean_takeup})
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_inputs(p):
    g = p.add_argument_group("inputs")
    g.add_argument("--edges", help="edge list CSV (i,j per line)")
    g.add_argument("--coords", help="coordinates CSV (id,x,y); used with --radius")
    g.add_argument("--radius", type=float, help="connection radius for --coords")
    g.add_argument("--covariates", help="covariates CSV (id,<name>...); intercept is added")
    g.add_argument("--assignment", help="assignment CSV (id,Z)")
    g.add_argument("--choice", help="take-up CSV (id,D)")
    g.add_argument("--outcome", help="outcome CSV (id,Y)")


def _add_model(p):
    p.add_argument("--cf-order", type=int, choices=(1, 2), default=1)
    p.add_argument("--allow-nonunique", action="store_true",
                   help="let the spillover coefficient leave the uniqueness region")


def _add_dgp(p):
    g = p.add_argument_group("data generating process")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int, help="points drawn before isolated nodes are removed")
    g.add_argument("--radius", type=float)
    g.add_argument("--target-degree", type=float)
    g.add_argument("--z-prob", type=float)
    g.add_argument("--n-covariates", type=int)
    g.add_argument("--theta", help="theta1...,theta2,theta3 as a comma list")
    g.add_argument("--alpha1")
    g.add_argument("--beta1")
    g.add_argument("--alpha0")
    g.add_argument("--beta0")
    g.add_argument("--loadings", help="four loadings on v, comma separated")
    g.add_argument("--noise-sd", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="netspill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI file; keys mirror long flag names")
        p.add_argument("--out", help="output directory (required)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(func=func)
        return p

    p = add("estimate", cmd_estimate, "fit both stages and write estimates")
    _add_inputs(p)
    _add_model(p)
    p.add_argument("--first-stage-only", action="store_true")

    p = add("effects", cmd_effects, "write ADE/ASE/APO curves")
    _add_inputs(p)
    _add_model(p)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--pi-base", type=float, default=0.0,
                   help="reference score for spillover curves")

    p = add("predict", cmd_predict, "predict outcomes under threshold rules")
    _add_inputs(p)
    _add_model(p)
    p.add_argument("--rule", help="assignment rule NAME<=TAU")
    p.add_argument("--sweep", action="store_true", help="sweep TAU over quantiles 0,5,...,100")
    p.add_argument("--covariate", help="policy covariate for --sweep")
    p.add_argument("--paper-literal", action="store_true",
                   help="unit weights on the control-function terms in predictions")

    p = add("simulate", cmd_simulate, "write a synthetic dataset")
    _add_dgp(p)
    p.add_argument("--rep", type=int, default=0, help="replication stream to draw from")

    p = add("mc", cmd_mc, "run the Monte Carlo experiment")
    p.add_argument("--spec", dest="config", help="alias of --config")
    _add_dgp(p)
    p.add_argument("--cf-order", type=int, choices=(1, 2))
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--full-reps", action="store_true", help="run 3000 replications")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _config_defaults(subparser, path) -> dict:
    """Flatten every INI section into ``dest -> typed value``."""
    p = _require(path)
    cp = configparser.ConfigParser()
    cp.read(p)
    actions = {a.dest: a for a in subparser._actions}
    out = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions or dest in ("config", "func"):
                raise NetspillError(f"{p}: unknown config key {key!r} in [{section}]")
            act = actions[dest]
            if isinstance(act, argparse._StoreTrueAction):
                out[dest] = cp.getboolean(section, key)
            else:
                val = act.type(raw) if act.type else raw
                if act.choices is not None and val not in act.choices:
                    raise NetspillError(f"{p}: {key}={raw} not in {list(act.choices)}")
                out[dest] = val
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[args.command]
            sub.set_defaults(**_config_defaults(sub, args.config))
            args = parser.parse_args(argv)
        if not args.out:
            parser.error("--out is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s: %(message)s")
        return args.func(args)
    except MissingFile as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NetspillError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
