"""Treatment effects with network spillovers and noncompliance.

Agents choose take-up in a binary game of incomplete information on a known
network; outcomes depend on own take-up and the neighborhood score.  The
package estimates the game by nested fixed-point likelihood, the outcome
equations by control-function regressions, and derives effect curves and
counterfactual policy predictions.
"""

from .equilibrium import (Equilibrium, GameParams, PublicState, grad_sigma,
                          solve_equilibrium, uniqueness_margin)
from .errors import (ConvergenceError, IdentificationError, NetspillError, ParseError,
                     UniquenessError, ValidationError)
from .firststage import FirstStageFit, fit_first_stage, loglik, score
from .network import Network, build_radius_graph, load_edge_list, remove_isolated
from .secondstage import OutcomeParams, SecondStageFit, estimate_second_stage

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError", "Equilibrium", "FirstStageFit", "GameParams", "IdentificationError",
    "NetspillError", "Network", "OutcomeParams", "ParseError", "PublicState", "SecondStageFit",
    "UniquenessError", "ValidationError", "build_radius_graph", "estimate_second_stage",
    "fit_first_stage", "grad_sigma", "load_edge_list", "loglik", "remove_isolated", "score",
    "solve_equilibrium", "uniqueness_margin",
]
