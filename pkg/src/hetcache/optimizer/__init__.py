from .baselines import (
    PREFERENCE_MODES,
    BaselineError,
    UserPositions,
    greedy_placement,
    policy_femtocaching,
    policy_local_pop,
    policy_pop,
    sample_user_positions,
)
from .gp import GpSolveError, solve_barrier
from .oracle import OracleError, OracleResult, brute_force_policy, deterministic_oracle, grid_lp_oracle
from .solve import CachingPolicy, PolicyError, SolveResult, SolverTrace, solve_p0
from .sp import SpError, SpProblem, build_sp

__all__ = [
    "BaselineError",
    "CachingPolicy",
    "GpSolveError",
    "OracleError",
    "OracleResult",
    "PREFERENCE_MODES",
    "PolicyError",
    "SolveResult",
    "SolverTrace",
    "SpError",
    "SpProblem",
    "UserPositions",
    "brute_force_policy",
    "build_sp",
    "deterministic_oracle",
    "greedy_placement",
    "grid_lp_oracle",
    "policy_femtocaching",
    "policy_local_pop",
    "policy_pop",
    "sample_user_positions",
    "solve_barrier",
    "solve_p0",
]
