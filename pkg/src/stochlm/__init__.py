"""Stochastic Levenberg-Marquardt with noisy estimates and random models,
plus an ensemble 4DVAR application on Lorenz-63."""

from .core import (DegenerateSubproblemError, IterationRecord, ModelSnapshot,
                   NonFiniteModelError, RunTrace, SolverConfig, SolverState,
                   apply_update, build_model, compute_rho, model_value, run)
from .diagnostics import (ComplexityEstimate, TheoryConstants,
                          check_probability_conditions, estimate_T_epsilon,
                          phi, phi_decrease_check, stopping_time_bound,
                          track_events)
from .oracles import (AccuracyConstants, BernoulliOracle, ExactOracle,
                      GaussianOracle, OracleOutput, SubsampleOracle,
                      bernoulli_oracle, exact_oracle, gaussian_oracle,
                      subsample_oracle)
from .problems import (BlockLinearLeastSquares, LinearLeastSquares,
                       ResidualProblem)
from .subproblem import (StepContract, cauchy_point, solve_cg, solve_exact,
                         spectral_norm)

__version__ = "0.1.0"

__all__ = [
    "AccuracyConstants", "BernoulliOracle", "BlockLinearLeastSquares",
    "ComplexityEstimate", "DegenerateSubproblemError", "ExactOracle",
    "GaussianOracle", "IterationRecord", "LinearLeastSquares",
    "ModelSnapshot", "NonFiniteModelError", "OracleOutput",
    "ResidualProblem", "RunTrace", "SolverConfig", "SolverState",
    "StepContract", "TheoryConstants", "apply_update", "bernoulli_oracle",
    "build_model", "cauchy_point", "check_probability_conditions",
    "compute_rho", "estimate_T_epsilon", "exact_oracle", "gaussian_oracle",
    "model_value", "phi", "phi_decrease_check", "run", "solve_cg",
    "solve_exact", "spectral_norm", "subsample_oracle", "stopping_time_bound",
    "track_events",
]
