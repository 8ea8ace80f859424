"""Multi-task optimization lab: aggregators, momentum optimizers and diagnostics."""
from .aggregators import (AGGREGATORS, AggregationResult, LdpConfig, TaskGradients, aggregate,
                          cagrad, cosine, ldp, ls_aggregate, mgda, pcgrad)
from .diagnostics import (BenchmarkScores, delta_m, effective_rank, mean_rank,
                          muon_projection_pair, projection_profile, similarity_profile,
                          step_diagnostics)
from .errors import (ConfigError, DegeneratePolarError, InvalidInputError, NumericalFailure,
                     UndefinedCosineError, UndefinedRankError, ZeroGradientError)
from .harness import RunConfig, pareto_check, run, sweep_beta
from .linalg import Simplex, min_norm_simplex, newton_schulz, polar_factor, project_simplex, svd
from .optimizers import (MomentumBounds, Optimizer, OptimizerConfig, TrackingMonitor,
                         adaptive_beta, tracking_bound_constant)
from .problems import (PROBLEMS, ProblemSpec, eval_tasks, make_conflict_ensemble, make_problem,
                       make_toy2d, pareto_stationarity)

__version__ = "0.1.0"
