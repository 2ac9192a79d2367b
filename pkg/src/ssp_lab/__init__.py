"""Online learning for stochastic shortest path with adversarial costs."""
from .errors import (DivisionHazard, ImproperPolicy, InfeasibleFloor,
                     InvalidCost, MdpFormatError, NoProperPolicy,
                     ParameterViolation, SolverFailure, SspError)
from .mdp import (EpisodeTrace, ExecutionPolicy, SspMdp, best_fixed_policy,
                  compute_cost_to_go, compute_fast_policy,
                  compute_hitting_times, simulate_episode)

__version__ = "0.1.0"
