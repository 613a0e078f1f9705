"""Terminal ingredients and quasi-infinite-horizon NMPC for continuous-time systems.

Three ways to build the terminal penalty ``x'Px`` and region
``{x : x'Px <= alpha}`` around an equilibrium are provided (a shifted
Lyapunov design, an arbitrary stabilizing controller, and an inflated LQR),
together with region characterization and a receding-horizon simulator for
the two-state CSTR benchmark.
"""

from .model import (CstrParams, DivergenceError, LinearizedModel, ModelError, NonlinearModel,
                    get_model, integrate, linearize, make_cstr, make_linear_test)
from .ocp import (ClosedLoopTrace, HorizonScan, OCPProblem, OCPSolution, SolverSettings,
                  min_horizon, receding_horizon, solve_ocp)
from .region import (NonlinearityGap, RegionError, SearchSettings, TerminalRegion,
                     alpha_inequality_based, alpha_norm_based, characterize, compute_gamma,
                     region_area, sweep)
from .synthesis import (CSTR_WEIGHTS, SynthesisError, SynthesisResult, Tuning, Weights,
                        solve_care, solve_lyapunov, stabilizing_gain, synthesize)

__version__ = "0.1.0"
