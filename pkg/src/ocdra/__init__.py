"""Online allocation with concave diminishing-returns valuations.

Valuations are expression trees (``valuation``); ``transform`` builds the
auxiliary function U used by the balanced continuous greedy in ``engine``,
which also emits a dual certificate of its competitive ratio.
"""

from .checks import CDRReport, check_cdr
from .engine import (AllocationState, DualCertificate, RunReport, Verdict, dual_upper_bound,
                     run_online, verify_certificate)
from .errors import *  # noqa: F401,F403
from .instances import Arrival, Instance, generate, load, loads, save
from .offline import OptEstimate, frank_wolfe, grid_brute_force
from .polymatroid import (CardinalityCap, ExplicitTable, PartitionRank, RankOracle, WeightedCoverage,
                          lovasz, pm_grad, pm_value, tight_set)
from .quadrature import QuadratureScheme
from .transform import (GAMMA, UTransform, balanced_check, fhat_at_fgrad, fhat_numeric,
                        fhat_upper_at_ugrad, u_eval, u_grad)
from .valuation import (BudgetAdditive, Cap, Compose, ConcaveScalar, ExpSat, LinTransform, Linear,
                        Log1p, PiecewiseLinear, Polymatroid, Pow, RawValuation, ScalarConcave, Sum,
                        ValuationExpr, construct, evaluate, from_json, gradient, restrict, to_json)

__version__ = "0.1.0"
