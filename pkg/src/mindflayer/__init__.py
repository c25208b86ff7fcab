"""Virtual-clock simulation of parallel SGD under random, possibly infinite, compute times."""

__version__ = "0.1.0"

from .timemodel import (  # noqa: E402
    ClusterModel,
    Constant,
    InfBernoulli,
    LogCauchy,
    Lognormal,
    LogT,
    WorkerProfile,
    make_cluster,
)
from .problems import quad_problem, hetero_quad_family  # noqa: E402
from .planner import mindflayer_plan, vecna_plan  # noqa: E402
from .engine import RunConfig, run_asgd, run_mindflayer, run_minibatch, run_rennala, run_vecna  # noqa: E402

__all__ = [
    "ClusterModel",
    "Constant",
    "InfBernoulli",
    "LogCauchy",
    "LogT",
    "Lognormal",
    "RunConfig",
    "WorkerProfile",
    "__version__",
    "hetero_quad_family",
    "make_cluster",
    "mindflayer_plan",
    "quad_problem",
    "run_asgd",
    "run_minibatch",
    "run_mindflayer",
    "run_rennala",
    "run_vecna",
    "vecna_plan",
]
