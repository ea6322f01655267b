"""Batch Bayesian optimization with Sharpe-ratio portfolio allocation.

Gaussian-process surrogates with native replication support feed an
exploration/exploitation front search; surviving candidates become
assets of a hypervolume-based market whose tangency portfolio decides
the evaluation batch. Works for one to three objectives, with or
without heteroskedastic evaluation noise.
"""

from .acquisition import (
    Candidate,
    expected_improvement,
    generalized_ei,
    mc_qei,
    probability_non_domination,
    tradeoff_front_search,
)
from .driver import (
    ExperimentConfig,
    ExperimentTrace,
    aggregate,
    initial_design,
    run_experiment,
    run_macro,
)
from .gp import (
    DesignSet,
    GpFitError,
    GpModel,
    KernelSpec,
    fit,
    make_model,
    predict,
    variance_reduction,
)
from .pareto import (
    FrontArchive,
    dominates,
    hypervolume,
    non_dominated_filter,
    nsga2,
)
from .portfolio import (
    AssetSet,
    BatchAllocation,
    SharpeSolution,
    allocate,
    build_assets,
    qhsri_select,
    solve_sharpe,
)
from .problems import Problem, get_problem, repeat_problem, with_noise

__version__ = "0.1.0"
