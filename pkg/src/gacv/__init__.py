"""Grouped approximate control variate estimators for multifidelity Monte Carlo.

Build arbitrary model groupings with shared, nested, or disjoint sample
sets, assemble the estimator covariance, compute variance-optimal unbiased
weights, convert independent-group allocations into equivalent nested
designs, optimize allocations under a cost budget, and validate every
analytic variance against simulation.
"""

from .allocation import (
    AllocationResult,
    SaobScheme,
    group_costs,
    mlblue_allocation_variance,
    model_eval_counts_mlblue,
    nested_conversion,
    nested_sample_design,
    optimize_mlblue_allocation,
    saob_groups,
    total_cost,
)
from .covariance import (
    BlockCovariance,
    IndexSet,
    ModelEnsembleSpec,
    SampleDesign,
    assemble_block_covariance,
    independent_block_covariance,
    is_optimizable,
    overlap_counts,
    spd_check,
)
from .grouping import (
    GroupScheme,
    inverse_index,
    lex_multi_index,
    restriction_matrix,
    stack_restrictions,
    zero_fill,
)
from .simulate import (
    GaussianEnsemble,
    MomentSummary,
    draw_stream,
    empirical_moments,
    random_problem,
    realize_gacv,
    replicate_rng,
)
from .weights import (
    AcvDecomposition,
    DegenerateDesignError,
    IllConditionedWarning,
    InfeasibleConstraintError,
    WeightSet,
    acv_decomposition,
    check_unbiased,
    ensemble_acv_weights,
    estimator_variance,
    independent_optimal_weights,
    mlblue_optimal_weights,
    optimal_variance,
    optimal_weights,
)

__version__ = "0.1.0"
