"""Group-sequential design and inference when covariate adjustment is mixed in.

Interim looks may use the unadjusted (ANOVA) treatment-effect statistic while
the final or post-stopping analysis uses the covariate-adjusted (ANCOVA) one.
The package computes boundaries that keep the type I error at its nominal
level in that situation, p-values, confidence intervals and median-unbiased
estimates that account for it, and a Monte Carlo engine to study both.
"""

from .boundaries import (
    BoundarySet,
    BoundaryShape,
    SpendingFunction,
    SpendingKind,
    SpendingState,
    design_boundaries,
    next_boundary,
    spend_alpha,
    spending_boundaries,
)
from .covariance import (
    AnalysisSchedule,
    JointCovariance,
    Method,
    StagePlan,
    StatLabel,
    full_joint,
    mean_shift,
    select_schedule,
)
from .errors import (
    BracketError,
    DimensionMismatch,
    GSTError,
    NotPositiveSemidefinite,
    NumericalError,
    RankDeficientDesign,
    ValidationError,
)
from .estimators import (
    FitResult,
    RhoEstimate,
    SubjectRecord,
    TrialData,
    estimate_rho,
    fit_ancova,
    fit_anova,
    influence_values,
    read_trial_csv,
    write_trial_csv,
    standardized_stat,
)
from .inference import (
    Direction,
    InferenceResult,
    Ordering,
    StatisticModel,
    StatisticPath,
    StopReason,
    adjusted_pvalue,
    analyze,
    confidence_interval,
    exceedance_prob,
    median_unbiased_estimate,
    wald_result,
)
from .mvn import Box, Look, cholesky, crossing_probs, rect_prob, union_reject_prob
from .simulation import (
    GeneratorConfig,
    ScenarioKind,
    ScenarioSpec,
    SimReport,
    aggregate,
    cell_boundaries,
    generate_trial,
    run_cell,
    run_scenario,
)

__version__ = "0.1.0"
