"""Nested variance-reduced stochastic optimization with curvature-certified
local-minimum search.

The package splits into oracle definitions (:mod:`nestvr.problems`), the
nested loop/batch schedule (:mod:`nestvr.schedule`), the single-epoch engine
(:mod:`nestvr.epoch`), first-order negative-curvature search
(:mod:`nestvr.ncfinder`), the outer drivers and their configuration formulas
(:mod:`nestvr.driver`), and the experiment harness / CLI
(:mod:`nestvr.harness`).
"""

from .driver import (
    DriverConfig,
    DriverOutcome,
    PointClassification,
    RunTrace,
    TraceEvent,
    boost,
    classify_point,
    config_finite_2nd,
    config_finite_3rd,
    config_online_2nd,
    config_online_3rd,
    nc_descent_step,
    run_driver,
    run_finite,
    run_online,
)
from .epoch import (
    EpochResult,
    EpochState,
    draw_epoch_length,
    reset_level,
    run_epoch,
    update_reference_gradients,
    update_reference_points,
)
from .ncfinder import (
    NCQuery,
    NCResult,
    find_nc_direction_finite,
    find_nc_direction_online,
    hvp_estimate,
    rayleigh,
)
from .problems import (
    FiniteSumProblem,
    GradCounter,
    SmoothnessSpec,
    StreamingProblem,
    make_quadratic_problem,
    make_regularized_problem,
    make_rng,
    make_saddle_problem,
    make_streaming_quadratic_problem,
    make_streaming_saddle_problem,
    minibatch_gradient,
    sample_indices_without_replacement,
    spawn_rngs,
)
from .schedule import (
    DampingSeries,
    NestedSchedule,
    check_series_domination,
    clamp_schedule,
    damping_series,
    derive_schedule,
    exact_expected_epoch_cost,
    expected_epoch_cost,
)

__version__ = "0.1.0"

__all__ = [
    "DriverConfig",
    "DriverOutcome",
    "PointClassification",
    "RunTrace",
    "TraceEvent",
    "boost",
    "classify_point",
    "config_finite_2nd",
    "config_finite_3rd",
    "config_online_2nd",
    "config_online_3rd",
    "nc_descent_step",
    "run_driver",
    "run_finite",
    "run_online",
    "EpochResult",
    "EpochState",
    "draw_epoch_length",
    "reset_level",
    "run_epoch",
    "update_reference_gradients",
    "update_reference_points",
    "NCQuery",
    "NCResult",
    "find_nc_direction_finite",
    "find_nc_direction_online",
    "hvp_estimate",
    "rayleigh",
    "FiniteSumProblem",
    "GradCounter",
    "SmoothnessSpec",
    "StreamingProblem",
    "make_quadratic_problem",
    "make_regularized_problem",
    "make_rng",
    "make_saddle_problem",
    "make_streaming_quadratic_problem",
    "make_streaming_saddle_problem",
    "minibatch_gradient",
    "sample_indices_without_replacement",
    "spawn_rngs",
    "DampingSeries",
    "NestedSchedule",
    "check_series_domination",
    "clamp_schedule",
    "damping_series",
    "derive_schedule",
    "exact_expected_epoch_cost",
    "expected_epoch_cost",
]
