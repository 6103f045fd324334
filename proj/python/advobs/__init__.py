"""Python bindings for the advobs core library."""

from ._core import (
    ConfigError,
    ShapeMismatch,
    analytic_miss_probability,
    analytic_power,
    audit,
    channel_moments,
    chi_square_test,
    default_config,
    effective_epsilon,
    min_budget_search,
    monte_carlo_power,
    project,
    run_ablate,
    run_attack,
    run_detect,
    run_report,
    run_simulate,
    run_sweep,
    run_train,
    simulate,
    step_size,
    variable_names,
)

__all__ = [name for name in dir() if not name.startswith("_")]
