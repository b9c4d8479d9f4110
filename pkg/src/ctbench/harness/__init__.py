"""Experiment harness: phantoms, file formats, plans, tuning, CLI."""

from .benchmark import (
    CSV_COLUMNS,
    ExperimentPlan,
    MethodSpec,
    default_detector_count,
    plan_from_sections,
    resolve_config,
    resolve_method,
    run_benchmark,
    run_cell,
)
from .configfmt import (
    ConfigError,
    apply_overrides,
    parse_config,
    parse_config_text,
)
from .phantoms import (
    PHANTOM_KINDS,
    generate_phantom,
    phantom_ellipses,
    rasterize_ellipses,
)
from .rawio import RawFormatError, load_raw, save_raw
from .tuning import TuningResult, expand_grid, grid_search, holdout_phantoms

__all__ = [
    "CSV_COLUMNS",
    "ExperimentPlan",
    "MethodSpec",
    "default_detector_count",
    "plan_from_sections",
    "resolve_config",
    "resolve_method",
    "run_benchmark",
    "run_cell",
    "ConfigError",
    "apply_overrides",
    "parse_config",
    "parse_config_text",
    "PHANTOM_KINDS",
    "generate_phantom",
    "phantom_ellipses",
    "rasterize_ellipses",
    "RawFormatError",
    "load_raw",
    "save_raw",
    "TuningResult",
    "expand_grid",
    "grid_search",
    "holdout_phantoms",
]
