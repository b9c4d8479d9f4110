"""Parallel-beam CT simulation, reconstruction, and benchmarking toolkit."""

from .analysis import (
    DecompositionResult,
    MetricsReport,
    compute_metrics,
    null_space_component,
    psnr,
    ssim,
    uncertainty_map,
)
from .grids import ImageGrid, ProjectionGeometry, Sinogram, parallel_geometry
from .guidance import (
    GuidanceDivergence,
    GuidanceSpec,
    Trajectory,
    sample_reconstruct,
)
from .mbir import SolveHistory, TVSpec, admm_tv, fista_tv
from .operators import (
    Ellipse,
    Projector,
    analytic_ellipse_sinogram,
    back_project,
    cg_solve_regularized,
    fbp_reconstruct,
    forward_project,
    sirt_reconstruct,
    spectral_norm_sq,
)
from .priors import (
    CallableScorePrior,
    GaussianMixturePrior,
    GaussianPrior,
    NoiseSchedule,
    analytic_posterior,
    linear_beta_schedule,
)
from .simulate import (
    BUILTIN_CONFIG_IDS,
    SimulationConfig,
    SimulationInfo,
    builtin_config,
    simulate_measurement,
)

__version__ = "0.1.0"
