"""Reconstruction analysis: null-space splitting, image metrics, ensembles."""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import scipy.signal

from .grids import ImageGrid, ProjectionGeometry, Sinogram
from .operators import Projector

__all__ = [
    "DecompositionResult",
    "MetricsReport",
    "null_space_component",
    "psnr",
    "ssim",
    "compute_metrics",
    "uncertainty_map",
]


@dataclasses.dataclass
class DecompositionResult:
    """Split of an image into measurable and invisible parts.

    ``x_null`` is stored as the bit-exact complement ``image - x_range`` (so
    ``x_range + x_null`` reproduces the input to within one ulp) and is
    (numerically) invisible to the projector.  ``null_energy_fraction`` is
    ``||x_null||^2 / ||x||^2``; ``final_residual`` is ``||A x_null||``.
    """

    x_range: ImageGrid
    x_null: ImageGrid
    null_energy_fraction: float
    iterations_used: int
    final_residual: float


@dataclasses.dataclass
class MetricsReport:
    """PSNR/SSIM pair plus optional sinogram misfit.

    ``value_range_used`` records the reference dynamic range that both PSNR
    and SSIM were normalized by.
    """

    psnr: float
    ssim: float
    data_fit: float | None
    value_range_used: float


def null_space_component(
    image: ImageGrid | np.ndarray,
    geometry: ProjectionGeometry,
    pixel_size: float = 1.0,
    alpha: float | None = None,
    eps_rel: float = 1e-6,
    max_iter: int = 5000,
    projector: Projector | None = None,
) -> DecompositionResult:
    """Project an image onto the null space of the projector.

    Runs the fixed-point iteration ``x <- x - alpha * A^T A x`` from the
    input image, which leaves the null-space component untouched and
    geometrically shrinks everything the measurement can see.  The default
    ``alpha`` is ``1.9 / ||A^T A||``, i.e. 95% of the stability limit (a
    nominal ``2 / (0.95 ||A^T A||)`` would exceed it and diverge).  Stops
    when ``||A x|| <= eps_rel * ||A x_initial||``; raises if ``max_iter``
    is hit first.
    """
    if isinstance(image, ImageGrid):
        pixel_size = image.pixel_size
        original = image.values
    else:
        original = np.asarray(image, dtype=np.float64)
    proj = projector or Projector(geometry, original.shape, pixel_size)
    if alpha is None:
        alpha = 1.9 / proj.op_norm_sq()
    x = original.copy()
    sino = proj.apply(x)
    target = eps_rel * float(np.linalg.norm(sino))
    iterations = 0
    residual = float(np.linalg.norm(sino))
    while residual > target:
        if iterations >= max_iter:
            raise RuntimeError(
                f"null-space iteration stalled at ||Ax||={residual:.3e} "
                f"(target {target:.3e}) after {max_iter} iterations; "
                "raise max_iter or loosen eps_rel"
            )
        x = x - alpha * proj.apply_adjoint(sino)
        sino = proj.apply(x)
        residual = float(np.linalg.norm(sino))
        iterations += 1
    x_range = original - x
    # Re-derive the null part as the exact complement of the range part so
    # that the decomposition identity holds to the last bit.
    x_null = original - x_range
    norm_sq = float(np.sum(original**2))
    fraction = float(np.sum(x_null**2)) / norm_sq if norm_sq > 0 else 0.0
    return DecompositionResult(
        x_range=ImageGrid(x_range, pixel_size),
        x_null=ImageGrid(x_null, pixel_size),
        null_energy_fraction=fraction,
        iterations_used=iterations,
        final_residual=float(np.linalg.norm(proj.apply(x_null))),
    )


def psnr(recon: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio against the reference's value range.

    A reconstruction containing non-finite values (a diverged solver, say)
    scores ``-inf`` rather than raising.
    """
    recon = np.asarray(recon, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if recon.shape != reference.shape:
        raise ValueError("shapes differ")
    value_range = float(reference.max() - reference.min())
    if value_range == 0:
        raise ValueError("reference image is constant; PSNR undefined")
    if not np.all(np.isfinite(recon)):
        return -math.inf
    with np.errstate(over="ignore"):
        rmse = math.sqrt(float(np.mean((recon - reference) ** 2)))
    if rmse == 0:
        return math.inf
    if not math.isfinite(rmse):
        return -math.inf
    return 20.0 * math.log10(value_range / rmse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(
    recon: np.ndarray,
    reference: np.ndarray,
    k1: float = 0.01,
    k2: float = 0.03,
    window_size: int = 11,
    sigma: float = 1.5,
) -> float:
    """Mean structural similarity with a Gaussian window.

    The dynamic range is taken from the reference.  Local statistics are
    computed on full (valid) windows only.  A reconstruction with non-finite
    or overflowing values scores 0.0 (no structural agreement) rather than
    raising, so diverged runs can still be tabulated.
    """
    x = np.asarray(recon, dtype=np.float64)
    y = np.asarray(reference, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("shapes differ")
    if not np.all(np.isfinite(x)):
        return 0.0
    if min(x.shape) < window_size:
        raise ValueError(f"images must be at least {window_size} pixels per side")
    value_range = float(y.max() - y.min())
    if value_range == 0:
        raise ValueError("reference image is constant; SSIM undefined")
    c1 = (k1 * value_range) ** 2
    c2 = (k2 * value_range) ** 2
    w = _gaussian_window(window_size, sigma)

    def filt(a):
        return scipy.signal.convolve2d(a, w, mode="valid")

    with np.errstate(over="ignore", invalid="ignore"):
        mu_x = filt(x)
        mu_y = filt(y)
        var_x = filt(x * x) - mu_x**2
        var_y = filt(y * y) - mu_y**2
        cov = filt(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        result = float(np.mean(num / den))
    return result if np.isfinite(result) else 0.0


def compute_metrics(
    recon: ImageGrid,
    reference: ImageGrid,
    measured: Sinogram | None = None,
    projector: Projector | None = None,
) -> MetricsReport:
    """PSNR/SSIM against the reference, plus the sinogram misfit if given."""
    fit = None
    if measured is not None:
        proj = projector or Projector(
            measured.geometry, recon.shape, recon.pixel_size
        )
        fit = float(np.linalg.norm(proj.apply(recon.values) - measured.values))
    ref = reference.values
    return MetricsReport(
        psnr=psnr(recon.values, ref),
        ssim=ssim(recon.values, ref),
        data_fit=fit,
        value_range_used=float(ref.max() - ref.min()),
    )


def uncertainty_map(samples) -> tuple[ImageGrid, ImageGrid]:
    """Pixelwise mean and population standard deviation of posterior samples.

    Accepts a sequence of :class:`ImageGrid` (or a bare 3-d stack); needs at
    least two samples of identical shape.
    """
    items = list(samples)
    if len(items) < 2:
        raise ValueError("need at least two samples")
    if isinstance(items[0], ImageGrid):
        pixel_size = items[0].pixel_size
        arrays = [s.values for s in items]
    else:
        pixel_size = 1.0
        arrays = [np.asarray(s, dtype=np.float64) for s in items]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("samples must share one shape")
    stack = np.stack(arrays)
    return ImageGrid(stack.mean(axis=0), pixel_size), ImageGrid(
        stack.std(axis=0), pixel_size
    )
