"""Variance-preserving diffusion schedules and analytic score priors.

Priors here are closed-form (Gaussian / diagonal Gaussian mixture), which
makes every downstream sampler testable against exact posterior statistics.
The canonical quantity is the score ``grad log p_t``; the noise-prediction
view is derived from it as ``eps = -sqrt(1 - abar_t) * score``, so the
Tweedie and noise-prediction forms of the clean-image estimate coincide.
"""
from __future__ import annotations

import dataclasses
import math
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse.linalg
import scipy.special

from .grids import ProjectionGeometry, Sinogram
from .operators import Projector

__all__ = [
    "NoiseSchedule",
    "linear_beta_schedule",
    "ScorePrior",
    "GaussianPrior",
    "GaussianMixturePrior",
    "CallableScorePrior",
    "gaussian_score",
    "gmm_score",
    "eps_from_score",
    "score_from_eps",
    "tweedie_estimate",
    "ddpm_estimate",
    "analytic_posterior",
]


@dataclasses.dataclass
class NoiseSchedule:
    """Discrete VP schedule: ``x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps``.

    ``betas[i]`` is ``beta_{i+1}``; time runs ``t = 1 .. T`` with the
    convention ``abar_0 = 1`` (an exact endpoint for deterministic sampling).
    """

    betas: np.ndarray

    def __post_init__(self) -> None:
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(~np.isfinite(self.betas)) or np.any(
            (self.betas <= 0) | (self.betas >= 1)
        ):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self._abar = np.concatenate(([1.0], np.cumprod(1.0 - self.betas)))

    @property
    def T(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside schedule range [1, {self.T}]")
        return float(self.betas[t - 1])

    def alpha_bar(self, t) -> np.ndarray | float:
        t_arr = np.asarray(t)
        if np.any((t_arr < 0) | (t_arr > self.T)):
            raise ValueError(f"t outside schedule range [0, {self.T}]")
        out = self._abar[t_arr]
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out


def linear_beta_schedule(
    n_steps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    return NoiseSchedule(np.linspace(beta_min, beta_max, n_steps))


def gaussian_score(x, t: int, schedule: NoiseSchedule, mean, var):
    """Score of ``x_t`` when ``x_0 ~ N(mean, diag(var))``.

    The time-t marginal is ``N(sqrt(abar) mean, abar var + (1 - abar))``
    elementwise, so the score is a per-pixel linear pull toward the scaled
    mean.  Broadcasts over leading batch axes of ``x``.
    """
    abar = schedule.alpha_bar(t)
    v_t = abar * np.asarray(var, dtype=np.float64) + (1.0 - abar)
    return -(np.asarray(x, dtype=np.float64) - math.sqrt(abar) * np.asarray(mean)) / v_t


def gmm_score(x, t: int, schedule: NoiseSchedule, weights, means, variances):
    """Score of ``x_t`` under a diagonal Gaussian-mixture prior.

    Component responsibilities are computed per sample (summing log densities
    over all pixel axes) with a log-sum-exp, then the score is the
    responsibility-weighted sum of per-component Gaussian scores.
    """
    abar = schedule.alpha_bar(t)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    variances = np.broadcast_to(np.asarray(variances, dtype=np.float64), means.shape)

    n_comp = means.shape[0]
    feat_shape = means.shape[1:]
    n_feat = int(np.prod(feat_shape)) if feat_shape else 1
    batch_shape = x.shape[: x.ndim - len(feat_shape)]

    xf = x.reshape(*batch_shape, 1, n_feat)
    mf = means.reshape(n_comp, n_feat)
    m_t = abar * variances.reshape(n_comp, n_feat) + (1.0 - abar)

    resid = xf - math.sqrt(abar) * mf  # (*batch, K, n_feat)
    log_like = -0.5 * np.sum(resid**2 / m_t + np.log(2.0 * math.pi * m_t), axis=-1)
    log_post = np.log(w) + log_like
    log_post -= scipy.special.logsumexp(log_post, axis=-1, keepdims=True)
    resp = np.exp(log_post)[..., None]  # (*batch, K, 1)
    score_flat = np.sum(resp * (-resid / m_t), axis=-2)
    return score_flat.reshape(x.shape)


def eps_from_score(score, t: int, schedule: NoiseSchedule):
    """Noise-prediction view of a score: ``eps = -sqrt(1-abar) * score``."""
    return -math.sqrt(1.0 - schedule.alpha_bar(t)) * np.asarray(score)


def score_from_eps(eps, t: int, schedule: NoiseSchedule):
    one_minus = 1.0 - schedule.alpha_bar(t)
    if one_minus == 0.0:
        raise ValueError("score is undefined at t=0 (no noise)")
    return -np.asarray(eps) / math.sqrt(one_minus)


def tweedie_estimate(x, score, t: int, schedule: NoiseSchedule):
    """Posterior-mean estimate of the clean image from the score."""
    abar = schedule.alpha_bar(t)
    return (np.asarray(x) + (1.0 - abar) * np.asarray(score)) / math.sqrt(abar)


def ddpm_estimate(x, eps, t: int, schedule: NoiseSchedule):
    """Clean-image estimate from predicted noise; equals Tweedie's formula
    when ``eps = -sqrt(1-abar) * score``."""
    abar = schedule.alpha_bar(t)
    return (np.asarray(x) - math.sqrt(1.0 - abar) * np.asarray(eps)) / math.sqrt(abar)


class ScorePrior(Protocol):
    """What samplers need from a prior: a score and (optionally) the slope of
    the clean-image estimate for exact gradients through guidance losses."""

    def score(self, x, t: int, schedule: NoiseSchedule): ...

    def x0_slope(self, x, t: int, schedule: NoiseSchedule):
        """Diagonal of ``d x0_hat / d x_t`` if the map is affine, else None."""
        ...


@dataclasses.dataclass
class GaussianPrior:
    """``x_0 ~ N(mean, diag(var))``; everything downstream is closed-form."""

    mean: np.ndarray
    var: np.ndarray | float = 1.0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if np.any(self.var <= 0):
            raise ValueError("prior variance must be positive")

    def score(self, x, t: int, schedule: NoiseSchedule):
        return gaussian_score(x, t, schedule, self.mean, self.var)

    def x0_slope(self, x, t: int, schedule: NoiseSchedule):
        abar = schedule.alpha_bar(t)
        v_t = abar * self.var + (1.0 - abar)
        slope = math.sqrt(abar) * self.var / v_t
        return np.broadcast_to(slope, np.asarray(x).shape).copy()

    def sample_x0(self, rng: np.random.Generator, n: int | None = None):
        shape = self.mean.shape if n is None else (n, *self.mean.shape)
        return self.mean + np.sqrt(self.var) * rng.standard_normal(shape)


@dataclasses.dataclass
class GaussianMixturePrior:
    """Diagonal Gaussian mixture; weights need not be normalized on input."""

    weights: np.ndarray
    means: np.ndarray  # (K, *feature_shape)
    variances: np.ndarray  # broadcastable to means

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.variances = np.broadcast_to(
            np.asarray(self.variances, dtype=np.float64), self.means.shape
        ).copy()
        if self.weights.ndim != 1 or self.weights.size != self.means.shape[0]:
            raise ValueError("need one weight per mixture component")
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        if np.any(self.variances <= 0):
            raise ValueError("mixture variances must be positive")
        self.weights = self.weights / self.weights.sum()

    def score(self, x, t: int, schedule: NoiseSchedule):
        return gmm_score(x, t, schedule, self.weights, self.means, self.variances)

    def x0_slope(self, x, t: int, schedule: NoiseSchedule):
        return None

    def sample_x0(self, rng: np.random.Generator, n: int | None = None):
        count = 1 if n is None else n
        comps = rng.choice(self.weights.size, size=count, p=self.weights)
        draws = self.means[comps] + np.sqrt(self.variances[comps]) * rng.standard_normal(
            (count, *self.means.shape[1:])
        )
        return draws[0] if n is None else draws


@dataclasses.dataclass
class CallableScorePrior:
    """Adapter for an external score function ``(x, t, schedule) -> score``.

    No clean-image slope is available, so guidance falls back to the
    identity-Jacobian approximation.
    """

    fn: Callable[[np.ndarray, int, NoiseSchedule], np.ndarray]

    def score(self, x, t: int, schedule: NoiseSchedule):
        return np.asarray(self.fn(np.asarray(x, dtype=np.float64), t, schedule))

    def x0_slope(self, x, t: int, schedule: NoiseSchedule):
        return None


def analytic_posterior(
    prior: GaussianPrior,
    sino: Sinogram,
    noise_var: float,
    pixel_size: float = 1.0,
    tol: float = 1e-10,
    max_iter: int = 2000,
    projector: Projector | None = None,
):
    """Exact Gaussian posterior for ``y = A x + N(0, noise_var I)``.

    Returns ``(mean, cov_apply)`` where ``cov_apply(v)`` applies the posterior
    covariance ``(Sigma0^-1 + A^T A / noise_var)^-1`` to an image-shaped
    vector.  Solved with conjugate gradient, which is exact up to ``tol``.
    """
    if noise_var <= 0:
        raise ValueError("noise_var must be positive")
    shape = prior.mean.shape
    if len(shape) != 2:
        raise ValueError("analytic_posterior expects a 2-D image prior")
    proj = projector or Projector(sino.geometry, shape, pixel_size)
    prior_precision = 1.0 / np.broadcast_to(prior.var, shape)

    def precision_op(v: np.ndarray) -> np.ndarray:
        img = v.reshape(shape)
        out = prior_precision * img + proj.apply_adjoint(proj.apply(img)) / noise_var
        return out.ravel()

    op = scipy.sparse.linalg.LinearOperator(
        shape=(prior.mean.size, prior.mean.size), matvec=precision_op
    )

    def solve(rhs: np.ndarray) -> np.ndarray:
        sol, info = scipy.sparse.linalg.cg(
            op, rhs.ravel(), rtol=tol, atol=0.0, maxiter=max_iter
        )
        if info != 0:
            raise RuntimeError(f"posterior CG did not converge (info={info})")
        return sol.reshape(shape)

    rhs = prior_precision * prior.mean + proj.apply_adjoint(sino.values) / noise_var
    mean = solve(rhs)
    return mean, solve
