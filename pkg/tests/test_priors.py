import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctbench.grids import ProjectionGeometry, Sinogram
from ctbench.operators import Projector
from ctbench.priors import (
    CallableScorePrior,
    GaussianMixturePrior,
    GaussianPrior,
    NoiseSchedule,
    analytic_posterior,
    ddpm_estimate,
    eps_from_score,
    gaussian_score,
    gmm_score,
    linear_beta_schedule,
    score_from_eps,
    tweedie_estimate,
)

from conftest import dense_matrix


def test_schedule_basics():
    sched = linear_beta_schedule(100)
    assert sched.T == 100
    assert sched.alpha_bar(0) == 1.0
    abar = sched.alpha_bar(np.arange(101))
    assert np.all(np.diff(abar) < 0)  # strictly decaying signal level
    assert abar[-1] > 0


def test_schedule_rejects_bad_t():
    sched = linear_beta_schedule(10)
    with pytest.raises(ValueError):
        sched.alpha_bar(11)
    with pytest.raises(ValueError):
        sched.alpha_bar(-1)
    with pytest.raises(ValueError):
        linear_beta_schedule(0)


def test_gaussian_score_closed_form():
    sched = linear_beta_schedule(50)
    mean = np.array([1.0, -2.0])
    var = np.array([0.5, 2.0])
    x = np.array([0.3, 0.7])
    t = 17
    abar = sched.alpha_bar(t)
    v_t = abar * var + (1.0 - abar)
    expected = -(x - math.sqrt(abar) * mean) / v_t
    np.testing.assert_allclose(gaussian_score(x, t, sched, mean, var), expected)


def test_gaussian_score_matches_finite_difference():
    """Score = d/dx log p_t(x) for the marginal N(sqrt(abar) mu, abar v + 1-abar)."""
    sched = linear_beta_schedule(50)
    mean, var = 0.8, 0.3
    t = 25
    abar = sched.alpha_bar(t)
    v_t = abar * var + 1.0 - abar

    def logp(x):
        return -0.5 * (x - math.sqrt(abar) * mean) ** 2 / v_t

    x = 1.234
    h = 1e-6
    fd = (logp(x + h) - logp(x - h)) / (2 * h)
    got = gaussian_score(np.array([x]), t, sched, np.array([mean]), np.array([var]))
    assert abs(got[0] - fd) < 1e-8


def test_gmm_score_single_component_reduces_to_gaussian():
    sched = linear_beta_schedule(40)
    mean = np.array([[0.5, -0.5]])
    var = np.array([[1.0, 2.0]])
    x = np.array([0.1, 0.9])
    got = gmm_score(x, 10, sched, np.array([1.0]), mean, var)
    expected = gaussian_score(x, 10, sched, mean[0], var[0])
    np.testing.assert_allclose(got, expected)


def test_gmm_score_far_from_one_mode_collapses_to_nearest():
    # two well-separated modes: at one mode, responsibilities are ~one-hot
    sched = linear_beta_schedule(40)
    means = np.array([[-30.0], [30.0]])
    variances = np.ones((2, 1))
    x = np.array([30.0 * math.sqrt(sched.alpha_bar(3))])
    got = gmm_score(x, 3, sched, np.array([0.5, 0.5]), means, variances)
    expected = gaussian_score(x, 3, sched, means[1], variances[1])
    np.testing.assert_allclose(got, expected, atol=1e-10)


@given(t=st.integers(1, 99), val=st.floats(-3, 3))
@settings(max_examples=40, deadline=None)
def test_score_eps_roundtrip(t, val):
    sched = linear_beta_schedule(99)
    score = np.array([val])
    eps = eps_from_score(score, t, sched)
    back = score_from_eps(eps, t, sched)
    np.testing.assert_allclose(back, score, atol=1e-12)


def test_score_from_eps_undefined_at_zero():
    sched = linear_beta_schedule(10)
    with pytest.raises(ValueError):
        score_from_eps(np.array([1.0]), 0, sched)


def test_tweedie_equals_ddpm_view():
    sched = linear_beta_schedule(60)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 4))
    score = rng.standard_normal((4, 4))
    t = 33
    eps = eps_from_score(score, t, sched)
    np.testing.assert_allclose(
        tweedie_estimate(x, score, t, sched), ddpm_estimate(x, eps, t, sched)
    )


def test_tweedie_recovers_gaussian_posterior_mean():
    """With an exact Gaussian score, Tweedie gives E[x0 | x_t] in closed form."""
    sched = linear_beta_schedule(50)
    mean, var = np.full((3, 3), 2.0), 0.7
    prior = GaussianPrior(mean, var)
    t = 20
    abar = sched.alpha_bar(t)
    x_t = np.full((3, 3), 1.1)
    got = tweedie_estimate(x_t, prior.score(x_t, t, sched), t, sched)
    v_t = abar * var + 1.0 - abar
    expected = (var * math.sqrt(abar) * x_t + (1.0 - abar) * mean) / v_t
    np.testing.assert_allclose(got, expected)


def test_gaussian_prior_slope_is_x0_jacobian_diagonal():
    sched = linear_beta_schedule(50)
    rng = np.random.default_rng(0)
    var = 0.1 + rng.random((5, 5))
    prior = GaussianPrior(rng.standard_normal((5, 5)), var)
    t = 12
    x = rng.standard_normal((5, 5))
    h = 1e-6
    slope = prior.x0_slope(x, t, sched)
    for idx in [(0, 0), (2, 3), (4, 4)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        up = tweedie_estimate(xp, prior.score(xp, t, sched), t, sched)[idx]
        dn = tweedie_estimate(xm, prior.score(xm, t, sched), t, sched)[idx]
        assert abs((up - dn) / (2 * h) - slope[idx]) < 1e-6


def test_gaussian_prior_sampling_moments(rng):
    prior = GaussianPrior(np.full((8, 8), 1.5), 0.49)
    draws = prior.sample_x0(rng, n=4000)
    assert draws.shape == (4000, 8, 8)
    assert abs(draws.mean() - 1.5) < 0.02
    assert abs(draws.std() - 0.7) < 0.02


def test_mixture_prior_sampling_hits_both_modes(rng):
    prior = GaussianMixturePrior(
        np.array([0.5, 0.5]), np.array([[-4.0], [4.0]]), np.full((2, 1), 0.01)
    )
    draws = prior.sample_x0(rng, n=500)
    assert (draws < 0).any() and (draws > 0).any()


def test_callable_prior_adapts_function():
    sched = linear_beta_schedule(10)
    prior = CallableScorePrior(lambda x, t, s: -2.0 * x)
    x = np.ones((2, 2))
    np.testing.assert_allclose(prior.score(x, 5, sched), -2.0 * x)
    assert prior.x0_slope(x, 5, sched) is None


def test_analytic_posterior_matches_dense_algebra(small_projector, small_geometry, rng):
    sigma0_sq, noise_var = 0.25, 0.04
    mu0 = rng.standard_normal((16, 16))
    prior = GaussianPrior(mu0, sigma0_sq)
    y = rng.standard_normal((12, 24))
    mean, cov_apply = analytic_posterior(
        prior,
        Sinogram(y, small_geometry),
        noise_var,
        tol=1e-12,
        projector=small_projector,
    )
    A = dense_matrix(small_projector)
    prec = np.eye(256) / sigma0_sq + A.T @ A / noise_var
    expected = np.linalg.solve(
        prec, mu0.ravel() / sigma0_sq + A.T @ y.ravel() / noise_var
    )
    assert (
        np.linalg.norm(mean.ravel() - expected) / np.linalg.norm(expected) < 1e-8
    )
    # covariance operator: cov_apply(v) == prec^-1 v
    v = rng.standard_normal((16, 16))
    got = cov_apply(v)
    np.testing.assert_allclose(
        got.ravel(), np.linalg.solve(prec, v.ravel()), atol=1e-8
    )


def test_analytic_posterior_rejects_bad_noise(small_geometry):
    prior = GaussianPrior(np.zeros((16, 16)), 1.0)
    sino = Sinogram(np.zeros((12, 24)), small_geometry)
    with pytest.raises(ValueError):
        analytic_posterior(prior, sino, 0.0)
