import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from cmdis import GaussianMixture, ShapeError
from cmdis.checks import central_difference
from cmdis.mixture import TOY_MEANS

from conftest import gauss_logpdf


def bayes_log_posterior(gmm, sigma_t, x_t, x0):
    """log p(x0 | x_t) = log p0(x0) + log N(x_t; x0, sigma_t^2) - log p_t(x_t), term by term."""
    prior = logsumexp([np.log(w) + gauss_logpdf(x0, m, gmm.sigma**2)
                       for w, m in zip(gmm.weights, gmm.means)], axis=0)
    lik = gauss_logpdf(x_t, x0, sigma_t**2)
    return prior + lik - gmm.log_marginal(sigma_t, x_t)


def grid(lo, hi, n):
    a = np.linspace(lo, hi, n)
    xx, yy = np.meshgrid(a, a)
    return a, np.stack([xx, yy], -1)


def test_toy_layout(toy):
    assert toy.n_components == 5 and toy.dim == 2
    np.testing.assert_array_equal(toy.means, TOY_MEANS)
    assert toy.sigma == 0.1
    np.testing.assert_allclose(toy.weights, 0.2)


@pytest.mark.parametrize("sigma_t", [0.0, 0.3, 1.5])
def test_marginal_density_integrates_to_one(toy, sigma_t):
    a, pts = grid(-9, 9, 901)
    dens = toy.marginal_density(sigma_t, pts)
    total = trapezoid(trapezoid(dens, a, axis=1), a)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_log_marginal_matches_componentwise_sum(toy, rng):
    x = rng.normal(size=(20, 2))
    s = 0.7
    ref = logsumexp([np.log(w) + gauss_logpdf(x, m, toy.sigma**2 + s**2)
                     for w, m in zip(toy.weights, toy.means)], axis=0)
    np.testing.assert_allclose(toy.log_marginal(s, x), ref, rtol=1e-12)


@pytest.mark.parametrize("sigma_t", [0.05, 0.5, 2.0])
def test_score_is_gradient_of_log_marginal(toy, rng, sigma_t):
    for x in rng.normal(size=(5, 2)):
        fd = central_difference(lambda z: toy.log_marginal(sigma_t, z), x, 1e-6)
        np.testing.assert_allclose(toy.score(sigma_t, x), fd, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("sigma_t", [0.05, 0.5, 2.0])
def test_hessian_is_jacobian_of_score(toy, rng, sigma_t):
    for x in rng.normal(size=(5, 2)):
        fd = central_difference(lambda z: toy.score(sigma_t, z), x, 1e-6)
        np.testing.assert_allclose(toy.score_hessian(sigma_t, x), fd, rtol=1e-4, atol=1e-3)


def test_score_and_hessian_agree_with_separate_calls(toy, rng):
    x = rng.normal(size=(7, 2))
    s, h = toy.score_and_hessian(0.4, x)
    np.testing.assert_array_equal(s, toy.score(0.4, x))
    np.testing.assert_array_equal(h, toy.score_hessian(0.4, x))


@pytest.mark.parametrize("sigma_t", [0.2, 1.0, 3.0])
def test_posterior_matches_bayes_rule(toy, rng, sigma_t):
    x_t = toy.sample_marginal(sigma_t, rng, 1)[0]
    x0 = x_t + rng.normal(size=(50, 2)) * 0.5
    post = toy.posterior(sigma_t, x_t)
    np.testing.assert_allclose(post.log_density(x0), bayes_log_posterior(toy, sigma_t, x_t, x0),
                               rtol=1e-9, atol=1e-9)


def test_posterior_moments_by_quadrature(toy):
    x_t, sigma_t = np.array([1.0, 0.4]), 1.0
    a, pts = grid(-2.5, 2.5, 1001)
    dens = toy.posterior(sigma_t, x_t).density(pts)
    w = dens * (a[1] - a[0]) ** 2
    assert w.sum() == pytest.approx(1.0, abs=1e-6)
    mean = (w[..., None] * pts).sum((0, 1))
    diff = pts - mean
    cov = np.einsum("ij,ija,ijb->ab", w, diff, diff)
    np.testing.assert_allclose(mean, toy.posterior_mean(sigma_t, x_t), atol=1e-6)
    np.testing.assert_allclose(cov, toy.posterior_cov(sigma_t, x_t), atol=1e-6)


def test_posterior_sample_moments(toy, rng):
    post = toy.posterior(0.8, np.array([0.3, -0.2]))
    draws = post.sample(rng, 200_000)
    np.testing.assert_allclose(draws.mean(0), post.mean(), atol=6e-3)
    np.testing.assert_allclose(np.cov(draws.T), post.cov(), atol=6e-3)


def test_tweedie_mean_equals_posterior_mean(toy, rng):
    for s in [0.01, 0.1, 1.0, 4.0]:
        x = toy.sample_marginal(s, rng, 30)
        np.testing.assert_allclose(toy.tweedie_mean(s, x), toy.posterior_mean(s, x), atol=1e-12)
        np.testing.assert_allclose(toy.tweedie_cov(s, x), toy.posterior_cov(s, x), atol=1e-10)


def test_tweedie_jacobian_by_differences(toy, rng):
    x = rng.normal(size=2)
    m, jac = toy.tweedie_with_jacobian(0.6, x)
    np.testing.assert_allclose(m, toy.tweedie_mean(0.6, x))
    np.testing.assert_allclose(jac, central_difference(lambda z: toy.tweedie_mean(0.6, z), x), atol=1e-7)


def test_single_component_posterior_is_gaussian(rng):
    mu = np.array([0.5, -1.0])
    g = GaussianMixture(mu[None], 0.3)
    x = np.array([2.0, 0.0])
    s = 0.8
    v = 0.09 + s**2
    np.testing.assert_allclose(g.posterior_mean(s, x), mu + 0.09 / v * (x - mu))
    np.testing.assert_allclose(g.posterior_cov(s, x), np.eye(2) * 0.09 * s**2 / v)


def test_batch_shapes(toy, rng):
    x = rng.normal(size=(3, 4, 2))
    assert toy.score(0.5, x).shape == (3, 4, 2)
    assert toy.score_hessian(0.5, x).shape == (3, 4, 2, 2)
    assert toy.posterior_cov(0.5, x).shape == (3, 4, 2, 2)
    assert toy.log_marginal(0.5, x).shape == (3, 4)


def test_far_points_stay_finite(toy):
    x = np.array([[1e4, -1e4], [300.0, 0.0]])
    assert np.all(np.isfinite(toy.score(0.01, x)))
    assert np.all(np.isfinite(toy.posterior(0.01, x).log_density(x)))


def test_nearest_mode_ties_go_low(toy):
    # (0, 1) is equidistant from (-1, 1), (1, 1) and (0, 0)
    assert toy.nearest_mode(np.array([0.0, 1.0])) == 1
    assert toy.nearest_mode(np.array([0.9, 0.95])) == 2


def test_boundary_distance(toy):
    assert toy.boundary_distance(np.array([0.0, 0.0])) == pytest.approx(np.sqrt(2) / 2)
    assert toy.boundary_distance(np.array([0.5, 0.5])) == pytest.approx(0.0, abs=1e-12)
    assert toy.boundary_distance(np.array([1.0, 1.0])) == pytest.approx(np.sqrt(2) / 2)


def test_sample_statistics(toy, rng):
    x = toy.sample(rng, 50_000)
    counts = np.bincount(toy.nearest_mode(x), minlength=5)
    np.testing.assert_allclose(counts / len(x), 0.2, atol=0.01)
    resid = x - toy.means[toy.nearest_mode(x)]
    assert resid.std() == pytest.approx(0.1, rel=0.02)


@pytest.mark.parametrize("kwargs, msg", [
    (dict(means=np.zeros((2, 2, 2)), sigma=0.1), "shape"),
    (dict(means=np.zeros((2, 2)), sigma=0.0), "sigma"),
    (dict(means=np.zeros((2, 2)), sigma=0.1, weights=[1.0]), "weights"),
    (dict(means=[[0.0, np.nan]], sigma=0.1), "finite"),
])
def test_validation(kwargs, msg):
    with pytest.raises(ValueError, match=msg):
        GaussianMixture(**kwargs)


def test_wrong_dimension_rejected(toy):
    with pytest.raises(ShapeError):
        toy.score(0.5, np.zeros(3))


def test_posterior_needs_positive_noise(toy):
    with pytest.raises(ValueError):
        toy.posterior(0.0, np.zeros(2))


@given(st.floats(0.01, 5.0), st.floats(-3, 3), st.floats(-3, 3))
def test_component_weights_are_a_distribution(sigma_t, a, b):
    w = GaussianMixture.toy().component_weights(sigma_t, np.array([a, b]))
    assert np.all(w >= 0) and w.sum() == pytest.approx(1.0)


@given(st.floats(0.01, 5.0), st.floats(-3, 3), st.floats(-3, 3))
def test_posterior_covariance_is_psd_and_symmetric(sigma_t, a, b):
    cov = GaussianMixture.toy().tweedie_cov(sigma_t, np.array([a, b]))
    np.testing.assert_allclose(cov, cov.T, atol=1e-14)
    assert np.linalg.eigvalsh(cov).min() > -1e-12


@given(st.floats(0.01, 5.0), st.floats(-3, 3), st.floats(-3, 3))
def test_posterior_mean_in_convex_hull_padded(sigma_t, a, b):
    g = GaussianMixture.toy()
    x = np.array([a, b])
    m = g.posterior_mean(sigma_t, x)
    # each component mean is a convex blend of x and mu_i, so m is in the hull of {x} and the means
    lo = np.minimum(g.means.min(0), x)
    hi = np.maximum(g.means.max(0), x)
    assert np.all(m >= lo - 1e-9) and np.all(m <= hi + 1e-9)
