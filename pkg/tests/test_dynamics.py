import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from cmdis import (ConsistencyFunction, GaussianMixture, IntegrationError, NoiseSchedule,
                   OrderingError, ancestral_step, sample_unconditional, solve_pf_ode)
from cmdis.checks import central_difference
from cmdis.dynamics import substep_grid, velocity
from cmdis.streams import stream


def closed_form(mu, sig, t, x):
    return mu + (x - mu) * np.sqrt(sig**2 / (sig**2 + t**2))


@pytest.mark.parametrize("kind", ["karras", "quadratic", "linear"])
def test_velocity_matches_score_form(toy, rng, kind):
    s = NoiseSchedule(kind)
    for sigma in [0.01, 0.3, 3.0]:
        x = toy.sample_marginal(sigma, rng, 50)
        ref = -0.5 * s.dsigma2_dt(sigma) * toy.score(sigma, x)
        np.testing.assert_allclose(velocity(toy, s, sigma, x), ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("sig", [0.1, 0.5])
def test_single_gaussian_closed_form(rng, sig):
    mu = np.array([0.3, -0.7])
    g = GaussianMixture(mu[None], sig)
    s = NoiseSchedule("quadratic", sigma_min=1e-4)
    t = 2.0
    x = mu + np.sqrt(sig**2 + t**2) * rng.normal(size=(20, 2))
    np.testing.assert_allclose(solve_pf_ode(g, s, t, x, steps=320), closed_form(mu, sig, t, x), atol=1e-4)


def test_heun_is_second_order(rng):
    mu = np.zeros(2)
    g = GaussianMixture(mu[None], 0.3)
    s = NoiseSchedule("quadratic", sigma_min=1e-4)
    x = np.array([1.5, -0.4])
    ref = solve_pf_ode(g, s, 3.0, x, steps=4000)
    errs = [np.abs(solve_pf_ode(g, s, 3.0, x, steps=n) - ref).max() for n in (40, 80)]
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.25)
    e_euler = [np.abs(solve_pf_ode(g, s, 3.0, x, steps=n, method="euler") - ref).max() for n in (40, 80)]
    assert e_euler[0] / e_euler[1] == pytest.approx(2.0, rel=0.25)


def test_reference_flow_from_demo_point(toy, schedule):
    """Flow of (1, 0.4) from sigma = 1, checked against a dense integration."""
    x = np.array([1.0, 0.4])
    ref = solve_pf_ode(toy, schedule, 1.0, x, steps=4000)
    out = ConsistencyFunction(toy, schedule)(1.0, x)
    np.testing.assert_allclose(out, ref, atol=2e-3)
    assert toy.nearest_mode(out) == 2
    np.testing.assert_allclose(ref, [0.9525, 0.8749], atol=1e-3)


def test_substep_grid_endpoints():
    g = substep_grid(4.0, 0.002, 10)
    assert g[0] == 4.0 and g[-1] == 0.002 and np.all(np.diff(g) < 0)


def test_consistency_jacobian_by_differences(toy, schedule, rng):
    cf = ConsistencyFunction(toy, schedule)
    for sigma in [0.1, 0.8, 3.0]:
        x = toy.sample_marginal(sigma, rng, 1)[0]
        res = cf.jacobian(sigma, x)
        np.testing.assert_array_equal(res.value, cf(sigma, x))
        fd = central_difference(lambda z: cf(sigma, z), x, 1e-5)
        np.testing.assert_allclose(res.jacobian, fd, rtol=1e-4, atol=1e-5)


def test_consistency_jacobian_batched_matches_single(toy, schedule, rng):
    cf = ConsistencyFunction(toy, schedule)
    x = rng.normal(size=(4, 2))
    batch = cf.jacobian(0.7, x)
    for i in range(4):
        one = cf.jacobian(0.7, x[i])
        np.testing.assert_array_equal(batch.value[i], one.value)
        np.testing.assert_array_equal(batch.jacobian[i], one.jacobian)


def test_below_sigma_min_is_identity(toy, schedule):
    cf = ConsistencyFunction(toy, schedule)
    x = np.array([0.2, 0.1])
    res = cf.jacobian(schedule.sigma_min, x)
    np.testing.assert_array_equal(res.value, x)
    np.testing.assert_array_equal(res.jacobian, np.eye(2))


def test_above_sigma_max_rejected(toy, schedule):
    with pytest.raises(ValueError):
        ConsistencyFunction(toy, schedule)(5.0, np.zeros(2))


def test_integration_failure_reports_sigma(toy, schedule, monkeypatch):
    real = GaussianMixture.score

    def broken(self, sigma_t, x):
        out = real(self, sigma_t, x)
        return out * np.nan if sigma_t < 0.5 else out

    monkeypatch.setattr(GaussianMixture, "score", broken)
    with pytest.raises(IntegrationError) as info:
        solve_pf_ode(toy, schedule, 2.0, np.zeros(2))
    assert info.value.sigma < 0.5


def test_bad_integrator_settings(toy, schedule):
    with pytest.raises(ValueError):
        ConsistencyFunction(toy, schedule, method="rk4")
    with pytest.raises(ValueError):
        ConsistencyFunction(toy, schedule, steps=1)


def test_pushforward_preserves_marginal(toy, schedule, rng):
    x = schedule.sigma_max * rng.standard_normal((3000, 2))
    out = ConsistencyFunction(toy, schedule)(schedule.sigma_max, x)
    counts = np.bincount(toy.nearest_mode(out), minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01
    resid = out - toy.means[toy.nearest_mode(out)]
    assert resid.std() == pytest.approx(0.1, rel=0.05)


def test_flow_from_intermediate_marginal(toy, schedule, rng):
    sigma = 0.7
    x = toy.sample_marginal(sigma, rng, 3000)
    out = ConsistencyFunction(toy, schedule)(sigma, x)
    assert stats.chisquare(np.bincount(toy.nearest_mode(out), minlength=5)).pvalue > 0.01


def test_ancestral_step_single_gaussian_kernel(rng):
    # for a single Gaussian the step is exactly Gaussian: check its mean and variance
    g = GaussianMixture(np.zeros((1, 1)), 0.5)
    st_, sp = 1.0, 0.6
    x = np.full((200_000, 1), 0.8)
    out = ancestral_step(g, st_, sp, x, rng)
    gap = st_**2 - sp**2
    np.testing.assert_allclose(out.mean(), 0.8 + gap * (-0.8 / (0.25 + 1.0)), atol=5e-3)
    assert out.var() == pytest.approx(gap, rel=0.02)


def test_ancestral_step_order(toy, rng):
    with pytest.raises(OrderingError):
        ancestral_step(toy, 0.5, 0.5, np.zeros(2), rng)


def test_unconditional_sampler_law(toy, schedule):
    out = np.stack([sample_unconditional(toy, schedule, stream(0, r, "sampler"))[-1] for r in range(1000)])
    counts = np.bincount(toy.nearest_mode(out), minlength=5)
    assert stats.chisquare(counts).pvalue > 0.01
    assert (out - toy.means[toy.nearest_mode(out)]).std() == pytest.approx(0.1, rel=0.1)


def test_unconditional_shapes(toy, schedule, rng):
    assert sample_unconditional(toy, schedule, rng).shape == (100, 2)
    assert sample_unconditional(toy, NoiseSchedule(steps=5), rng, n=3).shape == (5, 3, 2)


@given(st.floats(0.05, 4.0), st.floats(-2, 2), st.floats(-2, 2))
def test_flow_map_is_deterministic_and_finite(sigma, a, b):
    g, s = GaussianMixture.toy(), NoiseSchedule()
    cf = ConsistencyFunction(g, s, steps=20)
    x = np.array([a, b])
    out = cf(sigma, x)
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, cf(sigma, x))
