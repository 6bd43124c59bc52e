"""Invariant checks with measured margins, shared by ``cmdis verify``.

Each check returns :class:`CheckResult` records instead of raising, so a run
reports every failure rather than stopping at the first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .analysis import verify_density_bound
from .dynamics import ConsistencyFunction, solve_pf_ode, velocity
from .mixture import GaussianMixture
from .operators import MeasurementOperator, MlpNetwork
from .schedule import NoiseSchedule
from .solvers import (Problem, SolverConfig, approximate, guidance, inversion_guidance, solve,
                      stsl_correction, stsl_correction_grad)

TWEEDIE_MEAN_TOL = 1e-8
TWEEDIE_COV_TOL = 1e-6
VELOCITY_TOL = 1e-10
CLOSED_FORM_TOL = 1e-4
CLOSED_FORM_STEPS = 320
JACOBIAN_TOL = 1e-4
BACKPROP_TOL = 1e-5
GUIDANCE_TOL = 1e-3
MARGINAL_P = 0.01
MARGINAL_STD_TOL = 0.05


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    limit: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<34s} measured={self.measured:.3e}  limit={self.limit:.3e}{extra}"


def _upper(name, measured, limit, detail=""):
    measured = float(measured)
    return CheckResult(name, bool(np.isfinite(measured) and measured <= limit), measured, limit, detail)


def central_difference(fn, x, h: float = 1e-6) -> np.ndarray:
    """Jacobian of ``fn`` at ``x`` by central differences; shape ``out + (d,)``."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def relative_error(a, b) -> float:
    """``||a - b|| / max(||b||, 1)``: relative for large values, absolute near zero."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1.0))


def random_levels(schedule: NoiseSchedule, rng, n: int) -> np.ndarray:
    """Log-uniform noise levels inside the schedule's range."""
    lo, hi = np.log(schedule.sigma_min), np.log(schedule.sigma_max)
    return np.exp(rng.uniform(lo, hi, n))


def check_tweedie(gmm: GaussianMixture, schedule: NoiseSchedule, rng, n: int = 1000) -> list[CheckResult]:
    sig = random_levels(schedule, rng, n)
    mean_err, cov_err = 0.0, 0.0
    for s in sig:
        x = gmm.sample_marginal(s, rng, 1)[0]
        post = gmm.posterior(s, x)
        mean_err = max(mean_err, np.linalg.norm(gmm.tweedie_mean(s, x) - post.mean())
                       / (1 + np.linalg.norm(x)))
        cov_err = max(cov_err, np.linalg.norm(gmm.tweedie_cov(s, x) - post.cov()))
    return [_upper("tweedie_mean_vs_posterior", mean_err, TWEEDIE_MEAN_TOL, "scaled by 1+|x_t|"),
            _upper("tweedie_cov_vs_posterior", cov_err, TWEEDIE_COV_TOL, "Frobenius")]


def check_velocity(gmm, schedule, rng, n: int = 1000) -> CheckResult:
    err = 0.0
    for s in random_levels(schedule, rng, n):
        x = gmm.sample_marginal(s, rng, 1)[0]
        ref = -0.5 * float(schedule.dsigma2_dt(s)) * gmm.score(s, x)
        err = max(err, np.abs(velocity(gmm, schedule, s, x) - ref).max())
    return _upper("weighted_velocity_vs_score_form", err, VELOCITY_TOL)


def check_closed_form(rng, n: int = 100) -> CheckResult:
    err = 0.0
    schedule = NoiseSchedule("quadratic", sigma_min=1e-4, sigma_max=4.0)
    for _ in range(n):
        mu = rng.normal(size=2)
        sig = rng.uniform(0.1, 1.0)
        gmm = GaussianMixture(mu[None, :], sig)
        t = rng.uniform(0.05, 4.0)
        x = mu + np.sqrt(sig**2 + t**2) * rng.normal(size=2)
        exact = mu + (x - mu) * np.sqrt(sig**2 / (sig**2 + t**2))
        out = solve_pf_ode(gmm, schedule, t, x, steps=CLOSED_FORM_STEPS)
        err = max(err, np.abs(out - exact).max())
    return _upper("pf_ode_closed_form_single_gaussian", err, CLOSED_FORM_TOL)


def check_marginal(gmm, schedule, rng, n: int = 4000, start: str = "marginal") -> list[CheckResult]:
    """Push ``n`` draws at ``sigma_max`` through the flow and compare with the prior.

    ``start="marginal"`` draws from the exact noisy marginal; ``start="gaussian"``
    uses ``N(0, sigma_max^2 I)``, which is slightly narrower and over-weights
    central modes.
    """
    if start not in ("marginal", "gaussian"):
        raise ValueError(f"unknown start {start!r}")
    cf = ConsistencyFunction(gmm, schedule)
    if start == "marginal":
        x = gmm.sample_marginal(schedule.sigma_max, rng, n)
    else:
        x = schedule.sigma_max * rng.standard_normal((n, gmm.dim))
    out = cf(schedule.sigma_max, x)
    modes = gmm.nearest_mode(out)
    counts = np.bincount(modes, minlength=gmm.n_components)
    p = stats.chisquare(counts, n * gmm.weights).pvalue
    dev = 0.0
    for k in range(gmm.n_components):
        std = (out[modes == k] - gmm.means[k]).std()
        dev = max(dev, abs(std / gmm.sigma - 1))
    return [CheckResult("marginal_mode_histogram", bool(p > MARGINAL_P), float(p), MARGINAL_P,
                        f"chi-square p-value, must exceed limit; counts {counts.tolist()}"),
            _upper("marginal_per_mode_std", dev, MARGINAL_STD_TOL, "relative to component sigma")]


def check_density_bound(gmm, schedule, rng, sigmas=(0.25, 0.5, 1.0, 2.0), n: int = 1000) -> CheckResult:
    violations, worst = 0, np.inf
    cf = ConsistencyFunction(gmm, schedule)
    for s in sigmas:
        rep = verify_density_bound(gmm, schedule, s, n, rng, cf)
        violations += rep.violations
        if rep.margins.size:
            worst = min(worst, rep.margins.min())
    return CheckResult(f"density_lower_bound_d{gmm.dim}", violations == 0, float(worst), 0.0,
                       f"{violations} violations; measured = smallest log margin")


def check_consistency_jacobian(gmm, schedule, rng, n: int = 10) -> CheckResult:
    cf = ConsistencyFunction(gmm, schedule)
    err = 0.0
    for s in np.exp(rng.uniform(np.log(0.05), np.log(schedule.sigma_max), n)):
        x = gmm.sample_marginal(s, rng, 1)[0]
        jac = cf.jacobian(s, x).jacobian
        err = max(err, relative_error(jac, central_difference(lambda z: cf(s, z), x, 1e-5)))
    return _upper("consistency_jacobian_vs_fd", err, JACOBIAN_TOL)


def check_backprop(rng, n: int = 10) -> CheckResult:
    net = MlpNetwork.init([3, 8, 8, 4], rng)
    err = 0.0
    for _ in range(n):
        x, g = rng.normal(size=3), rng.normal(size=4)
        fd = central_difference(lambda z: net.forward(z) @ g, x)
        err = max(err, relative_error(net.vjp(x, g), fd))
    return _upper("mlp_backprop_vs_fd", err, BACKPROP_TOL)


GUIDED = ("dps", "freedom", "mpgd", "lgd", "stsl", "proposed1", "proposed2")


def check_guidance(gmm, schedule, rng, solvers=GUIDED, n: int = 10) -> list[CheckResult]:
    """Per-step guidance vectors against differences of the scalar they descend (no noise)."""
    k = gmm.n_components
    net = MlpNetwork.init([gmm.dim, 8, k], rng)
    ops = [(MeasurementOperator.linear(rng.normal(size=(1, gmm.dim))), lambda: rng.normal(size=1)),
           (MeasurementOperator.classifier(net), lambda: int(rng.integers(k)))]
    cf = ConsistencyFunction(gmm, schedule)
    out = []
    for name in solvers:
        err = 0.0
        for i in range(n):
            op, make_y = ops[i % 2]
            y = make_y()
            problem = Problem(gmm, schedule, op, y, SolverConfig(name), consistency=cf)
            s = float(schedule.levels[rng.integers(schedule.steps)])
            x = gmm.sample_marginal(s, rng, 1)[0]
            if name == "proposed2":
                base = gmm.sample(rng)
                z = rng.normal(size=gmm.dim)
                got = inversion_guidance(problem, s, base, z, y)[3]
                fd = central_difference(lambda u: op.loss(cf(s, base + s * u), y), z)
            elif name == "mpgd":
                x0, _, got = guidance(problem, s, x, y)
                fd = central_difference(lambda u: op.loss(u, y), x0)
            else:
                got = guidance(problem, s, x, y)[2]
                fd = central_difference(lambda u: op.loss(approximate(problem, s, u)[0], y), x)
            err = max(err, relative_error(got, fd))
        out.append(_upper(f"guidance_gradient_{name}", err, GUIDANCE_TOL))
    return out


def check_stsl_correction(gmm, schedule, rng, n: int = 10) -> CheckResult:
    err = 0.0
    for _ in range(n):
        s = float(schedule.levels[rng.integers(schedule.steps)])
        x = gmm.sample_marginal(s, rng, 1)[0]
        eps = rng.normal(size=gmm.dim)
        fd = central_difference(lambda u: stsl_correction(gmm, s, u, eps), x)
        err = max(err, relative_error(stsl_correction_grad(gmm, s, x, eps), fd))
    return _upper("stsl_correction_gradient", err, JACOBIAN_TOL)


def check_reductions(gmm, schedule, seed: int = 0, runs=(0, 1)) -> list[CheckResult]:
    """Bitwise reductions between solvers under a shared seed."""
    op = MeasurementOperator.linear(np.eye(gmm.dim))
    y = np.ones(gmm.dim)
    cf = ConsistencyFunction(gmm, schedule)
    pairs = [("lgd_r0_is_dps", dict(solver="lgd", r_t=0.0), dict(solver="dps")),
             ("freedom_k1_is_dps", dict(solver="freedom", K=1), dict(solver="dps")),
             ("proposed1_mean_is_dps", dict(solver="proposed1", approx="posterior_mean", tau=0.0),
              dict(solver="dps")),
             ("proposed2_zeta0_is_cm", dict(solver="proposed2", zeta=0.0, zeta2=0.0, K=2, ts=(1.0, 0.2)),
              dict(solver="cm", ts=(1.0, 0.2)))]
    out = []
    for name, a, b in pairs:
        same = True
        for run in runs:
            ta = solve(Problem(gmm, schedule, op, y, SolverConfig(**{"zeta": 0.5, **a}), seed, run, cf))
            tb = solve(Problem(gmm, schedule, op, y, SolverConfig(**{"zeta": 0.5, **b}), seed, run, cf))
            same &= (np.array_equal(ta.final, tb.final) and np.array_equal(ta.x_t, tb.x_t)
                     and np.array_equal(ta.x0t, tb.x0t))
        out.append(CheckResult(f"reduction_{name}", same, 0.0 if same else 1.0, 0.0, "bitwise"))
    return out


def d8_mixture(seed: int = 8) -> GaussianMixture:
    """Seeded 8-dimensional, five-component mixture used for bound checks."""
    rng = np.random.default_rng(seed)
    return GaussianMixture(rng.normal(size=(5, 8)), 0.3)


def run_all(seed: int = 0) -> list[CheckResult]:
    gmm = GaussianMixture.toy()
    schedule = NoiseSchedule()
    rng = np.random.default_rng(seed)
    results = []
    results += check_tweedie(gmm, schedule, rng)
    results.append(check_velocity(gmm, schedule, rng))
    results.append(check_closed_form(rng))
    results += check_marginal(gmm, schedule, rng)
    results.append(check_density_bound(gmm, schedule, rng))
    results.append(check_density_bound(d8_mixture(), schedule, rng))
    results.append(check_consistency_jacobian(gmm, schedule, rng))
    results.append(check_backprop(rng))
    results += check_guidance(gmm, schedule, rng)
    results.append(check_stsl_correction(gmm, schedule, rng))
    results += check_reductions(gmm, schedule, seed)
    return results
