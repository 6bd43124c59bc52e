"""Reverse-time dynamics: ancestral SDE steps and the probability-flow ODE.

The ODE is integrated in the noise level itself,

    dX/dsigma = -sigma * grad log p_sigma(X),

which is the time-parametrized flow ``dX/dt = -1/2 (d sigma^2/dt) score`` with the
chain rule applied.  Its solution map from ``sigma_t`` down to ``sigma_min`` is the
exact consistency function of the analytic prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IntegrationError, OrderingError
from .mixture import GaussianMixture, _softmax
from .schedule import NoiseSchedule

DEFAULT_STEPS = 80
SUBSTEP_RHO = 3.0


def velocity(gmm: GaussianMixture, schedule: NoiseSchedule, sigma_t: float, x) -> np.ndarray:
    """PF-ODE time derivative written as a softmax-weighted pull toward the means.

    ``sum_i (w_i / 2) (d sigma^2/dt) (x - mu_i) / (sigma^2 + sigma_t^2)``
    """
    x = gmm._check(x)
    v = gmm.variance(sigma_t)
    diff = x[..., None, :] - gmm.means
    w = _softmax(gmm.log_weights - (diff * diff).sum(axis=-1) / (2.0 * v))
    rate = 0.5 * float(schedule.dsigma2_dt(sigma_t)) / v
    return rate * (w[..., :, None] * diff).sum(axis=-2)


def substep_grid(sigma_start: float, sigma_end: float, steps: int) -> np.ndarray:
    """Karras-spaced levels from ``sigma_start`` down to ``sigma_end`` (inclusive)."""
    frac = np.arange(steps + 1) / steps
    lo, hi = sigma_end ** (1 / SUBSTEP_RHO), sigma_start ** (1 / SUBSTEP_RHO)
    grid = (hi + frac * (lo - hi)) ** SUBSTEP_RHO
    grid[0], grid[-1] = sigma_start, sigma_end
    return grid


def _integrate(gmm, sigma_start, sigma_end, x, steps, method, jacobian):
    """Shared Heun/Euler loop; returns ``(x, J or None, finite_mask)``.

    The Jacobian follows the same discrete scheme as the state, so it is the
    exact derivative of the returned map (forward sensitivity of the integrator).
    """
    x = np.array(x, dtype=float)
    d = gmm.dim
    J = np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy() if jacobian else None
    if sigma_start <= sigma_end:
        return x, J, np.ones(x.shape[:-1], dtype=bool)
    grid = substep_grid(sigma_start, sigma_end, steps)

    def field(sigma, y):
        if jacobian:
            s, hess = gmm.score_and_hessian(sigma, y)
            return -sigma * s, -sigma * hess
        return -sigma * gmm.score(sigma, y), None

    for s_cur, s_next in zip(grid[:-1], grid[1:]):
        h = s_next - s_cur
        d1, a1 = field(s_cur, x)
        if method == "euler":
            if jacobian:
                J = J + h * (a1 @ J)
            x = x + h * d1
            continue
        x_e = x + h * d1
        d2, a2 = field(s_next, x_e)
        if jacobian:
            a1j = a1 @ J
            J_e = J + h * a1j
            J = J + (0.5 * h) * (a1j + a2 @ J_e)
        x = x + (0.5 * h) * (d1 + d2)
    finite = np.all(np.isfinite(x), axis=-1)
    if jacobian:
        finite &= np.all(np.isfinite(J), axis=(-2, -1))
    return x, J, finite


def _failure_sigma(gmm, sigma_start, sigma_end, x, steps, method):
    """Re-run step by step to locate the level at which the state blew up."""
    grid = substep_grid(sigma_start, sigma_end, steps)
    for s_cur, s_next in zip(grid[:-1], grid[1:]):
        x, _, ok = _integrate(gmm, s_cur, s_next, x, 1, method, False)
        if not np.all(ok):
            return float(s_next)
    return float(sigma_end)


def solve_pf_ode(gmm: GaussianMixture, schedule: NoiseSchedule, sigma_start: float, x,
                 steps: int = DEFAULT_STEPS, method: str = "heun",
                 sigma_end: float | None = None) -> np.ndarray:
    """Integrate the PF-ODE from ``sigma_start`` down to the schedule's ``sigma_min``.

    Accepts a single point or a batch ``(..., d)``.  Raises
    :class:`IntegrationError` if any state becomes non-finite.
    """
    sigma_end = schedule.sigma_min if sigma_end is None else float(sigma_end)
    x = gmm._check(x)
    out, _, finite = _integrate(gmm, float(sigma_start), sigma_end, x, steps, method, False)
    if not np.all(finite):
        bad = x[~finite][0] if x.ndim > 1 else x
        raise IntegrationError(_failure_sigma(gmm, float(sigma_start), sigma_end, bad, steps, method))
    return out


def solve_pf_ode_masked(gmm, schedule, sigma_start, x, steps=DEFAULT_STEPS, method="heun"):
    """Batch variant that reports failures per row instead of raising."""
    out, _, finite = _integrate(gmm, float(sigma_start), schedule.sigma_min,
                                gmm._check(x), steps, method, False)
    return out, finite


@dataclass(frozen=True)
class SensitivityResult:
    value: np.ndarray
    jacobian: np.ndarray


@dataclass(frozen=True, eq=False)
class ConsistencyFunction:
    """Exact PF-ODE solution map ``g(sigma_t, x_t)`` at a fixed integrator budget."""

    gmm: GaussianMixture
    schedule: NoiseSchedule
    steps: int = DEFAULT_STEPS
    method: str = "heun"

    def __post_init__(self):
        if self.method not in ("heun", "euler"):
            raise ConfigError(f"unknown integrator {self.method!r}")
        if self.steps < (2 if self.method == "heun" else 1):
            raise ConfigError(f"integrator_steps too small: {self.steps}")

    def _start(self, sigma_t):
        sigma_t = float(sigma_t)
        if sigma_t > self.schedule.sigma_max * (1 + 1e-9):
            raise ValueError(f"sigma_t={sigma_t} above schedule range")
        return sigma_t

    def __call__(self, sigma_t: float, x) -> np.ndarray:
        return solve_pf_ode(self.gmm, self.schedule, self._start(sigma_t), x,
                            steps=self.steps, method=self.method)

    def jacobian(self, sigma_t: float, x) -> SensitivityResult:
        """Value and Jacobian ``d g / d x_t`` via forward sensitivities."""
        sigma_t = self._start(sigma_t)
        x = self.gmm._check(x)
        end = self.schedule.sigma_min
        value, J, finite = _integrate(self.gmm, sigma_t, end, x, self.steps, self.method, True)
        if not np.all(finite):
            raise IntegrationError(_failure_sigma(self.gmm, sigma_t, end, x, self.steps, self.method))
        return SensitivityResult(value, J)


def consistency_apply(cf: ConsistencyFunction, sigma_t: float, x) -> np.ndarray:
    return cf(sigma_t, x)


def consistency_jacobian(cf: ConsistencyFunction, sigma_t: float, x) -> SensitivityResult:
    return cf.jacobian(sigma_t, x)


def ancestral_step(gmm: GaussianMixture, sigma_t: float, sigma_prev: float, x,
                   rng: np.random.Generator) -> np.ndarray:
    """One reverse-kernel draw ``x + g2 * score + sqrt(g2) * eps``, ``g2 = sigma_t^2 - sigma_prev^2``."""
    if not 0 <= sigma_prev < sigma_t:
        raise OrderingError(f"need 0 <= sigma_prev < sigma_t, got {sigma_prev}, {sigma_t}")
    x = gmm._check(x)
    gap = sigma_t**2 - sigma_prev**2
    return x + gap * gmm.score(sigma_t, x) + np.sqrt(gap) * rng.standard_normal(x.shape)


def sample_unconditional(gmm: GaussianMixture, schedule: NoiseSchedule,
                         rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Ancestral sampling down the full ladder from ``N(0, sigma_max^2 I)``.

    Returns the ``T`` post-step states, shape ``(T, d)`` (or ``(T, n, d)`` for a
    batch); the last row is the final sample.
    """
    shape = (gmm.dim,) if n is None else (n, gmm.dim)
    x = schedule.sigma_max * rng.standard_normal(shape)
    ladder = schedule.ladder()
    states = []
    for s, s_prev in zip(ladder[:-1], ladder[1:]):
        x = ancestral_step(gmm, s, s_prev, x, rng)
        states.append(x)
    return np.stack(states)
