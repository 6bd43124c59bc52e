"""Noise-level ladders and the variance-exploding forward process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, OrderingError

KINDS = ("karras", "quadratic", "linear")
DEFAULT_SIGMA_MIN = 0.002


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Descending ladder ``sigma_max = levels[0] > ... > levels[-1] = sigma_min``.

    Each kind also carries a continuous time parametrization, used only to
    express ``d sigma^2 / dt``:

    * ``karras``: ``t`` in [0, 1], ``sigma(t) = (smin^(1/rho) + t (smax^(1/rho) - smin^(1/rho)))^rho``
    * ``linear``: ``t`` in [0, 1], ``sigma(t) = smin + t (smax - smin)``
    * ``quadratic``: ``t = sigma``, i.e. ``sigma^2 = t^2``

    Levels sit on an even grid of ``t``.
    """

    kind: str = "karras"
    sigma_min: float = DEFAULT_SIGMA_MIN
    sigma_max: float = 4.0
    steps: int = 100
    rho: float = 7.0
    levels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        smin, smax = float(self.sigma_min), float(self.sigma_max)
        if not (np.isfinite(smin) and np.isfinite(smax) and 0 < smin < smax):
            raise ConfigError(f"need 0 < sigma_min < sigma_max, got {smin}, {smax}")
        if int(self.steps) != self.steps or self.steps < 2:
            raise ConfigError(f"steps must be an integer >= 2, got {self.steps}")
        if not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        object.__setattr__(self, "sigma_min", smin)
        object.__setattr__(self, "sigma_max", smax)
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "rho", float(self.rho))
        levels = self.sigma_of(self.times())
        # pin the endpoints against round-off in the power transform
        levels[0], levels[-1] = smax, smin
        if np.any(np.diff(levels) >= 0):
            raise ConfigError("schedule levels are not strictly decreasing")
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    def times(self) -> np.ndarray:
        """Time grid matching ``levels`` (descending)."""
        if self.kind == "quadratic":
            return np.linspace(self.sigma_max, self.sigma_min, self.steps)
        return 1.0 - np.arange(self.steps) / (self.steps - 1)

    def sigma_of(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "karras":
            lo, hi = self.sigma_min ** (1 / self.rho), self.sigma_max ** (1 / self.rho)
            return (lo + t * (hi - lo)) ** self.rho
        if self.kind == "linear":
            return self.sigma_min + t * (self.sigma_max - self.sigma_min)
        return t.copy()

    def time_of(self, sigma) -> np.ndarray:
        sigma = np.asarray(sigma, dtype=float)
        if self.kind == "karras":
            lo, hi = self.sigma_min ** (1 / self.rho), self.sigma_max ** (1 / self.rho)
            return (sigma ** (1 / self.rho) - lo) / (hi - lo)
        if self.kind == "linear":
            return (sigma - self.sigma_min) / (self.sigma_max - self.sigma_min)
        return sigma.copy()

    def dsigma2_dt(self, sigma) -> np.ndarray:
        """Continuous ``d sigma^2 / dt`` at noise level ``sigma``."""
        sigma = np.asarray(sigma, dtype=float)
        if self.kind == "karras":
            lo, hi = self.sigma_min ** (1 / self.rho), self.sigma_max ** (1 / self.rho)
            dsigma = self.rho * sigma ** ((self.rho - 1) / self.rho) * (hi - lo)
        elif self.kind == "linear":
            dsigma = np.full_like(sigma, self.sigma_max - self.sigma_min)
        else:
            dsigma = np.ones_like(sigma)
        return 2.0 * sigma * dsigma

    def sigma2_gaps(self) -> np.ndarray:
        """``levels[i]**2 - levels[i+1]**2``; all strictly positive."""
        return self.levels[:-1] ** 2 - self.levels[1:] ** 2

    def discrete_dsigma2_dt(self) -> np.ndarray:
        """Finite-difference ``d sigma^2 / dt`` between adjacent levels."""
        return self.sigma2_gaps() / -np.diff(self.times())

    def ladder(self) -> np.ndarray:
        """Levels with a terminal zero appended: ``T + 1`` entries for ``T`` reverse steps."""
        return np.append(self.levels, 0.0)


def make_schedule(kind: str = "karras", sigma_min: float = DEFAULT_SIGMA_MIN,
                  sigma_max: float = 4.0, steps: int = 100, rho: float = 7.0) -> NoiseSchedule:
    return NoiseSchedule(kind, sigma_min, sigma_max, steps, rho)


def forward_perturb(x0, sigma_t: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``X_t ~ N(x0, sigma_t^2 I)``."""
    x0 = np.asarray(x0, dtype=float)
    if sigma_t < 0:
        raise ValueError("sigma_t must be non-negative")
    return x0 + sigma_t * rng.standard_normal(x0.shape)


def bridge_sample(x_t, x0, sigma_t: float, sigma_prev: float, rng: np.random.Generator) -> np.ndarray:
    """Sample the VE bridge ``q(X_{t-1} | X_t = x_t, X_0 = x0)``.

    Mean ``x0 + (sigma_prev^2 / sigma_t^2)(x_t - x0)``, per-coordinate variance
    ``sigma_prev^2 (sigma_t^2 - sigma_prev^2) / sigma_t^2``.
    """
    if not 0 <= sigma_prev < sigma_t:
        raise OrderingError(f"need 0 <= sigma_prev < sigma_t, got {sigma_prev}, {sigma_t}")
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    ratio = sigma_prev**2 / sigma_t**2
    std = sigma_prev * np.sqrt(1.0 - ratio)
    return x0 + ratio * (x_t - x0) + std * rng.standard_normal(x_t.shape)
