"""Closed-form analytics for isotropic Gaussian-mixture priors under VE noise.

Every quantity here is exact: the marginal at noise level ``sigma_t`` is again a
mixture with variance ``sigma**2 + sigma_t**2`` and the posterior over the clean
point is a reweighted mixture with shrunk means.  These serve as the oracles that
the approximate samplers are measured against.

Arrays follow the ``(..., d)`` convention: any number of leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))

TOY_MEANS = ((-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0), (0.0, 0.0))
TOY_SIGMA = 0.1


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=-1, keepdims=True)
    return np.log(np.exp(a - m).sum(axis=-1)) + m[..., 0]


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Mixture of ``N`` isotropic Gaussians sharing one standard deviation.

    Attributes:
        means: Component means, shape ``(N, d)``.
        sigma: Shared per-component standard deviation.
        weights: Mixing weights, shape ``(N,)``; uniform when omitted.
    """

    means: np.ndarray
    sigma: float
    weights: np.ndarray | None = None

    def __post_init__(self):
        means = np.array(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        if means.ndim != 2 or means.shape[0] < 1 or means.shape[1] < 1:
            raise ValueError(f"means must have shape (N, d), got {means.shape}")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        sigma = float(self.sigma)
        if not (np.isfinite(sigma) and sigma > 0):
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        n = means.shape[0]
        if self.weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.array(self.weights, dtype=float).reshape(-1)
            if weights.shape != (n,):
                raise ValueError(f"expected {n} weights, got {weights.shape[0]}")
            if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
                raise ValueError("weights must be finite and strictly positive")
            if abs(weights.sum() - 1.0) > 1e-12:
                raise ValueError(f"weights must sum to 1, got {weights.sum()!r}")
        means.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "log_weights", np.log(weights))
        object.__setattr__(self, "_uniform", bool(np.all(weights == weights[0])))

    @classmethod
    def toy(cls) -> "GaussianMixture":
        """The five-component planar mixture: four corners plus the origin."""
        return cls(np.array(TOY_MEANS), TOY_SIGMA)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing dimension {self.dim}, got shape {x.shape}")
        return x

    def variance(self, sigma_t: float) -> float:
        return self.sigma**2 + float(sigma_t) ** 2

    def _logits(self, sigma_t: float, x: np.ndarray) -> np.ndarray:
        diff = x[..., None, :] - self.means
        sq = (diff * diff).sum(axis=-1)
        return self.log_weights - sq / (2.0 * self.variance(sigma_t))

    # -- densities ---------------------------------------------------------

    def log_marginal(self, sigma_t: float, x) -> np.ndarray:
        """Log-density of the noised marginal ``p_t`` at ``x``."""
        x = self._check(x)
        v = self.variance(sigma_t)
        return _logsumexp(self._logits(sigma_t, x)) - 0.5 * self.dim * (LOG_2PI + np.log(v))

    def marginal_density(self, sigma_t: float, x) -> np.ndarray:
        return np.exp(self.log_marginal(sigma_t, x))

    def log_prior(self, x) -> np.ndarray:
        return self.log_marginal(0.0, x)

    def component_weights(self, sigma_t: float, x) -> np.ndarray:
        """Responsibilities of each component for a point observed at ``sigma_t``."""
        return _softmax(self._logits(sigma_t, self._check(x)))

    # -- derivatives -------------------------------------------------------

    def score(self, sigma_t: float, x) -> np.ndarray:
        """Gradient of ``log p_t`` at ``x``."""
        x = self._check(x)
        w = _softmax(self._logits(sigma_t, x))
        m = (w[..., :, None] * self.means).sum(axis=-2)
        return (m - x) / self.variance(sigma_t)

    def score_hessian(self, sigma_t: float, x) -> np.ndarray:
        """Hessian of ``log p_t``; symmetric, shape ``(..., d, d)``."""
        return self.score_and_hessian(sigma_t, x)[1]

    def score_and_hessian(self, sigma_t: float, x) -> tuple[np.ndarray, np.ndarray]:
        x = self._check(x)
        v = self.variance(sigma_t)
        w = _softmax(self._logits(sigma_t, x))
        m = (w[..., :, None] * self.means).sum(axis=-2)
        c = self.means - m[..., None, :]
        # responsibility-weighted covariance of the component means
        spread = np.einsum("...n,...ni,...nj->...ij", w, c, c)
        spread = 0.5 * (spread + np.swapaxes(spread, -1, -2))
        hess = spread / (v * v) - np.eye(self.dim) / v
        return (m - x) / v, hess

    # -- posterior over the clean point -------------------------------------

    def posterior(self, sigma_t: float, x_t) -> "PosteriorMixture":
        """Exact ``p(X_0 | X_t = x_t)`` in completed-square form."""
        x_t = self._check(x_t)
        sigma_t = float(sigma_t)
        if not sigma_t > 0:
            raise ValueError("posterior requires sigma_t > 0")
        v = self.variance(sigma_t)
        s2 = self.sigma**2
        weights = _softmax(self._logits(sigma_t, x_t))
        means = (s2 * x_t[..., None, :] + sigma_t**2 * self.means) / v
        return PosteriorMixture(weights, means, s2 * sigma_t**2 / v)

    def posterior_mean(self, sigma_t: float, x_t) -> np.ndarray:
        return self.posterior(sigma_t, x_t).mean()

    def posterior_cov(self, sigma_t: float, x_t) -> np.ndarray:
        return self.posterior(sigma_t, x_t).cov()

    def tweedie_mean(self, sigma_t: float, x_t) -> np.ndarray:
        """First-order Tweedie estimate ``x_t + sigma_t**2 * score``."""
        x_t = self._check(x_t)
        return x_t + float(sigma_t) ** 2 * self.score(sigma_t, x_t)

    def tweedie_cov(self, sigma_t: float, x_t) -> np.ndarray:
        """Second-order Tweedie covariance ``sigma_t**2 (I + sigma_t**2 H)``."""
        s2 = float(sigma_t) ** 2
        return s2 * (np.eye(self.dim) + s2 * self.score_hessian(sigma_t, x_t))

    def tweedie_with_jacobian(self, sigma_t: float, x_t) -> tuple[np.ndarray, np.ndarray]:
        """Tweedie mean together with its Jacobian ``I + sigma_t**2 H``."""
        x_t = self._check(x_t)
        s2 = float(sigma_t) ** 2
        score, hess = self.score_and_hessian(sigma_t, x_t)
        return x_t + s2 * score, np.eye(self.dim) + s2 * hess

    # -- geometry and sampling ----------------------------------------------

    def nearest_mode(self, x) -> np.ndarray:
        """Index of the closest mean; ties go to the lowest index."""
        x = self._check(x)
        diff = x[..., None, :] - self.means
        return np.argmin((diff * diff).sum(axis=-1), axis=-1)

    def boundary_distance(self, x) -> np.ndarray:
        """Euclidean distance from ``x`` to the boundary of its Voronoi cell."""
        x = self._check(x)
        diff = x[..., None, :] - self.means
        sq = (diff * diff).sum(axis=-1)
        k = np.argmin(sq, axis=-1)
        own = np.take_along_axis(sq, k[..., None], axis=-1)
        sep = np.linalg.norm(self.means[k][..., None, :] - self.means, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = (sq - own) / (2.0 * sep)
        dist = np.where(sep > 0, dist, np.inf)
        return dist.min(axis=-1)

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        """Draw from the clean prior; a single point when ``n`` is None."""
        size = 1 if n is None else int(n)
        idx = rng.choice(self.n_components, size=size, p=self.weights)
        out = self.means[idx] + self.sigma * rng.standard_normal((size, self.dim))
        return out[0] if n is None else out

    def sample_marginal(self, sigma_t: float, rng: np.random.Generator, n: int) -> np.ndarray:
        x0 = self.sample(rng, n)
        return x0 + float(sigma_t) * rng.standard_normal(x0.shape)


@dataclass(frozen=True, eq=False)
class PosteriorMixture:
    """Exact posterior over the clean point: shared-variance Gaussian mixture.

    ``weights`` has shape ``(..., N)`` and ``means`` ``(..., N, d)``, so a batch
    of conditioning points yields a batch of posteriors.
    """

    weights: np.ndarray
    means: np.ndarray
    var: float

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def log_density(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        diff = z[..., None, :] - self.means
        sq = (diff * diff).sum(axis=-1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        comp = logw - sq / (2.0 * self.var)
        return _logsumexp(comp) - 0.5 * self.dim * (LOG_2PI + np.log(self.var))

    def density(self, z) -> np.ndarray:
        return np.exp(self.log_density(z))

    def mean(self) -> np.ndarray:
        return (self.weights[..., :, None] * self.means).sum(axis=-2)

    def cov(self) -> np.ndarray:
        mean = self.mean()
        second = np.einsum("...n,...ni,...nj->...ij", self.weights, self.means, self.means)
        cov = second + self.var * np.eye(self.dim) - mean[..., :, None] * mean[..., None, :]
        return 0.5 * (cov + np.swapaxes(cov, -1, -2))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        if self.weights.ndim != 1:
            raise ValueError("sampling needs a single (unbatched) posterior")
        size = 1 if n is None else int(n)
        p = self.weights / self.weights.sum()
        idx = rng.choice(len(p), size=size, p=p)
        out = self.means[idx] + np.sqrt(self.var) * rng.standard_normal((size, self.dim))
        return out[0] if n is None else out
