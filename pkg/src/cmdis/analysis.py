"""Experiments built on the exact posterior: approximation validity, decision
maps, the density lower bound, and solver benchmarking.

Every density reported here is evaluated through :meth:`GaussianMixture.posterior`
or :meth:`GaussianMixture.log_prior`, never through an approximation under test.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import ConsistencyFunction, solve_pf_ode_masked
from .errors import ConfigError, SolverDivergence
from .mixture import TOY_MEANS, TOY_SIGMA, GaussianMixture
from .operators import MeasurementOperator, MlpNetwork, train_mlp
from .parallel import blocks, pmap
from .schedule import NoiseSchedule
from .solvers import Problem, SolverConfig, Trajectory, run_batch
from .streams import stream


# -- approximation validity -----------------------------------------------------

def lgd_std(sigma_t: float) -> float:
    """Default LGD perturbation scale ``sigma_t / sqrt(1 + sigma_t^2)``."""
    return float(sigma_t) / np.sqrt(1.0 + float(sigma_t) ** 2)


@dataclass
class ValidityReport:
    """Exact-posterior and prior log-densities of candidate clean points, per method."""

    post_logdensity: dict[str, np.ndarray]
    prior_logdensity: dict[str, np.ndarray]
    points: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def methods(self) -> list[str]:
        return list(self.post_logdensity)

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, lp in self.post_logdensity.items():
            lp = np.ravel(lp)
            out[name] = {
                "mean": float(np.mean(lp)),
                "median": float(np.median(lp)),
                "q10": float(np.quantile(lp, 0.1)),
                "q90": float(np.quantile(lp, 0.9)),
                "prior_mean": float(np.mean(self.prior_logdensity[name])),
            }
        return out

    @classmethod
    def from_trajectories(cls, runs: dict[str, list]) -> "ValidityReport":
        """Stack per-step records, ``(n_runs, n_steps)``, skipping diverged runs."""
        post, prior = {}, {}
        for name, trajs in runs.items():
            ok = [t for t in trajs if isinstance(t, Trajectory)]
            post[name] = np.stack([t.post_logdensity for t in ok])
            prior[name] = np.stack([t.prior_logdensity for t in ok])
        return cls(post, prior)


def compare_approximations(gmm: GaussianMixture, schedule: NoiseSchedule, x_t, sigma_t: float,
                           rng: np.random.Generator | None = None, n_draws: int = 1000,
                           r: float | None = None,
                           consistency: ConsistencyFunction | None = None) -> ValidityReport:
    """Score four stand-ins for a posterior sample at a single ``x_t``.

    ``posterior_mean``: the Tweedie mean.  ``lgd``: mean plus isotropic noise of
    scale ``r``.  ``stsl``: mean plus noise with the second-order Tweedie
    covariance.  ``pf_ode``: the exact flow map ``Phi_0(x_t)``.
    """
    sigma_t = float(sigma_t)
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    x_t = gmm._check(x_t)
    if x_t.ndim != 1:
        raise ValueError("compare_approximations takes a single point")
    rng = np.random.default_rng(0) if rng is None else rng
    r = lgd_std(sigma_t) if r is None else float(r)
    cf = consistency or ConsistencyFunction(gmm, schedule)
    post = gmm.posterior(sigma_t, x_t)

    mean = gmm.tweedie_mean(sigma_t, x_t)
    cov = gmm.tweedie_cov(sigma_t, x_t)
    # the Tweedie covariance is PSD analytically; clip round-off before factoring
    evals, evecs = np.linalg.eigh(cov)
    root = evecs * np.sqrt(np.clip(evals, 0.0, None))
    points = {
        "posterior_mean": mean[None, :],
        "lgd": mean + r * rng.standard_normal((n_draws, gmm.dim)),
        "stsl": mean + rng.standard_normal((n_draws, gmm.dim)) @ root.T,
        "pf_ode": cf(sigma_t, x_t)[None, :],
    }
    return ValidityReport({k: post.log_density(p) for k, p in points.items()},
                          {k: gmm.log_prior(p) for k, p in points.items()}, points)


# -- decision maps --------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    lo: float = -2.0
    hi: float = 2.0
    resolution: int = 201

    def axis(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.resolution)

    def points(self) -> np.ndarray:
        """Cells in row-major order, ``y`` outer and ``x`` inner; shape ``(n*n, 2)``."""
        a = self.axis()
        xx, yy = np.meshgrid(a, a)
        return np.stack([xx.ravel(), yy.ravel()], axis=-1)


@dataclass
class DecisionMap:
    grid: GridSpec
    sigma_t: float
    ode_mode: np.ndarray  # -1 where integration failed
    voronoi_mode: np.ndarray
    boundary: np.ndarray  # cells inside the excluded boundary band
    agreement: float

    def as_image(self, which: str = "ode") -> np.ndarray:
        n = self.grid.resolution
        return (self.ode_mode if which == "ode" else self.voronoi_mode).reshape(n, n)


def decision_map(gmm: GaussianMixture, schedule: NoiseSchedule, sigma_t: float,
                 grid: GridSpec | None = None, band: float = 0.05, steps: int = 80,
                 threads: int = 1) -> DecisionMap:
    """Compare the mode reached by the PF-ODE from each cell with the cell's Voronoi mode.

    Cells closer than ``band`` to a Voronoi boundary, and cells whose
    integration failed, are excluded from ``agreement``.
    """
    grid = grid or GridSpec()
    if gmm.dim != 2:
        raise ConfigError("decision maps need a 2-d prior")
    pts = grid.points()

    def run(idx):
        end, ok = solve_pf_ode_masked(gmm, schedule, sigma_t, pts[idx], steps=steps)
        return np.where(ok, gmm.nearest_mode(np.where(ok[:, None], end, 0.0)), -1)

    chunks = blocks(range(len(pts)), 4096)
    ode = np.concatenate(pmap(lambda c: run(np.array(c)), chunks, threads))
    vor = gmm.nearest_mode(pts)
    boundary = gmm.boundary_distance(pts) < band
    keep = ~boundary & (ode >= 0)
    agreement = float(np.mean(ode[keep] == vor[keep])) if np.any(keep) else float("nan")
    return DecisionMap(grid, float(sigma_t), ode, vor, boundary, agreement)


# -- density lower bound --------------------------------------------------------

@dataclass
class BoundReport:
    sigma_t: float
    n_samples: int
    qualified: np.ndarray  # per-sample sphere condition
    log_density: np.ndarray  # exact-posterior log-density at Phi_0(x_t)
    log_bound: np.ndarray

    @property
    def qualification_rate(self) -> float:
        return float(np.mean(self.qualified))

    @property
    def margins(self) -> np.ndarray:
        """``log p - log bound`` for qualifying samples."""
        return (self.log_density - self.log_bound)[self.qualified]

    @property
    def violations(self) -> int:
        return int(np.sum(self.margins < 0))


def density_lower_bound(gmm: GaussianMixture, sigma_t: float, c) -> np.ndarray:
    """Log of ``(1/N) (4 pi sigma^2)^(-d/2) exp(-2 c^2 / sigma_t^2 - (d + 1)/2)``."""
    d, n, s2 = gmm.dim, gmm.n_components, gmm.sigma**2
    c = np.asarray(c, dtype=float)
    return -np.log(n) - 0.5 * d * np.log(4 * np.pi * s2) - 2 * c * c / sigma_t**2 - 0.5 * (d + 1)


def verify_density_bound(gmm: GaussianMixture, schedule: NoiseSchedule, sigma_t: float, n_samples: int,
                  rng: np.random.Generator, consistency: ConsistencyFunction | None = None) -> BoundReport:
    """Check that flow-map outputs keep positive posterior density above the lower bound.

    A sample qualifies when ``Phi_0(x_t)`` lies within ``sqrt((d + 1) sigma^2)``
    of some mean.
    """
    sigma_t = float(sigma_t)
    if not sigma_t > 0:
        raise ValueError("sigma_t must be positive")
    cf = consistency or ConsistencyFunction(gmm, schedule)
    x_t = gmm.sample_marginal(sigma_t, rng, n_samples)
    phi = cf(sigma_t, x_t)
    c = np.maximum(np.linalg.norm(x_t, axis=-1), np.linalg.norm(phi, axis=-1))
    sq = ((phi[:, None, :] - gmm.means) ** 2).sum(axis=-1)
    qualified = sq.min(axis=-1) <= (gmm.dim + 1) * gmm.sigma**2
    logp = gmm.posterior(sigma_t, x_t).log_density(phi)
    return BoundReport(sigma_t, n_samples, qualified, logp, density_lower_bound(gmm, sigma_t, c))


# -- benchmarks -----------------------------------------------------------------

def embedded_toy(dim: int = 8, sigma: float = TOY_SIGMA) -> GaussianMixture:
    """The five toy modes in the first two coordinates, zero in the rest."""
    means = np.zeros((len(TOY_MEANS), dim))
    means[:, :2] = TOY_MEANS
    return GaussianMixture(means, sigma)


@dataclass(eq=False)
class ClassificationTask:
    """Steer samples into a target mode under Model A; score them with Model B.

    Run ``r`` asks for class ``r % n_classes``, so one seed covers every class once.
    """

    gmm: GaussianMixture
    schedule: NoiseSchedule
    model_a: MlpNetwork
    model_b: MlpNetwork
    kind: str = "classification"

    @property
    def runs_per_seed(self) -> int:
        return self.gmm.n_components

    def operator(self, smoothing_tau: float = 0.0) -> MeasurementOperator:
        return MeasurementOperator.classifier(self.model_a, smoothing_tau)

    def targets(self, master_seed: int, runs) -> np.ndarray:
        return np.array([r % self.gmm.n_components for r in runs])

    def scores(self, finals, targets) -> dict[str, np.ndarray]:
        return {"model_a": (self.model_a.predict(finals) == targets).astype(float),
                "model_b": (self.model_b.predict(finals) == targets).astype(float)}


@dataclass(eq=False)
class LinearTask:
    """Recover a prior draw from ``y = A x*``; scored by the measurement residual."""

    gmm: GaussianMixture
    schedule: NoiseSchedule
    matrix: np.ndarray
    runs_per_seed: int = 1
    kind: str = "linear"

    def operator(self, smoothing_tau: float = 0.0) -> MeasurementOperator:
        return MeasurementOperator.linear(self.matrix, smoothing_tau)

    def targets(self, master_seed: int, runs) -> np.ndarray:
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        return np.stack([a @ self.gmm.sample(stream(master_seed, r, "target")) for r in runs])

    def scores(self, finals, targets) -> dict[str, np.ndarray]:
        a = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        r = finals @ a.T - targets
        return {"mse": (r * r).mean(axis=-1)}


def toy_classification(dim: int = 8, steps: int = 50, seed_a: int = 1, seed_b: int = 2) -> ClassificationTask:
    """Default classification benchmark.

    Model A is a wide net fit to only 50 prior draws, so it picks up spurious
    directions in the nuisance coordinates; Model B is a small net trained on
    4000 draws.  Both reach full accuracy on clean prior samples.
    """
    gmm = embedded_toy(dim)
    model_a = train_mlp(gmm, samples=50, hidden=(64,), epochs=2000, batch_size=50, seed=seed_a)
    model_b = train_mlp(gmm, samples=4000, hidden=(16,), epochs=30, seed=seed_b)
    return ClassificationTask(gmm, NoiseSchedule("karras", steps=steps), model_a, model_b)


@dataclass
class SolverResult:
    label: str
    config: SolverConfig
    runs: np.ndarray
    scores: dict[str, np.ndarray]  # per run; NaN for diverged runs
    diverged: np.ndarray
    post_logdensity: np.ndarray  # per run, mean over steps of the x_{0|t} record
    final_prior_logdensity: np.ndarray
    divergence_steps: dict[int, int]
    finals: np.ndarray  # NaN rows for diverged runs

    def per_seed(self, metric: str, runs_per_seed: int) -> np.ndarray:
        """Per-seed mean of ``metric``; a diverged run counts as 0 for accuracies."""
        vals = self.scores[metric]
        if metric.startswith("model_"):
            vals = np.nan_to_num(vals, nan=0.0)
        return vals.reshape(-1, runs_per_seed).mean(axis=1)

    def summary(self) -> dict[str, float]:
        ok = ~self.diverged
        row = {k: float(np.mean(np.nan_to_num(v, nan=0.0))) if k.startswith("model_")
               else (float(np.mean(v[ok])) if ok.any() else float("nan")) for k, v in self.scores.items()}
        row["post_logdensity"] = float(np.mean(self.post_logdensity[ok])) if ok.any() else float("nan")
        row["final_prior_logdensity"] = float(np.mean(self.final_prior_logdensity[ok])) if ok.any() else float("nan")
        row["divergence_rate"] = float(np.mean(self.diverged))
        return row


def run_solver(task, config: SolverConfig, n_seeds: int, master_seed: int = 0, threads: int = 1,
               label: str | None = None, consistency: ConsistencyFunction | None = None) -> SolverResult:
    """Run ``config`` for ``n_seeds`` seeds (``task.runs_per_seed`` runs each)."""
    if n_seeds < 1:
        raise ConfigError("need at least one seed")
    runs = np.arange(n_seeds * task.runs_per_seed)
    targets = task.targets(master_seed, runs)
    cf = consistency or ConsistencyFunction(task.gmm, task.schedule)
    problem = Problem(task.gmm, task.schedule, task.operator(), targets[0], config,
                      seed=master_seed, consistency=cf)
    out = [None] * len(runs)

    def job(chunk):
        idx = np.array(chunk)
        return idx, run_batch(problem, runs[idx], targets[idx])

    for idx, res in pmap(job, blocks(range(len(runs))), threads):
        for i, r in zip(idx, res):
            out[i] = r
    diverged = np.array([isinstance(o, SolverDivergence) for o in out])
    finals = np.array([np.full(task.gmm.dim, np.nan) if d else o.final for o, d in zip(out, diverged)])
    safe = np.where(diverged[:, None], 0.0, finals)
    scores = {k: np.where(diverged, np.nan, v) for k, v in task.scores(safe, targets).items()}
    post = np.array([np.nan if d else float(np.mean(o.post_logdensity)) for o, d in zip(out, diverged)])
    prior = np.where(diverged, np.nan, task.gmm.log_prior(safe))
    steps = {int(r): o.step for r, o, d in zip(runs, out, diverged) if d}
    return SolverResult(label or config.solver, config, runs, scores, diverged, post, prior, steps, finals)


def benchmark_solvers(task, configs: dict[str, SolverConfig], n_seeds: int, master_seed: int = 0,
                      threads: int = 1) -> dict[str, SolverResult]:
    """Run every labelled configuration on the same seeds; individual divergences are recorded."""
    if not configs:
        raise ConfigError("benchmark needs at least one solver configuration")
    cf = ConsistencyFunction(task.gmm, task.schedule)
    return {label: run_solver(task, cfg, n_seeds, master_seed, threads, label, cf)
            for label, cfg in configs.items()}


@dataclass
class AblationReport:
    taus: tuple[float, ...]
    accuracy: dict[float, dict[str, float]]  # tau -> {"model_a": .., "model_b": ..}
    per_seed_b: dict[float, np.ndarray]

    def no_worse_fraction(self, tau: float) -> float:
        """Fraction of seeds whose Model-B accuracy at ``tau`` is at least that at ``tau = 0``."""
        return float(np.mean(self.per_seed_b[tau] >= self.per_seed_b[0.0]))

    def better_fraction(self, tau: float) -> float:
        return float(np.mean(self.per_seed_b[tau] > self.per_seed_b[0.0]))


def overfit_ablation(task: ClassificationTask, config: SolverConfig, taus=(0.0, 0.05), n_seeds: int = 100,
                     master_seed: int = 0, threads: int = 1) -> AblationReport:
    """Model-A and Model-B accuracy of the finals for each smoothing level ``tau``."""
    taus = tuple(float(t) for t in taus)
    if 0.0 not in taus:
        taus = (0.0, *taus)
    cf = ConsistencyFunction(task.gmm, task.schedule)
    acc, per_seed = {}, {}
    for tau in taus:
        res = run_solver(task, replace(config, tau=tau), n_seeds, master_seed, threads, consistency=cf)
        acc[tau] = {m: res.summary()[m] for m in ("model_a", "model_b")}
        per_seed[tau] = res.per_seed("model_b", task.runs_per_seed)
    return AblationReport(taus, acc, per_seed)
