"""Guided diffusion inverse solvers over the analytic prior.

Eight procedures share one contract: a :class:`Problem` (prior, schedule,
operator, target, hyper-parameters, seed) goes in and a :class:`Trajectory`
comes out.  They differ only in how the clean-point approximation ``x_{0|t}`` is
formed and where the guidance gradient is applied:

========== ============================================ =========================
solver     approximation of the posterior sample        gradient applied to
========== ============================================ =========================
dps        Tweedie mean                                 next state (through Jac.)
freedom    Tweedie mean, with time-travel repeats       next state
mpgd       Tweedie mean                                 the mean itself
lgd        Tweedie mean + N(0, r_t^2)                   next state
stsl       Tweedie mean, plus a curvature correction    current state
proposed1  PF-ODE solution map (+ N(0, tau^2))          next state (through Jac.)
cm         (no guidance) multistep consistency sampler  -
proposed2  consistency sampler with input-noise descent the stage noise ``z``
========== ============================================ =========================

Independent runs are vectorized along a leading batch axis.  Every run draws from
its own labelled streams (see :mod:`cmdis.streams`), so a run's output does not
depend on what else is in its batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import ConsistencyFunction, ancestral_step
from .errors import ConfigError, SolverDivergence
from .mixture import GaussianMixture
from .operators import MeasurementOperator
from .schedule import NoiseSchedule, bridge_sample
from .streams import StackedStreams

SOLVERS = ("dps", "freedom", "mpgd", "lgd", "stsl", "proposed1", "cm", "proposed2")
DIVERGENCE_LIMIT = 1e3


@dataclass(frozen=True)
class SolverConfig:
    solver: str = "dps"
    zeta: float = 1.0
    zeta2: float | None = None  # later-stage step size for proposed2
    tau: float = 0.0
    K: int = 1
    travel_range: tuple[int, int] | None = None  # 1-based step indices from the noisy end
    r_t: float = 0.0
    eta: float = 0.0
    ts: tuple[float, ...] = ()  # extra consistency stages, descending sigma
    approx: str = "cm"  # proposed1 only: "cm" or "posterior_mean"
    scale_by_loss: bool = False

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        for name in ("zeta", "tau", "r_t", "eta"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.zeta2 is not None and not self.zeta2 >= 0:
            raise ConfigError("zeta2 must be non-negative")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError("K must be an integer >= 1")
        if self.approx not in ("cm", "posterior_mean"):
            raise ConfigError(f"unknown approx {self.approx!r}")
        object.__setattr__(self, "ts", tuple(float(t) for t in self.ts))
        if self.travel_range is not None:
            object.__setattr__(self, "travel_range", tuple(int(i) for i in self.travel_range))

    @property
    def later_zeta(self) -> float:
        return self.zeta if self.zeta2 is None else self.zeta2

    def validate_for(self, schedule: NoiseSchedule) -> None:
        if self.travel_range is not None:
            lo, hi = self.travel_range
            if not 1 <= lo <= hi <= schedule.steps:
                raise ConfigError(f"travel_range must lie within [1, {schedule.steps}]")
        ts = np.array(self.ts)
        if ts.size:
            if np.any(np.diff(ts) >= 0):
                raise ConfigError("ts must be strictly decreasing in sigma")
            if ts[0] >= schedule.sigma_max or ts[-1] <= schedule.sigma_min:
                raise ConfigError("ts must lie strictly inside (sigma_min, sigma_max)")


@dataclass(eq=False)
class Problem:
    gmm: GaussianMixture
    schedule: NoiseSchedule
    operator: MeasurementOperator
    y: object
    config: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    run: int = 0
    consistency: ConsistencyFunction | None = None

    def __post_init__(self):
        if self.operator.dim != self.gmm.dim:
            raise ConfigError(f"operator dimension {self.operator.dim} != prior dimension {self.gmm.dim}")
        self.config.validate_for(self.schedule)
        if self.consistency is None:
            self.consistency = ConsistencyFunction(self.gmm, self.schedule)

    def with_config(self, **changes) -> "Problem":
        from dataclasses import replace
        return replace(self, config=replace(self.config, **changes))


@dataclass
class Trajectory:
    """Per-step record of one solver run."""

    solver: str
    seed: int
    run: int
    sigma: np.ndarray
    x_t: np.ndarray
    x0t: np.ndarray
    loss: np.ndarray
    post_logdensity: np.ndarray
    prior_logdensity: np.ndarray
    final: np.ndarray
    nfe: int

    def __len__(self) -> int:
        return len(self.sigma)

    def is_finite(self) -> bool:
        arrays = (self.sigma, self.x_t, self.x0t, self.loss, self.post_logdensity,
                  self.prior_logdensity, self.final)
        return all(np.all(np.isfinite(a)) for a in arrays)


# -- the approximations and their guidance gradients ----------------------------

def approx_noise_scale(config: SolverConfig) -> float:
    if config.solver == "lgd":
        return config.r_t
    if config.solver in ("proposed1", "proposed2"):
        return config.tau
    return 0.0


def approximate(problem: Problem, sigma_t: float, x_t, noise=None):
    """``x_{0|t}`` and its Jacobian in ``x_t`` for the configured solver.

    ``noise`` is added to the approximation and treated as a constant.
    """
    cfg = problem.config
    if cfg.solver == "proposed1" and cfg.approx == "cm":
        res = problem.consistency.jacobian(sigma_t, x_t)
        x0, jac = res.value, res.jacobian
    else:
        x0, jac = problem.gmm.tweedie_with_jacobian(sigma_t, x_t)
    if noise is not None:
        x0 = x0 + noise
    return x0, jac


def _vjp(jac, g):
    return (g[..., :, None] * jac).sum(axis=-2)


def guidance(problem: Problem, sigma_t: float, x_t, y, noise=None, op_rng=None, op_noise=None):
    """Return ``(x_{0|t}, loss, gradient)`` for one guidance evaluation.

    The gradient is taken in ``x_t`` except for MPGD, which descends on the
    approximation itself.
    """
    x0, jac = approximate(problem, sigma_t, x_t, noise)
    loss, g = problem.operator.loss_and_grad(x0, y, op_rng, op_noise)
    if problem.config.solver == "mpgd":
        return x0, loss, g
    return x0, loss, _vjp(jac, g)


def inversion_guidance(problem: Problem, t: float, base, z, y, noise=None, op_rng=None, op_noise=None):
    """One consistency-inversion evaluation: ``x0 = g(t, base + t z)`` and ``d loss / d z``."""
    x_t = base + t * z
    res = problem.consistency.jacobian(t, x_t)
    x_tau = res.value if noise is None else res.value + noise
    loss, g = problem.operator.loss_and_grad(x_tau, y, op_rng, op_noise)
    return x_t, res.value, loss, t * _vjp(res.jacobian, g)


def stsl_correction(gmm: GaussianMixture, sigma_t: float, x, eps) -> np.ndarray:
    """Scalar ``eps . (s(x + eps) - s(x))`` whose gradient drives the STSL correction."""
    return (eps * (gmm.score(sigma_t, x + eps) - gmm.score(sigma_t, x))).sum(axis=-1)


def stsl_correction_grad(gmm: GaussianMixture, sigma_t: float, x, eps) -> np.ndarray:
    """Gradient of :func:`stsl_correction` in ``x``: ``(H(x + eps) - H(x)) eps``."""
    h_shift = gmm.score_hessian(sigma_t, x + eps)
    h_here = gmm.score_hessian(sigma_t, x)
    return ((h_shift - h_here) * eps[..., None, :]).sum(axis=-1)


# -- batched run bookkeeping ----------------------------------------------------

class _Batch:
    def __init__(self, problem: Problem, runs, targets):
        self.problem = problem
        self.runs = list(runs)
        self.size = len(self.runs)
        self.d = problem.gmm.dim
        if targets is None:
            self.y = problem.y
        else:
            self.y = np.asarray(targets)
            if len(self.y) != self.size:
                raise ValueError("need one target per run")
        self._streams = {}
        self.failed = np.full(self.size, -1)
        self.nfe = 0
        self.rows = []

    def rng(self, label: str) -> StackedStreams:
        if label not in self._streams:
            self._streams[label] = StackedStreams(self.problem.seed, self.runs, label)
        return self._streams[label]

    def normal(self, label: str) -> np.ndarray:
        return self.rng(label).standard_normal((self.size, self.d))

    def step_size(self, zeta: float, loss):
        if self.problem.config.scale_by_loss:
            return (zeta / np.maximum(loss, 1e-12))[:, None]
        return zeta

    def guard(self, arr, step):
        bad = ~np.all(np.isfinite(arr), axis=-1)
        with np.errstate(invalid="ignore", over="ignore"):
            bad |= np.linalg.norm(arr, axis=-1) > DIVERGENCE_LIMIT
        fresh = bad & (self.failed < 0)
        self.failed[fresh] = step
        if np.any(bad):
            arr = arr.copy()
            arr[bad] = 0.0
        return arr

    def record(self, sigma, x_t, x0t, loss):
        gmm = self.problem.gmm
        post = gmm.posterior(sigma, x_t).log_density(x0t)
        prior = gmm.log_prior(x0t)
        self.rows.append((float(sigma), x_t.copy(), x0t.copy(), np.broadcast_to(loss, (self.size,)).copy(),
                          post, prior))

    def finish(self, final):
        out = []
        sig = np.array([r[0] for r in self.rows])
        cols = [np.stack([r[i] for r in self.rows], axis=1) for i in range(1, 6)]
        for b, run in enumerate(self.runs):
            if self.failed[b] >= 0:
                out.append(SolverDivergence(int(self.failed[b])))
                continue
            out.append(Trajectory(self.problem.config.solver, self.problem.seed, run, sig.copy(),
                                  cols[0][b], cols[1][b], cols[2][b], cols[3][b], cols[4][b],
                                  final[b].copy(), self.nfe))
        return out


def _guided_ancestral(problem: Problem, b: _Batch):
    """DPS, FreeDOM, LGD and Proposed-I share this loop."""
    cfg, gmm, schedule = problem.config, problem.gmm, problem.schedule
    sampler = b.rng("sampler")
    scale = approx_noise_scale(cfg)
    lo, hi = cfg.travel_range if cfg.travel_range else (1, 0)
    ladder = schedule.ladder()
    x = schedule.sigma_max * sampler.standard_normal((b.size, b.d))
    for n in range(schedule.steps):
        s, sp, step = ladder[n], ladder[n + 1], n + 1
        travel = cfg.solver == "freedom" and lo <= step <= hi
        for k in range(cfg.K if travel else 1, 0, -1):
            x_prev = ancestral_step(gmm, s, sp, x, sampler)
            noise = scale * b.normal("approx") if scale > 0 else None
            x0, loss, grad = guidance(problem, s, x, b.y, noise, b.rng("operator"))
            b.nfe += 1
            x_prev = x_prev - b.step_size(cfg.zeta, loss) * grad
            if k != 1:
                # time travel: forward kernel back up to sigma_t, then repeat
                x = x_prev + np.sqrt(s * s - sp * sp) * b.normal("travel")
        b.record(s, x, x0, loss)
        x = b.guard(x_prev, step)
    return b.finish(x)


def _mpgd(problem: Problem, b: _Batch):
    cfg, gmm, schedule = problem.config, problem.gmm, problem.schedule
    sampler = b.rng("sampler")
    ladder = schedule.ladder()
    x = schedule.sigma_max * sampler.standard_normal((b.size, b.d))
    for n in range(schedule.steps):
        s, sp = ladder[n], ladder[n + 1]
        x0, loss, g = guidance(problem, s, x, b.y, None, b.rng("operator"))
        b.nfe += 1
        b.record(s, x, x0, loss)
        x0 = x0 - b.step_size(cfg.zeta, loss) * g
        x = b.guard(bridge_sample(x, x0, s, sp, sampler), n + 1)
    return b.finish(x)


def _stsl(problem: Problem, b: _Batch):
    cfg, gmm, schedule = problem.config, problem.gmm, problem.schedule
    sampler = b.rng("sampler")
    ladder = schedule.ladder()
    x = schedule.sigma_max * sampler.standard_normal((b.size, b.d))
    for n in range(schedule.steps):
        s, sp = ladder[n], ladder[n + 1]
        x0, loss, grad = guidance(problem, s, x, b.y, None, b.rng("operator"))
        b.nfe += 1
        b.record(s, x, x0, loss)
        x = x - b.step_size(cfg.zeta, loss) * grad
        if cfg.eta > 0:
            eps = b.normal("stsl")
            x = x - cfg.eta * stsl_correction_grad(gmm, s, x, eps)
        x = b.guard(ancestral_step(gmm, s, sp, x, sampler), n + 1)
    return b.finish(x)


def _consistency(problem: Problem, b: _Batch):
    """Multistep consistency sampling; with ``solver == "proposed2"`` each stage
    also runs ``K`` descent steps on its noise draw."""
    cfg = problem.config
    invert = cfg.solver == "proposed2"
    sampler = b.rng("sampler")
    stages = (problem.schedule.sigma_max, *cfg.ts)
    x0 = np.zeros((b.size, b.d))
    for n, t in enumerate(stages):
        z = sampler.standard_normal((b.size, b.d))
        base = x0
        zeta = cfg.zeta if n == 0 else cfg.later_zeta
        if not invert:
            x_t = base + t * z
            x0 = problem.consistency(t, x_t)
            loss = problem.operator.loss(x0, b.y, b.rng("operator"))
            b.nfe += 1
        for _ in range(cfg.K if invert else 0):
            noise = cfg.tau * b.normal("approx") if cfg.tau > 0 else None
            x_t, x0, loss, gz = inversion_guidance(problem, t, base, z, b.y, noise, b.rng("operator"))
            b.nfe += 1
            z = b.guard(z - b.step_size(zeta, loss) * gz, n + 1)
        b.record(t, x_t, x0, loss)
    return b.finish(x0)


_LOOPS = {
    "dps": _guided_ancestral,
    "freedom": _guided_ancestral,
    "lgd": _guided_ancestral,
    "proposed1": _guided_ancestral,
    "mpgd": _mpgd,
    "stsl": _stsl,
    "cm": _consistency,
    "proposed2": _consistency,
}


def run_batch(problem: Problem, runs, targets=None) -> list:
    """Run the configured solver for several run indices at once.

    Returns one entry per run: a :class:`Trajectory`, or the
    :class:`SolverDivergence` describing where that run failed.
    """
    b = _Batch(problem, runs, targets)
    with np.errstate(over="ignore", invalid="ignore"):
        return _LOOPS[problem.config.solver](problem, b)


def solve(problem: Problem) -> Trajectory:
    (out,) = run_batch(problem, [problem.run], None if problem.y is None else [problem.y])
    if isinstance(out, SolverDivergence):
        raise out
    return out


def _solve_as(name):
    def run(problem: Problem) -> Trajectory:
        if problem.config.solver != name:
            problem = problem.with_config(solver=name)
        return solve(problem)
    run.__name__ = f"solve_{name}"
    run.__doc__ = f"Single-run ``{name}`` solver; raises :class:`SolverDivergence` on failure."
    return run


solve_dps = _solve_as("dps")
solve_freedom = _solve_as("freedom")
solve_mpgd = _solve_as("mpgd")
solve_lgd = _solve_as("lgd")
solve_stsl = _solve_as("stsl")
solve_proposed1 = _solve_as("proposed1")
sample_cm = _solve_as("cm")
solve_proposed2 = _solve_as("proposed2")
