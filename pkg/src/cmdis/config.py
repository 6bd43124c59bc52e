"""Experiment configuration: JSON in, validated objects out.

Validation is complete before any computation starts; unknown keys and bad
values are reported with the line of the config file they appear on.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .analysis import ClassificationTask, LinearTask, embedded_toy
from .errors import CmdisError, ConfigError
from .mixture import GaussianMixture
from .operators import MeasurementOperator, MlpNetwork, train_mlp
from .schedule import NoiseSchedule
from .solvers import SolverConfig

SECTIONS = {
    "prior": {"preset", "dim", "means", "sigma", "weights"},
    "schedule": {"kind", "sigma_min", "sigma_max", "steps", "rho"},
    "operator": {"kind", "matrix", "distance", "smoothing_tau", "model_a", "model_b"},
    "seeds": {"master", "runs"},
    "analysis": {"taus", "ablation"},
}
TOP_LEVEL = set(SECTIONS) | {"target", "solvers", "integrator_steps", "output"}
MODEL_KEYS = {"path", "samples", "hidden", "epochs", "lr", "seed", "batch_size", "augment_std"}
SOLVER_KEYS = {f.name for f in fields(SolverConfig)} | {"label"}

DEFAULT_MODEL_A = {"samples": 50, "hidden": [64], "epochs": 2000, "batch_size": 50, "seed": 1}
DEFAULT_MODEL_B = {"samples": 4000, "hidden": [16], "epochs": 30, "seed": 2}


class _Located:
    """Maps config keys back to line numbers of the raw text."""

    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source

    def line_of(self, key: str) -> int | None:
        m = re.search(r'"' + re.escape(key) + r'"\s*:', self.text)
        return None if m is None else self.text.count("\n", 0, m.start()) + 1

    def error(self, key: str, msg: str) -> ConfigError:
        line = self.line_of(key)
        where = f"{self.source}:{line}" if line else self.source
        return ConfigError(f"{where}: {msg}")


def _number(loc, key, value, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise loc.error(key, f"'{key}' must be a number, got {value!r}")
    if kind is int and int(value) != value:
        raise loc.error(key, f"'{key}' must be an integer, got {value!r}")
    return kind(value)


def _section(loc, doc, name):
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise loc.error(name, f"section '{name}' must be an object")
    unknown = sorted(set(sec) - SECTIONS[name])
    if unknown:
        raise loc.error(unknown[0], f"unknown key '{unknown[0]}' in section '{name}'")
    return sec


@dataclass(frozen=True)
class ModelSpec:
    path: str | None = None
    train: dict = field(default_factory=dict)

    def build(self, gmm: GaussianMixture, base: Path) -> MlpNetwork:
        if self.path is not None:
            return MlpNetwork.load(base / self.path)
        kw = dict(self.train)
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return train_mlp(gmm, **kw)


@dataclass(eq=False)
class ExperimentConfig:
    raw: dict
    digest: str
    prior: GaussianMixture
    schedule: NoiseSchedule
    operator_kind: str
    matrix: np.ndarray | None
    smoothing_tau: float
    model_a: ModelSpec | None
    model_b: ModelSpec | None
    target: object
    solvers: dict[str, SolverConfig]
    master_seed: int
    runs: int
    taus: tuple[float, ...]
    ablation: str | None
    integrator_steps: int
    output: str | None
    base_dir: Path = Path(".")

    def with_overrides(self, seed: int | None = None, solver: str | None = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, master_seed=int(seed))
        if solver is not None:
            chosen = {k: v for k, v in cfg.solvers.items() if k == solver or v.solver == solver}
            if not chosen:
                label, first = next(iter(cfg.solvers.items()))
                try:
                    chosen = {solver: replace(first, solver=solver)}
                except ConfigError as exc:
                    raise ConfigError(f"--solver: {exc}") from None
            cfg = replace(cfg, solvers=chosen)
        return cfg

    def operator(self, network: MlpNetwork | None = None) -> MeasurementOperator:
        if self.operator_kind == "linear":
            return MeasurementOperator.linear(self.matrix, self.smoothing_tau)
        return MeasurementOperator.classifier(network, self.smoothing_tau)

    def task(self):
        """Benchmark task; trains (or loads) the classifiers when needed."""
        if self.operator_kind == "linear":
            return LinearTask(self.prior, self.schedule, self.matrix)
        a = self.model_a.build(self.prior, self.base_dir)
        b = self.model_b.build(self.prior, self.base_dir)
        return ClassificationTask(self.prior, self.schedule, a, b)

    def targets(self, runs, network: MlpNetwork | None = None) -> np.ndarray:
        """Per-run targets for ``solve``."""
        runs = list(runs)
        if self.target == "cycle":
            return np.array([r % network.n_classes for r in runs])
        if self.target == "sampled":
            return LinearTask(self.prior, self.schedule, self.matrix).targets(self.master_seed, runs)
        return np.stack([np.asarray(self.target)] * len(runs))


def config_digest(doc: dict) -> str:
    canon = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _prior(loc, sec) -> GaussianMixture:
    preset = sec.get("preset")
    if preset == "toy":
        extra = sorted(set(sec) - {"preset"})
        if extra:
            raise loc.error(extra[0], "preset 'toy' takes no other prior keys")
        return GaussianMixture.toy()
    if preset == "embedded_toy":
        extra = sorted(set(sec) - {"preset", "dim", "sigma"})
        if extra:
            raise loc.error(extra[0], "preset 'embedded_toy' only takes 'dim' and 'sigma'")
        dim = _number(loc, "dim", sec.get("dim", 8), int)
        sigma = _number(loc, "sigma", sec.get("sigma", 0.1))
        if dim < 2 or not sigma > 0:
            raise loc.error("dim", "embedded_toy needs dim >= 2 and sigma > 0")
        return embedded_toy(dim, sigma)
    if preset is not None:
        raise loc.error("preset", f"unknown prior preset {preset!r}")
    if "means" not in sec or "sigma" not in sec:
        raise loc.error("prior", "prior needs 'means' and 'sigma' (or a 'preset')")
    sigma = _number(loc, "sigma", sec["sigma"])
    try:
        means = np.array(sec["means"], dtype=float)
        if "dim" in sec and (means.ndim != 2 or means.shape[1] != sec["dim"]):
            raise ValueError("'dim' disagrees with the shape of 'means'")
        return GaussianMixture(means, sigma, sec.get("weights"))
    except (ValueError, TypeError) as exc:
        raise loc.error("means", f"invalid prior: {exc}") from None


def _model(loc, name, spec, default) -> ModelSpec:
    if spec is None:
        spec = default
    if not isinstance(spec, dict):
        raise loc.error(name, f"'{name}' must be an object")
    unknown = sorted(set(spec) - MODEL_KEYS)
    if unknown:
        raise loc.error(unknown[0], f"unknown key '{unknown[0]}' in '{name}'")
    if "path" in spec:
        if len(spec) != 1:
            raise loc.error(name, f"'{name}' takes either 'path' or training keys, not both")
        return ModelSpec(path=str(spec["path"]))
    train = {}
    for key, value in spec.items():
        if key == "hidden":
            if not isinstance(value, list) or not all(isinstance(h, int) and h > 0 for h in value):
                raise loc.error(key, "'hidden' must be a list of positive integers")
            train[key] = list(value)
        elif key in ("samples", "epochs", "seed", "batch_size"):
            train[key] = _number(loc, key, value, int)
            if key != "seed" and train[key] < 1:
                raise loc.error(key, f"'{key}' must be >= 1")
        else:
            train[key] = _number(loc, key, value)
    return ModelSpec(train=train)


def _solvers(loc, items, schedule) -> dict[str, SolverConfig]:
    if not isinstance(items, list) or not items:
        raise loc.error("solvers", "'solvers' must be a non-empty list")
    out = {}
    for item in items:
        if not isinstance(item, dict) or "solver" not in item:
            raise loc.error("solvers", "each solver entry needs a 'solver' name")
        unknown = sorted(set(item) - SOLVER_KEYS)
        if unknown:
            raise loc.error(unknown[0], f"unknown key '{unknown[0]}' in solver entry")
        kw = {k: v for k, v in item.items() if k != "label"}
        for key in ("ts", "travel_range"):
            if key in kw and kw[key] is not None:
                if not isinstance(kw[key], list):
                    raise loc.error(key, f"'{key}' must be a list")
                kw[key] = tuple(kw[key])
        for key in ("zeta", "zeta2", "tau", "r_t", "eta", "K"):
            if key in kw and kw[key] is not None:
                kw[key] = _number(loc, key, kw[key], int if key == "K" else float)
        label = str(item.get("label", item["solver"]))
        if label in out:
            raise loc.error("label", f"duplicate solver label {label!r}")
        try:
            cfg = SolverConfig(**kw)
            cfg.validate_for(schedule)
        except (ConfigError, TypeError, ValueError) as exc:
            raise loc.error("solver", f"solver {label!r}: {exc}") from None
        out[label] = cfg
    return out


def parse_config(text: str, source: str = "<config>", base_dir: Path | str = ".") -> ExperimentConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}: malformed JSON: {exc.msg}") from None
    loc = _Located(text, source)
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}:1: top level must be a JSON object")
    unknown = sorted(set(doc) - TOP_LEVEL)
    if unknown:
        raise loc.error(unknown[0], f"unknown top-level key '{unknown[0]}'")

    prior = _prior(loc, _section(loc, doc, "prior") or {"preset": "toy"})
    sec = _section(loc, doc, "schedule")
    try:
        schedule = NoiseSchedule(**sec)
    except (ValueError, TypeError) as exc:
        raise loc.error(next(iter(sec), "schedule"), f"invalid schedule: {exc}") from None

    op = _section(loc, doc, "operator")
    kind = op.get("kind", "linear")
    matrix, model_a, model_b = None, None, None
    if kind == "linear":
        for key in ("model_a", "model_b"):
            if key in op:
                raise loc.error(key, f"'{key}' only applies to mlp operators")
        if op.get("distance", "mse") != "mse":
            raise loc.error("distance", "linear operators use the 'mse' distance")
        matrix = np.array(op.get("matrix", np.eye(prior.dim).tolist()), dtype=float)
        if matrix.ndim == 1:
            matrix = matrix[None, :]
        if matrix.ndim != 2 or matrix.shape[1] != prior.dim or not np.all(np.isfinite(matrix)):
            raise loc.error("matrix", f"'matrix' must be finite with {prior.dim} columns")
    elif kind == "mlp":
        if "matrix" in op:
            raise loc.error("matrix", "'matrix' only applies to linear operators")
        if op.get("distance", "cross_entropy") != "cross_entropy":
            raise loc.error("distance", "mlp operators use the 'cross_entropy' distance")
        model_a = _model(loc, "model_a", op.get("model_a"), DEFAULT_MODEL_A)
        model_b = _model(loc, "model_b", op.get("model_b"), DEFAULT_MODEL_B)
    else:
        raise loc.error("kind", f"unknown operator kind {kind!r}")
    smoothing = _number(loc, "smoothing_tau", op.get("smoothing_tau", 0.0))
    if smoothing < 0:
        raise loc.error("smoothing_tau", "'smoothing_tau' must be non-negative")

    target = doc.get("target", "cycle" if kind == "mlp" else "sampled")
    if kind == "mlp":
        if target != "cycle" and (isinstance(target, bool) or not isinstance(target, int)
                                  or not 0 <= target < prior.n_components):
            raise loc.error("target", f"classification target must be a class index or 'cycle', got {target!r}")
    elif target != "sampled":
        y = np.array(target, dtype=float) if isinstance(target, list) else None
        if y is None or y.shape != (matrix.shape[0],):
            raise loc.error("target", f"target must be 'sampled' or a list of {matrix.shape[0]} numbers")
        target = y.tolist()

    solvers = _solvers(loc, doc.get("solvers", [{"solver": "dps"}]), schedule)
    seeds = _section(loc, doc, "seeds")
    master = _number(loc, "master", seeds.get("master", 0), int)
    runs = _number(loc, "runs", seeds.get("runs", 10), int)
    if runs < 1 or master < 0:
        raise loc.error("seeds", "'runs' must be >= 1 and 'master' >= 0")
    analysis = _section(loc, doc, "analysis")
    taus = analysis.get("taus", [0.0, 0.05])
    if not isinstance(taus, list) or not taus:
        raise loc.error("taus", "'taus' must be a non-empty list")
    taus = tuple(_number(loc, "taus", t) for t in taus)
    if any(t < 0 for t in taus):
        raise loc.error("taus", "'taus' must be non-negative")
    ablation = analysis.get("ablation")
    if ablation is not None and ablation not in solvers:
        raise loc.error("ablation", f"'ablation' must name a solver label, got {ablation!r}")
    steps = _number(loc, "integrator_steps", doc.get("integrator_steps", 80), int)
    if steps < 2:
        raise loc.error("integrator_steps", "'integrator_steps' must be >= 2")
    output = doc.get("output")
    if output is not None and not isinstance(output, str):
        raise loc.error("output", "'output' must be a path string")
    return ExperimentConfig(doc, config_digest(doc), prior, schedule, kind, matrix, smoothing,
                            model_a, model_b, target, solvers, master, runs, taus, ablation,
                            steps, output, Path(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent)


__all__ = ["ExperimentConfig", "ModelSpec", "parse_config", "load_config", "config_digest", "CmdisError"]
