"""Measurement operators, guidance distances, and a small tanh classifier.

An operator maps a clean point to a measurement: a fixed matrix or the logits of
an :class:`MlpNetwork`.  ``smoothing_tau`` adds Gaussian noise to the operator
*input*; the noise is held constant when differentiating.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TargetError, TrainingError
from .mixture import GaussianMixture


@dataclass
class MlpNetwork:
    """Fully connected tanh network producing class logits.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; the last layer is linear.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def init(cls, sizes, rng: np.random.Generator) -> "MlpNetwork":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            weights.append(scale * rng.standard_normal((fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def _activations(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x) -> np.ndarray:
        return self._activations(np.asarray(x, dtype=float))[-1]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x), axis=-1)

    def _backward(self, acts, g, want_params):
        grads_w, grads_b = [], []
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            if want_params:
                a = acts[i].reshape(-1, acts[i].shape[-1])
                grads_w.append(a.T @ g.reshape(-1, g.shape[-1]))
                grads_b.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
            g = g @ self.weights[i].T
        return g, grads_w[::-1], grads_b[::-1]

    def vjp(self, x, g) -> np.ndarray:
        """``g^T d logits / dx`` by reverse accumulation."""
        acts = self._activations(np.asarray(x, dtype=float))
        return self._backward(acts, np.asarray(g, dtype=float), False)[0]

    def to_json(self) -> str:
        layers = [{"weight": w.tolist(), "bias": b.tolist()}
                  for w, b in zip(self.weights, self.biases)]
        return json.dumps({"activation": "tanh", "layers": layers})

    @classmethod
    def from_json(cls, text: str) -> "MlpNetwork":
        data = json.loads(text)
        if data.get("activation", "tanh") != "tanh":
            raise ConfigError("only tanh networks are supported")
        weights = [np.array(layer["weight"], dtype=float) for layer in data["layers"]]
        biases = [np.array(layer["bias"], dtype=float) for layer in data["layers"]]
        for w, b in zip(weights, biases):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigError("malformed layer in network file")
        return cls(weights, biases)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "MlpNetwork":
        return cls.from_json(Path(path).read_text())


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class MeasurementOperator:
    """``f(x)`` with a distance ``d(f(x), y)`` and its input gradient."""

    kind: str = "linear"
    matrix: np.ndarray | None = None
    network: MlpNetwork | None = None
    distance: str = "mse"
    smoothing_tau: float = 0.0
    dim: int = field(init=False)

    def __post_init__(self):
        if self.kind == "linear":
            if self.matrix is None:
                raise ConfigError("linear operator needs a matrix")
            a = np.array(self.matrix, dtype=float)
            if a.ndim == 1:
                a = a[None, :]
            if a.ndim != 2 or a.shape[0] < 1 or not np.all(np.isfinite(a)):
                raise ConfigError("operator matrix must be a finite (m, d) array with m >= 1")
            self.matrix = a
            self.dim = a.shape[1]
        elif self.kind == "mlp":
            if self.network is None:
                raise ConfigError("mlp operator needs a network")
            self.dim = self.network.sizes[0]
        else:
            raise ConfigError(f"unknown operator kind {self.kind!r}")
        if self.distance not in ("mse", "cross_entropy"):
            raise ConfigError(f"unknown distance {self.distance!r}")
        if self.distance == "cross_entropy" and self.kind != "mlp":
            raise ConfigError("cross_entropy requires an mlp operator")
        if not self.smoothing_tau >= 0:
            raise ConfigError("smoothing_tau must be non-negative")

    @classmethod
    def linear(cls, matrix, smoothing_tau: float = 0.0) -> "MeasurementOperator":
        return cls("linear", matrix=matrix, smoothing_tau=smoothing_tau)

    @classmethod
    def classifier(cls, network: MlpNetwork, smoothing_tau: float = 0.0) -> "MeasurementOperator":
        return cls("mlp", network=network, distance="cross_entropy", smoothing_tau=smoothing_tau)

    def _input(self, x, rng, noise):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            raise ShapeError(f"operator expects trailing dimension {self.dim}, got {x.shape}")
        if noise is None and self.smoothing_tau > 0:
            if rng is None:
                raise ValueError("smoothing_tau > 0 needs a random stream")
            noise = self.smoothing_tau * rng.standard_normal(x.shape)
        return x if noise is None else x + noise

    def _forward(self, x):
        if self.kind == "linear":
            return x @ self.matrix.T
        return self.network.forward(x)

    def apply(self, x, rng: np.random.Generator | None = None, noise=None) -> np.ndarray:
        return self._forward(self._input(x, rng, noise))

    def loss_and_grad(self, x, y, rng: np.random.Generator | None = None,
                      noise=None) -> tuple[np.ndarray, np.ndarray]:
        """Distance ``d(f(x + noise), y)`` and its gradient in ``x``; one shared noise draw."""
        xin = self._input(x, rng, noise)
        if self.distance == "cross_entropy":
            labels = np.asarray(y)
            k = self.network.n_classes
            if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= k):
                raise TargetError(f"class index must be an integer in [0, {k}), got {y!r}")
            logits = self.network.forward(xin)
            logp = _log_softmax(logits)
            labels = np.broadcast_to(labels, logits.shape[:-1])
            loss = -np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
            g = np.exp(logp)
            np.put_along_axis(g, labels[..., None],
                              np.take_along_axis(g, labels[..., None], axis=-1) - 1.0, axis=-1)
            return loss, self.network.vjp(xin, g)
        out = self._forward(xin)
        y = np.asarray(y, dtype=float)
        if y.shape[-1:] != out.shape[-1:]:
            raise TargetError(f"target shape {y.shape} does not match operator output {out.shape}")
        r = out - y
        loss = 0.5 * (r * r).sum(axis=-1)
        if self.kind == "linear":
            return loss, r @ self.matrix
        return loss, self.network.vjp(xin, r)

    def loss(self, x, y, rng=None, noise=None) -> np.ndarray:
        return self.loss_and_grad(x, y, rng, noise)[0]

    def loss_grad_x(self, x, y, rng=None, noise=None) -> np.ndarray:
        return self.loss_and_grad(x, y, rng, noise)[1]


def train_mlp(gmm: GaussianMixture, samples: int = 4000, epochs: int = 60, lr: float = 0.5,
              seed: int = 0, hidden=(16,), batch_size: int = 64,
              augment_std: float = 0.0) -> MlpNetwork:
    """Fit a tanh classifier to nearest-mode labels of exact prior draws.

    Plain mini-batch gradient descent on cross-entropy; fully determined by
    ``seed``.  ``augment_std`` jitters each batch with Gaussian noise.
    """
    k = gmm.n_components
    if samples < 10 * k:
        raise ConfigError(f"need at least {10 * k} training samples, got {samples}")
    rng = np.random.default_rng(seed)
    x = gmm.sample(rng, samples)
    labels = gmm.nearest_mode(x)
    net = MlpNetwork.init([gmm.dim, *hidden, k], rng)
    onehot = np.eye(k)
    for _ in range(epochs):
        order = rng.permutation(samples)
        for start in range(0, samples, batch_size):
            idx = order[start:start + batch_size]
            xb = x[idx]
            if augment_std > 0:
                xb = xb + augment_std * rng.standard_normal(xb.shape)
            acts = net._activations(xb)
            logp = _log_softmax(acts[-1])
            g = (np.exp(logp) - onehot[labels[idx]]) / len(idx)
            _, gw, gb = net._backward(acts, g, True)
            for i in range(len(net.weights)):
                net.weights[i] -= lr * gw[i]
                net.biases[i] -= lr * gb[i]
        loss = -np.mean(_log_softmax(net.forward(x))[np.arange(samples), labels])
        if not np.isfinite(loss):
            raise TrainingError("training loss became non-finite")
    return net
