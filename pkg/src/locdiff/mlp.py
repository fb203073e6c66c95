"""Feed-forward ReLU networks with explicit backpropagation and Adam."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np


@dataclass
class MlpScoreNet:
    """ReLU network ``x -> W_L relu(... relu(W_1 x + b_1) ...) + b_L``.

    ``weights[k]`` has shape ``(layer_dims[k + 1], layer_dims[k])``; inputs are
    row vectors, so a batch ``X`` (n x in) maps to ``X @ W^T + b``.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(x) for x in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ValueError(f"invalid layer_dims {self.layer_dims}")
        n_layers = len(self.layer_dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError("need one weight matrix and one bias per layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[k + 1], self.layer_dims[k])
            if np.shape(W) != shape or np.shape(b) != (shape[0],):
                raise ValueError(f"layer {k} has shapes {np.shape(W)}, {np.shape(b)}; expected {shape}")
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]

    @classmethod
    def init(cls, layer_dims: Sequence[int], rng: np.random.Generator) -> "MlpScoreNet":
        """Glorot-uniform weights and zero biases."""
        dims = tuple(int(x) for x in layer_dims)
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-a, a, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(dims, weights, biases)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpScoreNet":
        return MlpScoreNet(self.layer_dims, [W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def get_flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        return np.concatenate(parts)

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        pos = 0
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = theta[pos : pos + W.size].reshape(W.shape).copy()
            pos += W.size
            self.biases[k] = theta[pos : pos + b.size].copy()
            pos += b.size

    def forward_cache(self, X: np.ndarray) -> list[np.ndarray]:
        """Activations of every layer; the last entry is the output."""
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"input has {X.shape[-1]} features, network expects {self.input_dim}")
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if k < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.forward_cache(X)[-1]

    def backward(self, acts: list[np.ndarray], upstream: np.ndarray):
        """Gradients of ``sum(upstream * output)`` w.r.t. weights and biases."""
        g = np.asarray(upstream, dtype=float)
        gW, gb = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            a_in = acts[k]
            gW[k] = g.T @ a_in if g.ndim == 2 else np.outer(g, a_in)
            gb[k] = g.sum(axis=0) if g.ndim == 2 else g.copy()
            if k > 0:
                g = (g @ self.weights[k]) * (acts[k] > 0)
        return gW, gb

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MlpScoreNet":
        dims = tuple(int(x) for x in obj["layer_dims"])
        weights = [np.array(w, dtype=float).reshape(dims[k + 1], dims[k]) for k, w in enumerate(obj["weights"])]
        biases = [np.array(b, dtype=float) for b in obj["biases"]]
        return cls(dims, weights, biases)


def mlp_gradient(net: MlpScoreNet, X: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum(upstream * net(X))`` in :meth:`MlpScoreNet.get_flat` order."""
    gW, gb = net.backward(net.forward_cache(X), upstream)
    parts = []
    for W, b in zip(gW, gb):
        parts += [W.ravel(), b]
    return np.concatenate(parts)


@dataclass
class AdamState:
    """Adam optimizer state over a flat parameter vector."""

    params: np.ndarray
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=float)
        if self.m is None:
            self.m = np.zeros_like(self.params)
        if self.v is None:
            self.v = np.zeros_like(self.params)


def adam_step(state: AdamState, grad: np.ndarray) -> AdamState:
    """One bias-corrected Adam update; returns a new state."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {state.params.shape}")
    b1, b2 = state.betas
    t = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    params = state.params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, params=params, step=t, m=m, v=v)


def save_model(path: str | Path, nets: Sequence[MlpScoreNet], header: dict) -> None:
    """Write networks plus a header as JSON; floats round-trip exactly."""
    doc = {"format": "locdiff-mlp", "version": 1, "header": header, "nets": [n.to_dict() for n in nets]}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path: str | Path) -> tuple[list[MlpScoreNet], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "locdiff-mlp":
        raise ValueError(f"{path} is not a saved score model")
    return [MlpScoreNet.from_dict(n) for n in doc["nets"]], doc["header"]
