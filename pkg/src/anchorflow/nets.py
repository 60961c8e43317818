"""Small MLPs, sinusoidal time features, and the SGD optimizer."""

from __future__ import annotations

import numpy as np

from .autodiff import ComputeTape, Node, ParameterStore, as_f64


def time_features(t, width: int = 16) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; returns (width,) or (batch, width)."""
    if width % 2 != 0 or width <= 0:
        raise ValueError(f"time feature width must be a positive even int, got {width}")
    t = as_f64(t)
    freqs = 2.0 ** np.arange(width // 2)
    angles = np.pi * np.multiply.outer(t, freqs)
    feats = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return feats


class Mlp:
    """Dense feed-forward network backed by a ParameterStore."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int,
                 rng: np.random.Generator, activation: str = "tanh", name: str = "mlp"):
        if activation not in ("tanh", "relu", "softplus"):
            raise ValueError(f"unsupported activation '{activation}'")
        self.in_dim = in_dim
        self.hidden = tuple(hidden)
        self.out_dim = out_dim
        self.activation = activation
        self.name = name
        sizes = [in_dim, *hidden, out_dim]
        arrays = {}
        for i in range(len(sizes) - 1):
            fan_in = sizes[i]
            arrays[f"{name}.w{i}"] = rng.standard_normal((sizes[i], sizes[i + 1])) / np.sqrt(fan_in)
            arrays[f"{name}.b{i}"] = np.zeros(sizes[i + 1])
        self.params = ParameterStore(arrays)
        self.n_layers = len(sizes) - 1

    def apply(self, tape: ComputeTape, x: Node) -> Node:
        h = x
        for i in range(self.n_layers):
            w = tape.param(f"{self.name}.w{i}", self.params[f"{self.name}.w{i}"])
            b = tape.param(f"{self.name}.b{i}", self.params[f"{self.name}.b{i}"])
            h = tape.affine(h, w, b)
            if i < self.n_layers - 1:
                h = getattr(tape, self.activation)(h)
        return h

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        h = as_f64(x)
        for i in range(self.n_layers):
            h = h @ self.params[f"{self.name}.w{i}"] + self.params[f"{self.name}.b{i}"]
            if i < self.n_layers - 1:
                if self.activation == "tanh":
                    h = np.tanh(h)
                elif self.activation == "relu":
                    h = h * (h > 0)
                else:
                    h = np.logaddexp(0.0, h)
        return h

    def hidden_np(self, x: np.ndarray) -> np.ndarray:
        """Activations of the last hidden layer (feature extractor view)."""
        h = as_f64(x)
        for i in range(self.n_layers - 1):
            h = h @ self.params[f"{self.name}.w{i}"] + self.params[f"{self.name}.b{i}"]
            if self.activation == "tanh":
                h = np.tanh(h)
            elif self.activation == "relu":
                h = h * (h > 0)
            else:
                h = np.logaddexp(0.0, h)
        return h

    def copy(self) -> "Mlp":
        clone = object.__new__(Mlp)
        clone.in_dim = self.in_dim
        clone.hidden = self.hidden
        clone.out_dim = self.out_dim
        clone.activation = self.activation
        clone.name = self.name
        clone.n_layers = self.n_layers
        clone.params = self.params.copy()
        return clone

    def descriptor(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "activation": self.activation,
            "name": self.name,
        }

    @classmethod
    def from_descriptor(cls, desc: dict, arrays: dict[str, np.ndarray]) -> "Mlp":
        mlp = cls(desc["in_dim"], tuple(desc["hidden"]), desc["out_dim"],
                  np.random.default_rng(0), desc["activation"], desc["name"])
        for name in mlp.params.names():
            mlp.params.update(name, arrays[name])
        return mlp


class SgdMomentum:
    """Plain SGD, optionally with heavy-ball momentum."""

    def __init__(self, params: ParameterStore, learning_rate: float, momentum: float = 0.9):
        self.params = params
        self.lr = float(learning_rate)
        self.momentum = float(momentum)
        self._velocity = {name: np.zeros(params.shape(name)) for name in params.names()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            v = self.momentum * self._velocity[name] - self.lr * g
            self._velocity[name] = v
            self.params.update(name, self.params[name] + v)
