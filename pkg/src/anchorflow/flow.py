"""Velocity fields, synthetic datasets, and flow-matching training.

The velocity field regresses straight-line interpolant differences between a
standard-Gaussian noise source and low-dimensional synthetic data. A single
reflow round retrains on self-generated (noise, endpoint) pairs to straighten
trajectories further.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .autodiff import (ComputeTape, Node, DimensionMismatch, NonFiniteValue,
                       as_f64, vjp)
from .nets import Mlp, SgdMomentum, time_features


class TrainingDiverged(Exception):
    def __init__(self, step: int):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# velocity fields


class VelocityField:
    """Interface: a (possibly trainable) velocity v(z, t) on [0, 1]."""

    dim: int
    frozen: bool = True

    @property
    def version(self) -> int:
        return 0

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        raise NotImplementedError

    def velocity_node(self, tape: ComputeTape, z: Node, t) -> Node:
        raise NotImplementedError


class MlpVelocityField(VelocityField):
    """MLP over concat(z, sinusoidal time features); output dim equals state dim."""

    def __init__(self, mlp: Mlp, dim: int, time_width: int = 16):
        if mlp.out_dim != dim:
            raise DimensionMismatch(
                f"velocity output dim {mlp.out_dim} must equal state dim {dim}"
            )
        self.mlp = mlp
        self.dim = dim
        self.time_width = time_width
        self.training_loss: list[float] = []

    @property
    def frozen(self) -> bool:
        return self.mlp.params.frozen

    @property
    def version(self) -> int:
        return self.mlp.params.version

    def _features(self, z: np.ndarray, t) -> np.ndarray:
        feats = time_features(t, self.time_width)
        if z.ndim == 2 and feats.ndim == 1:
            feats = np.broadcast_to(feats, (z.shape[0], self.time_width))
        return feats

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        z = as_f64(z)
        x = np.concatenate([z, self._features(z, t)], axis=-1)
        return self.mlp.apply_np(x)

    def velocity_node(self, tape: ComputeTape, z: Node, t) -> Node:
        feats = tape.constant(self._features(z.value, t))
        x = tape.concat([z, feats], axis=-1)
        return self.mlp.apply(tape, x)

    def descriptor(self) -> dict:
        return {"type": "velocity_mlp", "dim": self.dim,
                "time_width": self.time_width, "mlp": self.mlp.descriptor()}


class ConstantVelocityField(VelocityField):
    """v(z, t) = c; the ideal straight flow in closed form."""

    def __init__(self, c):
        self.c = as_f64(c)
        self.dim = self.c.shape[0]

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        z = as_f64(z)
        return np.broadcast_to(self.c, z.shape).copy()

    def velocity_node(self, tape: ComputeTape, z: Node, t) -> Node:
        return tape.constant(np.broadcast_to(self.c, z.value.shape).copy())


class LinearVelocityField(VelocityField):
    """v(z, t) = A z for all t."""

    def __init__(self, a):
        self.a = as_f64(a)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise DimensionMismatch(f"linear field matrix must be square, got {self.a.shape}")
        self.dim = self.a.shape[0]

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        return as_f64(z) @ self.a.T

    def velocity_node(self, tape: ComputeTape, z: Node, t) -> Node:
        return tape.affine(z, tape.constant(self.a.T))


def make_velocity_field(dim: int, hidden=(128, 128, 128), time_width: int = 16,
                        seed: int = 0) -> MlpVelocityField:
    rng = np.random.default_rng(seed)
    mlp = Mlp(dim + time_width, tuple(hidden), dim, rng, activation="tanh", name="vf")
    return MlpVelocityField(mlp, dim, time_width)


# ---------------------------------------------------------------------------
# synthetic datasets


@dataclass
class SyntheticDataset:
    """Seeded generator of low-dimensional samples, optionally labeled."""

    kind: str
    dim: int = 2
    seed: int = 0
    n_classes: int = 3
    means: list | None = None
    spread: float = 0.5

    KINDS = ("gaussian-mixture", "rings", "checkerboard", "labeled-clusters", "point-mass")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown dataset kind '{self.kind}'")
        if self.dim < 1:
            raise ValueError("dataset dim must be positive")
        if self.kind == "labeled-clusters" and self.n_classes < 2:
            raise ValueError("labeled-clusters needs at least 2 classes")

    @property
    def labeled(self) -> bool:
        return self.kind == "labeled-clusters"

    def class_means(self) -> np.ndarray:
        if self.means is not None:
            return as_f64(self.means)
        k = self.n_classes
        angles = 2.0 * np.pi * np.arange(k) / k
        means = np.zeros((k, self.dim))
        means[:, 0] = 2.5 * np.cos(angles)
        means[:, 1 % self.dim] = 2.5 * np.sin(angles)
        return means

    def sample(self, n: int, rng: np.random.Generator | None = None):
        """Returns (samples (n, dim), labels or None); same seed, same samples."""
        if rng is None:
            rng = np.random.default_rng(self.seed)
        if self.kind == "point-mass":
            mu = as_f64(self.means if self.means is not None else np.zeros(self.dim))
            return np.tile(mu, (n, 1)), None
        if self.kind == "gaussian-mixture":
            means = self.class_means() if self.means is None else as_f64(self.means)
            idx = rng.integers(0, len(means), size=n)
            return means[idx] + self.spread * rng.standard_normal((n, self.dim)), None
        if self.kind == "rings":
            radii = np.where(rng.integers(0, 2, size=n) == 0, 1.0, 2.5)
            theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
            x = np.zeros((n, self.dim))
            x[:, 0] = radii * np.cos(theta)
            x[:, 1 % self.dim] = radii * np.sin(theta)
            if self.dim > 2:
                x[:, 2:] = 0.1 * rng.standard_normal((n, self.dim - 2))
            return x + 0.1 * rng.standard_normal((n, self.dim)), None
        if self.kind == "checkerboard":
            # cell size 3 keeps the pattern resolvable against unit noise
            out = np.empty((0, 2))
            while out.shape[0] < n:
                cand = rng.uniform(-6.0, 6.0, size=(2 * n, 2))
                keep = (np.floor(cand[:, 0] / 3.0) + np.floor(cand[:, 1] / 3.0)) % 2 == 0
                out = np.concatenate([out, cand[keep]], axis=0)
            x = out[:n]
            if self.dim > 2:
                pad = 0.1 * rng.standard_normal((n, self.dim - 2))
                x = np.concatenate([x, pad], axis=1)
            return x[:, : self.dim], None
        # labeled-clusters
        means = self.class_means()
        labels = rng.integers(0, self.n_classes, size=n)
        x = means[labels] + self.spread * rng.standard_normal((n, self.dim))
        return x, labels


@dataclass
class TrainingConfig:
    batch_size: int = 128
    steps: int = 2000
    learning_rate: float = 0.05
    lr_decay: float = 0.9  # fraction of the learning rate annealed away linearly
    momentum: float = 0.9
    optimizer: str = "sgd-momentum"  # or "sgd"
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128, 128)
    time_width: int = 16

    def __post_init__(self):
        if self.batch_size <= 0 or self.steps < 0 or self.learning_rate <= 0:
            raise ValueError("training config values must be positive")
        if not 0.0 <= self.lr_decay < 1.0:
            raise ValueError("lr_decay must lie in [0, 1)")
        if self.optimizer not in ("sgd", "sgd-momentum"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


# ---------------------------------------------------------------------------
# objective and training


def interpolate(z0, z1, t: float) -> np.ndarray:
    """Linear interpolant t*z1 + (1 - t)*z0."""
    z0, z1 = as_f64(z0), as_f64(z1)
    if z0.shape != z1.shape:
        raise DimensionMismatch(f"interpolate endpoints differ: {z0.shape} vs {z1.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation time must lie in [0, 1], got {t}")
    return t * z1 + (1.0 - t) * z0


def _loss_tape(field: MlpVelocityField, z0b, z1b, tb):
    z0b, z1b, tb = as_f64(z0b), as_f64(z1b), as_f64(tb)
    if not (len(z0b) == len(z1b) == len(tb)):
        raise DimensionMismatch("flow-matching batches must be aligned in length")
    if len(z0b) == 0:
        raise ValueError("flow-matching batch is empty")
    if np.any(tb < 0.0) or np.any(tb > 1.0):
        raise ValueError("interpolation times must lie in [0, 1]")
    zt = tb[:, None] * z1b + (1.0 - tb[:, None]) * z0b
    tape = ComputeTape()
    zt_node = tape.constant(zt)
    v = field.velocity_node(tape, zt_node, tb)
    residual = tape.sub(tape.constant(z1b - z0b), v)
    per_row = tape.sum(tape.mul(residual, residual), axis=-1)
    loss = tape.scale(tape.sum(per_row), 1.0 / len(z0b))
    tape.seal(loss)
    return loss, tape


def flow_matching_loss(field: VelocityField, z0b, z1b, tb) -> float:
    """Mean over the batch of the squared velocity-regression residual."""
    z0b, z1b, tb = as_f64(z0b), as_f64(z1b), as_f64(tb)
    if not (len(z0b) == len(z1b) == len(tb)):
        raise DimensionMismatch("flow-matching batches must be aligned in length")
    if len(z0b) == 0:
        raise ValueError("flow-matching batch is empty")
    if np.any(tb < 0.0) or np.any(tb > 1.0):
        raise ValueError("interpolation times must lie in [0, 1]")
    zt = tb[:, None] * z1b + (1.0 - tb[:, None]) * z0b
    residual = (z1b - z0b) - field.velocity(zt, tb)
    return float(np.mean(np.sum(residual * residual, axis=-1)))


def flow_matching_loss_grads(field: MlpVelocityField, z0b, z1b, tb):
    """(loss, parameter gradients) for one batch."""
    loss, tape = _loss_tape(field, z0b, z1b, tb)
    _, grads = vjp(tape, 1.0)
    return float(loss.value), grads


def _fit_pairs(field: MlpVelocityField, draw_pair_batch, config: TrainingConfig):
    if config.optimizer == "sgd-momentum":
        opt = SgdMomentum(field.mlp.params, config.learning_rate, config.momentum)
    else:
        opt = SgdMomentum(field.mlp.params, config.learning_rate, 0.0)
    rng = np.random.default_rng(config.seed)
    history = []
    for step in range(config.steps):
        z0b, z1b = draw_pair_batch(rng, config.batch_size)
        tb = rng.uniform(0.0, 1.0, size=config.batch_size)
        opt.lr = config.learning_rate * (1.0 - config.lr_decay * step / config.steps)
        try:
            loss, grads = flow_matching_loss_grads(field, z0b, z1b, tb)
        except NonFiniteValue:
            raise TrainingDiverged(step)
        if not np.isfinite(loss):
            raise TrainingDiverged(step)
        history.append(loss)
        opt.step(grads)
    field.mlp.params.freeze()
    field.training_loss = history
    return field


def train_flow(dataset: SyntheticDataset, config: TrainingConfig) -> MlpVelocityField:
    """Train a fresh velocity field on independent (noise, data) pairs."""
    field = make_velocity_field(dataset.dim, config.hidden, config.time_width,
                                seed=config.seed)

    def draw(rng, n):
        z1b, _ = dataset.sample(n, rng)
        z0b = rng.standard_normal((n, dataset.dim))
        return z0b, z1b

    return _fit_pairs(field, draw, config)


def reflow(field: MlpVelocityField, config: TrainingConfig,
           pool_size: int = 8192, endpoint_steps: int = 100) -> MlpVelocityField:
    """One reflow round: retrain on pairs (z0, endpoint sampled from ``field``)."""
    if not field.frozen:
        raise ValueError("reflow expects a frozen input field")
    rng = np.random.default_rng(config.seed)
    z0_pool = rng.standard_normal((pool_size, field.dim))
    z = z0_pool.copy()
    dt = 1.0 / endpoint_steps
    for i in range(endpoint_steps):
        z = z + field.velocity(z, i * dt) * dt
    z1_pool = z

    new_field = MlpVelocityField(field.mlp.copy(), field.dim, field.time_width)

    def draw(inner_rng, n):
        idx = inner_rng.integers(0, pool_size, size=n)
        return z0_pool[idx], z1_pool[idx]

    return _fit_pairs(new_field, draw, config)
