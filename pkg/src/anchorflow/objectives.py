"""Guidance objectives: analytic Gaussians, trained classifiers, feature
similarity, composites, and the synthetic divergence construction."""

from __future__ import annotations

import numpy as np

from .autodiff import ComputeTape, DimensionMismatch, as_f64, vjp
from .flow import (LinearVelocityField, SyntheticDataset, TrainingConfig,
                   TrainingDiverged)
from .nets import Mlp, SgdMomentum, time_features


class GuidanceObjective:
    """Differentiable scalar log-likelihood (or similarity) on clean endpoints."""

    kind = "abstract"

    def value(self, z) -> float:
        raise NotImplementedError

    def gradient(self, z) -> np.ndarray:
        raise NotImplementedError


class GaussianObjective(GuidanceObjective):
    """log p(z) = -(scale / 2) * ||z - mean||^2 up to a constant."""

    kind = "analytic-gaussian"

    def __init__(self, mean, inv_cov_scale: float):
        if inv_cov_scale <= 0:
            raise ValueError("inverse-covariance scale must be positive")
        self.mean = as_f64(mean)
        self.scale = float(inv_cov_scale)

    def value(self, z) -> float:
        d = as_f64(z) - self.mean
        return float(-0.5 * self.scale * np.dot(d, d))

    def gradient(self, z) -> np.ndarray:
        return self.scale * (self.mean - as_f64(z))

    @property
    def gradient_lipschitz(self) -> float:
        return self.scale


def gaussian_objective(mean, inv_cov_scale: float = 1.0) -> GaussianObjective:
    return GaussianObjective(mean, inv_cov_scale)


class QuadraticGrowthObjective(GuidanceObjective):
    """Objective whose gradient is the linear map z -> lipschitz * z."""

    kind = "analytic-quadratic"

    def __init__(self, lipschitz: float):
        self.lipschitz = float(lipschitz)

    def value(self, z) -> float:
        z = as_f64(z)
        return float(0.5 * self.lipschitz * np.dot(z, z))

    def gradient(self, z) -> np.ndarray:
        return self.lipschitz * as_f64(z)


def prop1_construction(lipschitz: float):
    """Velocity-at-1 map and gradient map that are the same expansive linear map.

    Both maps are z -> lipschitz * z with lipschitz > 1, which makes the
    unanchored endpoint iteration expansive for every guidance scale.
    """
    if lipschitz <= 1.0:
        raise ValueError("the construction requires a Lipschitz constant > 1")
    field = LinearVelocityField(lipschitz * np.eye(1))
    return field, QuadraticGrowthObjective(lipschitz)


# ---------------------------------------------------------------------------
# trained classifiers


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def _train_softmax_mlp(mlp: Mlp, draw_batch, config: TrainingConfig):
    opt = SgdMomentum(mlp.params, config.learning_rate,
                      config.momentum if config.optimizer == "sgd-momentum" else 0.0)
    rng = np.random.default_rng(config.seed)
    history = []
    for step in range(config.steps):
        xb, yb = draw_batch(rng, config.batch_size)
        onehot = np.zeros((len(yb), mlp.out_dim))
        onehot[np.arange(len(yb)), yb] = 1.0
        tape = ComputeTape()
        logits = mlp.apply(tape, tape.constant(xb))
        lse = tape.logsumexp(logits, axis=-1)
        correct = tape.sum(tape.mul(logits, tape.constant(onehot)), axis=-1)
        loss = tape.scale(tape.sum(tape.sub(lse, correct)), 1.0 / len(yb))
        tape.seal(loss)
        if not np.isfinite(loss.value):
            raise TrainingDiverged(step)
        history.append(float(loss.value))
        _, grads = vjp(tape, 1.0)
        opt.step(grads)
    mlp.params.freeze()
    return history


class ClassifierObjective(GuidanceObjective):
    """log p(c | z1): the log-softmax of one class logit of a trained MLP."""

    kind = "clean-classifier"

    def __init__(self, mlp: Mlp, target_class: int):
        if not 0 <= target_class < mlp.out_dim:
            raise ValueError(f"target class {target_class} out of range")
        self.mlp = mlp
        self.target_class = target_class

    def value(self, z) -> float:
        logits = self.mlp.apply_np(as_f64(z))
        return float(_log_softmax_rows(logits[None, :])[0, self.target_class])

    def gradient(self, z) -> np.ndarray:
        tape = ComputeTape()
        zn = tape.input(as_f64(z))
        logits = self.mlp.apply(tape, zn)
        onehot = np.zeros(self.mlp.out_dim)
        onehot[self.target_class] = 1.0
        picked = tape.sum(tape.mul(logits, tape.constant(onehot)))
        val = tape.sub(picked, tape.logsumexp(logits, axis=-1))
        tape.seal(val)
        (grad,), _ = vjp(tape, 1.0)
        return grad


class ClassifierFamily:
    """Trained clean classifier plus per-class guidance objectives."""

    def __init__(self, mlp: Mlp, n_classes: int, held_out_accuracy: float):
        self.mlp = mlp
        self.n_classes = n_classes
        self.held_out_accuracy = held_out_accuracy

    def objective_for(self, target_class: int) -> ClassifierObjective:
        return ClassifierObjective(self.mlp, target_class)

    def predict(self, z: np.ndarray) -> np.ndarray:
        logits = self.mlp.apply_np(np.atleast_2d(as_f64(z)))
        return logits.argmax(axis=-1)

    def log_prob(self, z, target_class: int) -> float:
        return self.objective_for(target_class).value(z)


def train_clean_classifier(dataset: SyntheticDataset,
                           config: TrainingConfig | None = None,
                           hidden=(64, 64)) -> ClassifierFamily:
    """Fit a softmax MLP on labeled clusters; records held-out accuracy."""
    if not dataset.labeled:
        raise ValueError("clean classifier training needs a labeled dataset")
    config = config or TrainingConfig(steps=1500, learning_rate=0.05, seed=dataset.seed)
    rng = np.random.default_rng(config.seed)
    mlp = Mlp(dataset.dim, tuple(hidden), dataset.n_classes, rng,
              activation="tanh", name="clf")

    def draw(inner_rng, n):
        return dataset.sample(n, inner_rng)

    _train_softmax_mlp(mlp, draw, config)
    x_test, y_test = dataset.sample(2048, np.random.default_rng(config.seed + 1))
    acc = float(np.mean(mlp.apply_np(x_test).argmax(axis=-1) == y_test))
    return ClassifierFamily(mlp, dataset.n_classes, acc)


class NoiseAwareObjective(GuidanceObjective):
    """log p(c | z_t) over interpolants, trained with the clean label."""

    kind = "noise-aware-classifier"

    def __init__(self, mlp: Mlp, target_class: int, time_width: int,
                 accuracy_curve: dict | None = None):
        self.mlp = mlp
        self.target_class = target_class
        self.time_width = time_width
        self.accuracy_curve = accuracy_curve or {}

    def _features(self, z: np.ndarray, t) -> np.ndarray:
        feats = time_features(t, self.time_width)
        if z.ndim == 2 and feats.ndim == 1:
            feats = np.broadcast_to(feats, (z.shape[0], self.time_width))
        return feats

    def value(self, z, t: float = 1.0) -> float:
        z = as_f64(z)
        x = np.concatenate([z, self._features(z, t)], axis=-1)
        logits = self.mlp.apply_np(x)
        return float(_log_softmax_rows(logits[None, :])[0, self.target_class])

    def gradient(self, z, t: float = 1.0) -> np.ndarray:
        z = as_f64(z)
        tape = ComputeTape()
        zn = tape.input(z)
        x = tape.concat([zn, tape.constant(self._features(z, t))], axis=-1)
        logits = self.mlp.apply(tape, x)
        onehot = np.zeros(self.mlp.out_dim)
        onehot[self.target_class] = 1.0
        picked = tape.sum(tape.mul(logits, tape.constant(onehot)))
        val = tape.sub(picked, tape.logsumexp(logits, axis=-1))
        tape.seal(val)
        (grad,), _ = vjp(tape, 1.0)
        return grad

    def for_class(self, target_class: int) -> "NoiseAwareObjective":
        return NoiseAwareObjective(self.mlp, target_class, self.time_width,
                                   self.accuracy_curve)

    def accuracy_at(self, x: np.ndarray, t: float, labels: np.ndarray) -> float:
        feats = self._features(x, np.full(len(x), t))
        logits = self.mlp.apply_np(np.concatenate([x, feats], axis=-1))
        return float(np.mean(logits.argmax(axis=-1) == labels))


def train_noise_aware_classifier(dataset: SyntheticDataset,
                                 time_sampling=None,
                                 config: TrainingConfig | None = None,
                                 hidden=(64, 64), time_width: int = 16,
                                 target_class: int = 0) -> NoiseAwareObjective:
    """Fit a classifier on interpolants z_t = t z1 + (1 - t) z0 with clean labels.

    Records the accuracy curve over t in {1, 0.75, 0.5, 0.25, 0}; accuracy is
    near chance at t = 0 because pure noise carries no label information.
    """
    if not dataset.labeled:
        raise ValueError("noise-aware classifier training needs a labeled dataset")
    config = config or TrainingConfig(steps=3000, learning_rate=0.05, seed=dataset.seed)
    if time_sampling is None:
        time_sampling = lambda rng, n: rng.uniform(0.0, 1.0, size=n)
    rng = np.random.default_rng(config.seed)
    mlp = Mlp(dataset.dim + time_width, tuple(hidden), dataset.n_classes, rng,
              activation="tanh", name="nclf")

    def draw(inner_rng, n):
        z1b, yb = dataset.sample(n, inner_rng)
        z0b = inner_rng.standard_normal((n, dataset.dim))
        tb = time_sampling(inner_rng, n)
        zt = tb[:, None] * z1b + (1.0 - tb[:, None]) * z0b
        feats = time_features(tb, time_width)
        return np.concatenate([zt, feats], axis=-1), yb

    _train_softmax_mlp(mlp, draw, config)
    obj = NoiseAwareObjective(mlp, target_class, time_width)
    eval_rng = np.random.default_rng(config.seed + 1)
    z1b, yb = dataset.sample(2048, eval_rng)
    z0b = eval_rng.standard_normal((2048, dataset.dim))
    for t in (1.0, 0.75, 0.5, 0.25, 0.0):
        zt = t * z1b + (1.0 - t) * z0b
        obj.accuracy_curve[t] = obj.accuracy_at(zt, t, yb)
    return obj


# ---------------------------------------------------------------------------
# feature similarity


class FeatureEncoder:
    """Frozen map to unit-normalized feature vectors; identity or MLP trunk."""

    def __init__(self, mlp: Mlp | None = None):
        self.mlp = mlp

    def encode(self, z) -> np.ndarray:
        z = as_f64(z)
        f = z if self.mlp is None else self.mlp.hidden_np(z)
        norm = float(np.linalg.norm(f))
        if norm < 1e-12:
            raise ValueError("feature vector has zero norm")
        return f / norm

    def raw(self, z) -> np.ndarray:
        z = as_f64(z)
        return z if self.mlp is None else self.mlp.hidden_np(z)

    def raw_vjp(self, z, cotangent) -> np.ndarray:
        """Pull a cotangent at the raw feature back to the input."""
        z = as_f64(z)
        if self.mlp is None:
            return as_f64(cotangent)
        tape = ComputeTape()
        zn = tape.input(z)
        h = zn
        for i in range(self.mlp.n_layers - 1):
            w = tape.constant(self.mlp.params[f"{self.mlp.name}.w{i}"])
            b = tape.constant(self.mlp.params[f"{self.mlp.name}.b{i}"])
            h = getattr(tape, self.mlp.activation)(tape.affine(h, w, b))
        tape.seal(h)
        (grad,), _ = vjp(tape, as_f64(cotangent))
        return grad


def train_feature_encoder(dataset: SyntheticDataset,
                          config: TrainingConfig | None = None,
                          hidden=(64, 32)) -> FeatureEncoder:
    """Classification-trained trunk reused as a frozen feature extractor."""
    family = train_clean_classifier(dataset, config, hidden=hidden)
    return FeatureEncoder(family.mlp)


class FeatureSimilarityObjective(GuidanceObjective):
    """Cosine similarity between encoded states, used directly as the signal."""

    kind = "feature-similarity"

    def __init__(self, encoder: FeatureEncoder, z_ref):
        self.encoder = encoder
        self.z_ref = as_f64(z_ref)
        self.f_ref = encoder.encode(self.z_ref)

    def value(self, z) -> float:
        return float(np.dot(self.encoder.encode(z), self.f_ref))

    def gradient(self, z) -> np.ndarray:
        # d cos / d f = (f_ref_hat - cos * f_hat) / ||f||, chained through the
        # raw-feature VJP; the normalization is differentiated analytically.
        f = self.encoder.raw(z)
        norm = float(np.linalg.norm(f))
        if norm < 1e-12:
            raise ValueError("feature vector has zero norm")
        f_hat = f / norm
        cos = float(np.dot(f_hat, self.f_ref))
        cot = (self.f_ref - cos * f_hat) / norm
        return self.encoder.raw_vjp(z, cot)


def feature_similarity_objective(encoder: FeatureEncoder, z_ref) -> FeatureSimilarityObjective:
    return FeatureSimilarityObjective(encoder, z_ref)


# ---------------------------------------------------------------------------
# composition


class CompositeObjective(GuidanceObjective):
    """primary(z) - coeff * ||z - reference||_1 with midpoint subgradient at ties."""

    kind = "composite"

    def __init__(self, primary: GuidanceObjective, l1_reference, l1_coeff: float):
        if l1_coeff < 0:
            raise ValueError("l1 coefficient must be nonnegative")
        self.primary = primary
        self.reference = as_f64(l1_reference)
        self.coeff = float(l1_coeff)

    def value(self, z) -> float:
        z = as_f64(z)
        return self.primary.value(z) - self.coeff * float(np.sum(np.abs(z - self.reference)))

    def gradient(self, z) -> np.ndarray:
        z = as_f64(z)
        return self.primary.gradient(z) - self.coeff * np.sign(z - self.reference)


def composite_objective(primary: GuidanceObjective, l1_reference,
                        l1_coeff: float = 10.0) -> CompositeObjective:
    return CompositeObjective(primary, l1_reference, l1_coeff)


class ZeroObjective(GuidanceObjective):
    """Constant objective; useful for isolating regularizer behavior."""

    kind = "analytic-zero"

    def __init__(self, dim: int):
        self.dim = dim

    def value(self, z) -> float:
        return 0.0

    def gradient(self, z) -> np.ndarray:
        return np.zeros(self.dim)
