"""Guidance objectives: closed forms, classifier quality, similarity, and
the l1-composite wrapper."""

import numpy as np
import pytest

import anchorflow as af
from anchorflow.autodiff import central_difference
from anchorflow.objectives import FeatureEncoder, ZeroObjective


def test_gaussian_objective_closed_form(rng):
    mean = np.array([1.0, -2.0])
    obj = af.gaussian_objective(mean, inv_cov_scale=3.0)
    z = rng.standard_normal(2)
    assert obj.value(z) == pytest.approx(-1.5 * float(np.sum((z - mean) ** 2)))
    assert np.allclose(obj.gradient(z), 3.0 * (mean - z))
    assert obj.value(mean) == 0.0
    assert obj.gradient_lipschitz == 3.0


def test_prop1_construction_shape():
    field, obj = af.prop1_construction(2.0)
    z = np.array([1.5])
    assert np.allclose(field.velocity(z, 1.0), 2.0 * z)
    assert np.allclose(obj.gradient(z), 2.0 * z)
    with pytest.raises(ValueError):
        af.prop1_construction(1.0)
    with pytest.raises(ValueError):
        af.prop1_construction(0.5)


def test_clean_classifier_quality(clean_classifier, clusters_dataset):
    assert clean_classifier.held_out_accuracy > 0.95
    x, labels = clusters_dataset.sample(512, np.random.default_rng(11))
    pred = clean_classifier.predict(x)
    assert np.mean(pred == labels) > 0.95


def test_classifier_log_probs_normalize(clean_classifier, rng):
    z = rng.standard_normal(2)
    total = sum(np.exp(clean_classifier.log_prob(z, c))
                for c in range(clean_classifier.n_classes))
    assert total == pytest.approx(1.0, abs=1e-9)


def test_classifier_gradient_matches_fd(clean_classifier, rng):
    obj = clean_classifier.objective_for(1)
    for _ in range(5):
        z = rng.standard_normal(2)
        fd = central_difference(lambda p: obj.value(p), z)
        assert np.max(np.abs(fd - obj.gradient(z))) < 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_classifier_requires_labels():
    ds = af.SyntheticDataset(kind="checkerboard", dim=2, seed=0)
    with pytest.raises(ValueError):
        af.train_clean_classifier(ds, af.TrainingConfig(steps=1))
    with pytest.raises(ValueError):
        af.train_noise_aware_classifier(ds, config=af.TrainingConfig(steps=1))


def test_noise_classifier_accuracy_curve(noise_classifier):
    curve = noise_classifier.accuracy_curve
    assert curve[1.0] > 0.9
    # pure noise carries no label information, so t=0 is near chance (1/3)
    assert curve[0.0] < 0.6
    assert curve[1.0] > curve[0.0]


def test_noise_classifier_gradient_matches_fd(noise_classifier, rng):
    obj = noise_classifier.for_class(2)
    for t in (1.0, 0.5):
        z = rng.standard_normal(2)
        fd = central_difference(lambda p: obj.value(p, t), z)
        assert np.max(np.abs(fd - obj.gradient(z, t))) < 1e-5 * max(1.0, np.max(np.abs(fd)))


def test_identity_encoder_cosine(rng):
    enc = FeatureEncoder()
    ref = np.array([2.0, 0.0])
    obj = af.feature_similarity_objective(enc, ref)
    assert obj.value(np.array([5.0, 0.0])) == pytest.approx(1.0)
    assert obj.value(np.array([0.0, 3.0])) == pytest.approx(0.0, abs=1e-12)
    assert obj.value(np.array([-1.0, 0.0])) == pytest.approx(-1.0)


def test_similarity_gradient_matches_fd(clean_classifier, rng):
    enc = FeatureEncoder(clean_classifier.mlp)
    obj = af.feature_similarity_objective(enc, rng.standard_normal(2))
    for _ in range(5):
        z = rng.standard_normal(2)
        fd = central_difference(lambda p: obj.value(p), z)
        scale = max(1.0, np.max(np.abs(fd)))
        assert np.max(np.abs(fd - obj.gradient(z))) < 1e-5 * scale


def test_similarity_rejects_zero_reference():
    with pytest.raises(ValueError):
        af.feature_similarity_objective(FeatureEncoder(), np.zeros(2))


def test_composite_objective_l1(rng):
    primary = af.gaussian_objective(np.zeros(2), 1.0)
    ref = np.array([1.0, -1.0])
    obj = af.composite_objective(primary, ref, l1_coeff=10.0)
    z = np.array([2.0, 0.5])
    expected = primary.value(z) - 10.0 * (abs(2.0 - 1.0) + abs(0.5 + 1.0))
    assert obj.value(z) == pytest.approx(expected)
    g = obj.gradient(z)
    assert np.allclose(g, primary.gradient(z) - 10.0 * np.sign(z - ref))


def test_composite_gradient_zero_at_tie():
    primary = ZeroObjective(2)
    obj = af.composite_objective(primary, np.array([1.0, 1.0]), l1_coeff=5.0)
    g = obj.gradient(np.array([1.0, 3.0]))
    assert g[0] == 0.0
    assert g[1] == -5.0


def test_zero_objective(rng):
    obj = ZeroObjective(3)
    z = rng.standard_normal(3)
    assert obj.value(z) == 0.0
    assert np.array_equal(obj.gradient(z), np.zeros(3))
