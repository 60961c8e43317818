"""Shared fixtures: trained models are expensive, so they are session-scoped
and every test that uses them must treat them as read-only."""

import numpy as np
import pytest

import anchorflow as af


@pytest.fixture(scope="session")
def checkerboard_dataset():
    return af.SyntheticDataset(kind="checkerboard", dim=2, seed=0)


@pytest.fixture(scope="session")
def checkerboard_flow(checkerboard_dataset):
    config = af.TrainingConfig(batch_size=256, steps=8000, learning_rate=0.01,
                               seed=0, hidden=(128, 128, 128))
    return af.train_flow(checkerboard_dataset, config)


@pytest.fixture(scope="session")
def clusters_dataset():
    return af.SyntheticDataset(kind="labeled-clusters", dim=2, seed=0, n_classes=3)


@pytest.fixture(scope="session")
def clusters_flow(clusters_dataset):
    config = af.TrainingConfig(batch_size=256, steps=6000, learning_rate=0.02,
                               seed=0, hidden=(128, 128, 128))
    return af.train_flow(clusters_dataset, config)


@pytest.fixture(scope="session")
def clean_classifier(clusters_dataset):
    config = af.TrainingConfig(batch_size=128, steps=1500, learning_rate=0.05, seed=0)
    return af.train_clean_classifier(clusters_dataset, config)


@pytest.fixture(scope="session")
def noise_classifier(clusters_dataset):
    config = af.TrainingConfig(batch_size=128, steps=3000, learning_rate=0.05, seed=0)
    return af.train_noise_aware_classifier(clusters_dataset, config=config)


@pytest.fixture(scope="session")
def tiny_field():
    """Small untrained velocity field for fast differentiation tests."""
    return af.make_velocity_field(2, hidden=(16, 16), seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
