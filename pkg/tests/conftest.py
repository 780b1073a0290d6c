import functools

import numpy as np
import pytest

from iabf.data import Dataset, synthetic_dataset
from iabf.nets import Classifier
from iabf.objectives import classifier_loss, permute_per_dimension
from iabf.training import Adam, TrainConfig, train


@functools.cache
def train_density_classifier(sampler, bits, steps=2000, lr=3e-3, seed=0, batch=512):
    """Fit a code classifier against per-dimension permuted batches until the
    density-ratio estimate is usable; `sampler(rng, n)` yields joint samples."""
    rng = np.random.default_rng(seed)
    clf = Classifier(bits, hidden=16, layers=1, rng=rng)
    opt = Adam(lr)
    for _ in range(steps):
        real = sampler(rng, batch)
        perm = permute_per_dimension(real, rng)
        for t in clf.params.values():
            t.grad = None
        (-classifier_loss(real, perm, clf)).backward()
        opt.step(clf.params)
    return clf


def copied_bit_sampler(rng, n):
    """Two perfectly correlated fair bits; TC = ln 2."""
    b = (rng.random((n, 1)) < 0.5).astype(np.float32)
    return np.concatenate([b, b], axis=1)


def factorized_sampler(rng, n):
    """Two independent fair bits; TC = 0."""
    return (rng.random((n, 2)) < 0.5).astype(np.float32)


@pytest.fixture(scope="session")
def memorized_model(tmp_path_factory):
    """Noiseless model trained to memorize 8 binary patterns (M=8)."""
    points = synthetic_dataset(8, 16, seed=3)
    ds = Dataset("memorize", 16, points, points, points)
    cfg = TrainConfig(dataset="memorize", bits=8, epsilon=0.0, method="necst",
                      k=5, batch_size=8, epochs=1000, seed=7, hidden_units=32,
                      hidden_layers=2, classifier_units=8, classifier_layers=1,
                      likelihood="gaussian", val_every=200, lr=3e-3)
    out = tmp_path_factory.mktemp("memorized")
    result = train(cfg, str(out), dataset=ds)
    return result, ds


@pytest.fixture(scope="session")
def noisy_model(tmp_path_factory):
    """Model trained through a 0.1 flip channel on a larger synthetic set."""
    cfg = TrainConfig(dataset="synthetic-256x16", bits=16, epsilon=0.1,
                      method="necst", k=5, batch_size=32, epochs=300, seed=5,
                      hidden_units=48, hidden_layers=2, classifier_units=8,
                      classifier_layers=1, val_every=50, lr=3e-3)
    out = tmp_path_factory.mktemp("noisy")
    result = train(cfg, str(out))
    return result
