import math

import numpy as np
import pytest

from protofit.baselines import protonet_classify, protonet_fit, train_protonet
from protofit.core import CLASSIFICATION, TrainConfig, beta_logits
from protofit.dataio import Dataset
from protofit.encoder import Encoder
from protofit.errors import EmptyClass, EmptyStore
from protofit.inference import classify

from conftest import make_store

Z1 = 0.8807970779778824  # 1 / (1 + e^-2)


def dataset(features, labels, num_classes=2):
    features = np.asarray(features, dtype=float)
    return Dataset(CLASSIFICATION, features.shape[1], num_classes,
                   np.arange(len(features), dtype=np.int64), features,
                   np.asarray(labels, dtype=np.int64))


def test_fit_single_example_per_class():
    ds = dataset([[1.0, 2.0], [3.0, -4.0]], [0, 1])
    protos = protonet_fit(ds, Encoder.frozen_table(ds.ids, ds.features))
    np.testing.assert_array_equal(protos, [[1.0, 2.0], [3.0, -4.0]])


def test_fit_is_class_mean():
    ds = dataset([[0.0, 0.0], [2.0, 0.0], [5.0, 5.0]], [0, 0, 1])
    protos = protonet_fit(ds, Encoder.frozen_table(ds.ids, ds.features))
    np.testing.assert_array_equal(protos[0], [1.0, 0.0])


def test_fit_permutation_invariant():
    feats = [[0.0, 1.0], [4.0, -1.0], [2.0, 2.0], [6.0, 6.0]]
    labels = [0, 0, 0, 1]
    a = protonet_fit(dataset(feats, labels), Encoder.frozen_table(np.arange(4), feats))
    order = [2, 0, 1, 3]
    shuffled = dataset([feats[i] for i in order], [labels[i] for i in order])
    b = protonet_fit(shuffled, Encoder.frozen_table(shuffled.ids, shuffled.features))
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fit_empty_class_raises():
    ds = dataset([[0.0, 0.0]], [0], num_classes=2)
    with pytest.raises(EmptyClass):
        protonet_fit(ds, Encoder.frozen_table(ds.ids, ds.features))


def test_classify_equidistant_uniform():
    protos = np.array([[0.0, 0.0], [2.0, 0.0]])
    probs = protonet_classify(np.array([1.0, 0.0]), protos)
    np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)


def test_classify_derived_ratio():
    protos = np.array([[0.0, 0.0], [2.0, 0.0]])  # squared distances 0 and 4 -> gap 2... wait
    probs = protonet_classify(np.array([0.0, 0.0]), protos)
    # softmax over -(d^2): gap of 4 between the two
    assert probs[0] == pytest.approx(1.0 / (1.0 + math.exp(-4.0)), abs=1e-12)
    protos_gap2 = np.array([[0.0, 0.0], [math.sqrt(2.0), 0.0]])
    probs = protonet_classify(np.array([0.0, 0.0]), protos_gap2)
    assert probs[0] == pytest.approx(Z1, abs=1e-12)


def test_classify_shift_invariance():
    protos = np.array([[1.0, 1.0], [4.0, 0.0], [0.0, 5.0]])
    x = np.array([2.0, 2.0])
    base = protonet_classify(x, protos)
    # adding a common offset to every squared distance cancels in the softmax;
    # moving the query shifts all distances together only in degenerate layouts,
    # so verify against a manual shifted computation instead
    d2 = ((x - protos) ** 2).sum(axis=1)
    shifted = np.exp(-(d2 + 17.0))
    shifted /= shifted.sum()
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_classify_empty():
    with pytest.raises(EmptyStore):
        protonet_classify(np.zeros(2), np.zeros((0, 2)))


def test_equivalence_bridge_with_reduction_conditions(rng):
    # one prototype per class, sigma = 1/sqrt(2), indicator logits
    feats = rng.normal(size=(20, 3))
    labels = rng.integers(0, 3, size=20)
    labels[:3] = [0, 1, 2]
    ds = dataset(feats, labels, num_classes=3)
    enc = Encoder.frozen_table(ds.ids, ds.features)
    protos = protonet_fit(ds, enc)

    sigma = 1.0 / math.sqrt(2.0)
    store = make_store(
        [(protos[c], beta_logits(3, c, 1.0), sigma, c) for c in range(3)],
        dim=3, num_classes=3,
    )
    for _ in range(200):
        x = rng.normal(size=3) * 2
        a = classify(x, store, indicator_logits=True).class_probs
        b = protonet_classify(x, protos)
        np.testing.assert_allclose(a, b, atol=1e-9)


def test_train_protonet_loss_decreases(rng):
    # overlapping blobs so the class-mean init is not already perfect
    feats = np.vstack([rng.normal(size=(30, 2)) - 0.7, rng.normal(size=(30, 2)) + 0.7])
    labels = np.array([0] * 30 + [1] * 30)
    ds = dataset(feats, labels)
    cfg = TrainConfig(learning_rate=0.05, batch_size=16, max_epochs=3, seed=1).validate()
    result = train_protonet(ds, cfg)
    assert result.losses[-1] < result.losses[0]
    assert len(result.losses) == 3 * math.ceil(60 / 16)
