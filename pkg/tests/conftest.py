import numpy as np
import pytest

from protofit.core import CLASSIFICATION, REGRESSION, Prototype, PrototypeStore, TrainConfig, beta_logits
from protofit.encoder import Encoder


def make_store(protos, *, mode=CLASSIFICATION, dim=2, num_classes=2, capacity=64, bin_edges=None):
    """Build a store from (embedding, logits, variance, home) tuples."""
    store = PrototypeStore(mode, dim=dim, num_classes=num_classes, capacity=capacity,
                           bin_edges=bin_edges)
    for emb, logits, var, home in protos:
        store.add(Prototype(embedding=np.asarray(emb, dtype=float), logits=logits,
                            variance=var, home_class=home))
    return store


def random_instance(rng, *, mode=CLASSIFICATION, encoder_kind="projection"):
    """A small random head + encoder + batch for gradient checking."""
    dim = int(rng.integers(2, 9))
    num_classes = int(rng.integers(2, 5))
    k = int(rng.integers(1, 9))
    batch = int(rng.integers(1, 17))
    in_dim = int(rng.integers(2, 9))

    if mode == CLASSIFICATION:
        store = PrototypeStore(CLASSIFICATION, dim=dim, num_classes=num_classes, capacity=64)
    else:
        store = PrototypeStore(REGRESSION, dim=dim, capacity=64,
                               bin_edges=np.linspace(-1, 1, 4))
    for i in range(k):
        home = int(rng.integers(0, num_classes)) if mode == CLASSIFICATION else int(rng.integers(0, 3))
        logits = beta_logits(num_classes, home, 1.0) if mode == CLASSIFICATION else float(rng.normal())
        store.add(Prototype(embedding=rng.normal(size=dim), logits=logits,
                            variance=1.0, home_class=home, created_step=0))
    # trainer-style raw parameter state: unconstrained logits, varied scales
    if mode == CLASSIFICATION:
        store.logits = rng.normal(size=(k, num_classes))
    store.logvar = rng.uniform(-0.5, 0.6, size=k)

    table_ids = np.arange(batch, dtype=np.int64)
    table = rng.normal(size=(batch, in_dim))
    if encoder_kind == "projection":
        encoder = Encoder.with_projection(table_ids, table, dim, seed=int(rng.integers(1 << 30)))
    elif encoder_kind == "mlp":
        encoder = Encoder.mlp(in_dim, (5,), dim, seed=int(rng.integers(1 << 30)))
    else:
        table = rng.normal(size=(batch, dim))
        encoder = Encoder.frozen_table(table_ids, table)

    keys = table_ids if encoder.consumes_ids else table
    if mode == CLASSIFICATION:
        labels = rng.integers(0, num_classes, size=batch)
    else:
        labels = rng.normal(size=batch)
    lam = float(rng.uniform(0.5, 2.5))
    return store, encoder, keys, labels, lam


def numerical_gradients(loss_fn, arrays, h=1e-5):
    """Central finite differences of loss_fn w.r.t. each element of each array.

    Perturbs the live arrays in place, so loss_fn must read them directly.
    """
    grads = {}
    for name, arr in arrays.items():
        grad = np.zeros_like(arr, dtype=float)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss_fn()
            flat[i] = orig - h
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2.0 * h)
        grads[name] = grad
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst elementwise relative error; tiny pairs below the floor count as 0."""
    a = np.asarray(analytic, dtype=float).reshape(-1)
    f = np.asarray(numeric, dtype=float).reshape(-1)
    assert a.shape == f.shape
    worst = 0.0
    for x, y in zip(a, f):
        scale = max(abs(x), abs(y))
        if scale < floor:
            continue
        worst = max(worst, abs(x - y) / scale)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def default_config(**overrides) -> TrainConfig:
    cfg = TrainConfig(**overrides)
    return cfg.validate()
