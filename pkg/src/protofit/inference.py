"""Prototype importance, joint prediction and prototype-to-example projection.

All functions here are pure readers of a store snapshot and safe to call
concurrently. Importance is the normalized isotropic Gaussian density of the
query under each prototype, computed in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import CLASSIFICATION, REGRESSION, EmbeddedExample, Prototype, PrototypeStore
from .errors import EmptyStore, ModeMismatch, ShapeMismatch


@dataclass
class ImportanceRow:
    """One example's responsibility weights over the live prototypes."""

    example_id: int
    step: int
    ids: np.ndarray
    weights: np.ndarray


@dataclass
class Prediction:
    class_probs: np.ndarray | None
    estimate: float | None
    importance: ImportanceRow


def _check_features(features, dim: int) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (dim,):
        raise ShapeMismatch(f"features shape {x.shape} does not match store dim {dim}")
    return x


def batch_importance(X: np.ndarray, store: PrototypeStore) -> tuple[np.ndarray, np.ndarray]:
    """Importance weights for a whole batch; returns (d2, z) of shape (B, K)."""
    if len(store) == 0:
        raise EmptyStore("store holds no prototypes")
    return kernels.gaussian_importance(X, store.embed, store.variances)


def importance(features, store: PrototypeStore, *, example_id: int = -1, step: int = 0) -> ImportanceRow:
    """Normalized Gaussian responsibility of every live prototype for one query."""
    x = _check_features(features, store.dim)
    _, z = batch_importance(x[None, :], store)
    return ImportanceRow(example_id=example_id, step=step, ids=store.ids.copy(), weights=z[0])


def prototype_prediction(proto: Prototype) -> np.ndarray:
    """Class distribution of a single prototype: softmax over its logits."""
    if not isinstance(proto.logits, np.ndarray):
        raise ModeMismatch("regression prototypes have no class distribution")
    a = proto.logits - proto.logits.max()
    e = np.exp(a)
    return e / e.sum()


def class_distributions(store: PrototypeStore, *, indicator_logits: bool = False) -> np.ndarray:
    """Stacked per-prototype class distributions, shape (K, C).

    ``indicator_logits`` replaces the softmax with an exact one-hot at the
    home class: the infinite-logit-magnitude limit, kept exact so the
    single-prototype reduction is testable without large-number arithmetic.
    """
    if store.mode != CLASSIFICATION:
        raise ModeMismatch("class distributions need a classification store")
    if indicator_logits:
        q = np.zeros((len(store), store.num_classes))
        q[np.arange(len(store)), store.homes] = 1.0
        return q
    a = store.logits - store.logits.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def classify(features, store: PrototypeStore, *, indicator_logits: bool = False) -> Prediction:
    """Joint class probabilities: importance-weighted mix of prototype predictions."""
    if store.mode != CLASSIFICATION:
        raise ModeMismatch("classify needs a classification store")
    row = importance(features, store)
    q = class_distributions(store, indicator_logits=indicator_logits)
    probs = row.weights @ q
    return Prediction(class_probs=probs, estimate=None, importance=row)


def regress(features, store: PrototypeStore) -> Prediction:
    """Importance-weighted mean of the prototypes' scalar outputs."""
    if store.mode != REGRESSION:
        raise ModeMismatch("regress needs a regression store")
    row = importance(features, store)
    estimate = float(row.weights @ store.logits)
    return Prediction(class_probs=None, estimate=estimate, importance=row)


def nearest_examples(
    proto: Prototype, examples: list[EmbeddedExample], count: int
) -> list[tuple[int, float]]:
    """The ``count`` examples closest to the prototype in plain L2 distance.

    Ties break toward the lower example id. Returns (id, distance) pairs,
    fewer than ``count`` if the dataset is smaller.
    """
    scored = [
        (float(np.linalg.norm(proto.embedding - ex.features)), ex.id) for ex in examples
    ]
    scored.sort()
    return [(ex_id, dist) for dist, ex_id in scored[:count]]


def examples_within(proto: Prototype, examples: list[EmbeddedExample], tau: float) -> list[int]:
    """Ids of examples strictly inside an L2 ball of radius tau around the prototype."""
    return [
        ex.id
        for ex in examples
        if float(np.linalg.norm(proto.embedding - ex.features)) < tau
    ]
