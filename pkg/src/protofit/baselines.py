"""Single-prototype-per-class reference head.

Kept deliberately minimal: class-mean fitting, softmax over negative squared
distances, and a small Adam training loop that shares the main loop's batch
and shuffle conventions so trajectories can be compared side by side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import CLASSIFICATION, TrainConfig
from .encoder import Encoder, batch_keys
from .errors import EmptyClass, EmptyStore, ModeMismatch
from .objective import LOG_CLAMP, Adam


def protonet_fit(dataset, encoder: Encoder) -> np.ndarray:
    """Class-mean prototypes, shape (C, D), computed with the encoder frozen."""
    if dataset.mode != CLASSIFICATION:
        raise ModeMismatch("the single-prototype baseline is classification only")
    labels = dataset.labels.astype(np.int64)
    protos = np.empty((dataset.num_classes, encoder.spec.output_dim))
    for c in range(dataset.num_classes):
        members = np.flatnonzero(labels == c)
        if len(members) == 0:
            raise EmptyClass(f"class {c} has no training examples")
        keys = dataset.ids[members] if encoder.consumes_ids else dataset.features[members]
        protos[c] = encoder.encode_frozen_for_init(keys).mean(axis=0)
    return protos


def protonet_classify(features, prototypes: np.ndarray) -> np.ndarray:
    """Softmax over negative squared L2 distances to the class prototypes."""
    if prototypes.shape[0] == 0:
        raise EmptyStore("no prototypes fitted")
    x = np.asarray(features, dtype=np.float64)
    d2 = kernels.sq_dists(x[None, :], prototypes)[0]
    a = -d2 + d2.min()  # shift for stability
    e = np.exp(a)
    return e / e.sum()


@dataclass
class ProtonetResult:
    prototypes: np.ndarray
    encoder: Encoder
    losses: list[float]


def train_protonet(dataset, config: TrainConfig, *, encoder: Encoder | None = None) -> ProtonetResult:
    """Train class-mean prototypes (and optionally the encoder) with Adam.

    Mirrors the main loop's epoch shuffling and batching exactly, drawing the
    same generator sequence, so per-step losses are directly comparable.
    """
    config.validate()
    if encoder is None:
        encoder = Encoder.frozen_table(dataset.ids, dataset.features)
    protos = protonet_fit(dataset, encoder)
    opt = Adam(config.learning_rate)
    rng = np.random.default_rng(config.seed)

    n = len(dataset)
    bs = config.batch_size
    num_batches = math.ceil(n / bs)
    losses: list[float] = []
    for _ in range(config.max_epochs):
        perm = rng.permutation(n)
        for j in range(num_batches):
            idx = perm[j * bs : (j + 1) * bs]
            keys = batch_keys(encoder, dataset, idx)
            y = dataset.labels[idx].astype(np.int64)
            X, enc_cache = encoder.encode_batch(keys)
            B = X.shape[0]

            d2 = kernels.sq_dists(X, protos)
            a = -d2
            a -= a.max(axis=1, keepdims=True)
            probs = np.exp(a)
            probs /= probs.sum(axis=1, keepdims=True)
            picked = probs[np.arange(B), y]
            losses.append(float(-np.log(np.maximum(picked, LOG_CLAMP)).mean()))

            g_logit = probs.copy()
            g_logit[np.arange(B), y] -= 1.0
            g_logit /= B
            # logits_c = -||x - p_c||^2, so d logits / d p_c = 2 (x - p_c)
            grad_p = 2.0 * (g_logit.T @ X - g_logit.sum(axis=0)[:, None] * protos)
            opt.step_param("protos", protos, grad_p)
            if encoder.spec.trainable and config.train_encoder:
                grad_x = 2.0 * (g_logit @ protos - g_logit.sum(axis=1)[:, None] * X)
                enc_grads = encoder.backward(enc_cache, grad_x)
                for name, param in encoder.params.items():
                    opt.step_param("enc." + name, param, enc_grads[name])
    return ProtonetResult(prototypes=protos, encoder=encoder, losses=losses)
