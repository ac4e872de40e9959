"""Losses, analytic gradients, constraint projection and the Adam optimizer.

Per-prototype variances and the shared cluster scale are trained in log
space, so positivity needs no projection. The diversity threshold is treated
as a constant inside the loss: the shared scale feeds it but receives no
gradient through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import CLASSIFICATION, PrototypeStore, TrainConfig
from .encoder import Encoder
from .errors import NonFiniteGradient, ShapeMismatch

LOG_CLAMP = 1e-12

PROTO_EMBED = "proto_embed"
PROTO_LOGITS = "proto_logits"
PROTO_LOG_SIGMA = "proto_log_sigma"
SHARED_LOG_SIGMA = "shared_log_sigma"
ENC_PREFIX = "enc."


@dataclass
class LossBreakdown:
    l0: float
    l_div: float
    total: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class BatchCache:
    """Forward quantities the training loop reuses after backward."""

    features: np.ndarray
    d2: np.ndarray
    z: np.ndarray
    yhat: np.ndarray
    proto_ids: np.ndarray


def _encode(keys, labels, store: PrototypeStore, encoder: Encoder):
    X, enc_cache = encoder.encode_batch(keys)
    if X.shape[0] == 0:
        raise ShapeMismatch("batch must be nonempty")
    if X.shape[1] != store.dim:
        raise ShapeMismatch(
            f"encoder output dim {X.shape[1]} does not match store dim {store.dim}"
        )
    if store.mode == CLASSIFICATION:
        y = np.asarray(labels, dtype=np.int64)
    else:
        y = np.asarray(labels, dtype=np.float64)
    if y.shape != (X.shape[0],):
        raise ShapeMismatch("labels must align with the batch")
    return X, y, enc_cache


def _forward(X, y, store: PrototypeStore, indicator_logits: bool):
    from .inference import class_distributions  # local import avoids a cycle

    d2, z = kernels.gaussian_importance(X, store.embed, store.variances)
    if store.mode == CLASSIFICATION:
        q = class_distributions(store, indicator_logits=indicator_logits)
        yhat = z @ q
        picked = yhat[np.arange(len(y)), y]
        l0 = float(-np.log(np.maximum(picked, LOG_CLAMP)).mean())
    else:
        q = None
        yhat = z @ store.logits
        l0 = float(((y - yhat) ** 2).mean())
    return d2, z, q, yhat, l0


def task_loss(
    keys, labels, store: PrototypeStore, encoder: Encoder, *, indicator_logits: bool = False
) -> LossBreakdown:
    """Cross-entropy (classification) or mean squared error (regression)."""
    X, y, _ = _encode(keys, labels, store, encoder)
    _, _, _, _, l0 = _forward(X, y, store, indicator_logits)
    return LossBreakdown(l0=l0, l_div=0.0, total=l0)


def diversity_loss(store: PrototypeStore, lam: float) -> float:
    """Sum of squared hinge shortfalls of pairwise prototype distances below lam."""
    if len(store) < 2:
        return 0.0
    value, _ = kernels.pairwise_hinge(store.embed, lam)
    return value


def forward_backward(
    keys,
    labels,
    store: PrototypeStore,
    encoder: Encoder,
    config: TrainConfig,
    lam: float,
) -> tuple[LossBreakdown, BatchCache]:
    """One fused forward and exact analytic backward pass over a batch.

    Gradient buffers cover every trainable tensor: prototype embeddings,
    logits, per-prototype log variances, the shared log scale (identically
    zero because the diversity threshold is stop-gradient), and encoder
    parameters (zeroed when the encoder is frozen or config.train_encoder is
    off).
    """
    X, y, enc_cache = _encode(keys, labels, store, encoder)
    d2, z, q, yhat, l0 = _forward(X, y, store, config.indicator_logits)
    B = X.shape[0]
    sigma = store.variances

    if store.mode == CLASSIFICATION:
        picked = yhat[np.arange(B), y]
        gy = np.where(picked > LOG_CLAMP, -1.0 / (B * np.maximum(picked, LOG_CLAMP)), 0.0)
        grad_logits = np.zeros_like(store.logits)
        if not config.indicator_logits:  # indicator rows are constants
            for c in np.unique(y):
                sel = y == c
                wk = (gy[sel, None] * z[sel]).sum(axis=0)  # (K,)
                onehot = np.zeros(store.num_classes)
                onehot[c] = 1.0
                grad_logits += (wk * q[:, c])[:, None] * (onehot[None, :] - q)
        s = gy[:, None] * q[:, y].T  # s_ik = dL/dz_ik
    else:
        gy = 2.0 * (yhat - y) / B
        grad_logits = z.T @ gy
        s = gy[:, None] * store.logits[None, :]

    t = z * (s - (s * z).sum(axis=1, keepdims=True))  # dL/da through the softmax
    grad_p, grad_lv, grad_x = kernels.backprop_importance(X, store.embed, sigma, d2, t)

    if len(store) >= 2 and config.rho_d != 0.0:
        l_div, grad_div = kernels.pairwise_hinge(store.embed, lam)
        grad_p = grad_p + config.rho_d * grad_div
    else:
        l_div = diversity_loss(store, lam)

    grads: dict[str, np.ndarray] = {
        PROTO_EMBED: grad_p,
        PROTO_LOGITS: grad_logits,
        PROTO_LOG_SIGMA: grad_lv,
        SHARED_LOG_SIGMA: np.zeros(()),
    }
    enc_grads = encoder.backward(enc_cache, grad_x)
    if not config.train_encoder:
        enc_grads = {name: np.zeros_like(g) for name, g in enc_grads.items()}
    for name, g in enc_grads.items():
        grads[ENC_PREFIX + name] = g

    total = l0 + config.rho_d * l_div
    if not np.isfinite(total):
        raise NonFiniteGradient(f"non-finite loss: l0={l0} l_div={l_div}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {name}")

    breakdown = LossBreakdown(l0=l0, l_div=l_div, total=total, grads=grads)
    cache = BatchCache(features=X, d2=d2, z=z, yhat=yhat, proto_ids=store.ids.copy())
    return breakdown, cache


def backward(
    keys, labels, store: PrototypeStore, encoder: Encoder, config: TrainConfig, lam: float
) -> LossBreakdown:
    """Loss plus exact gradients for every parameter group."""
    breakdown, _ = forward_backward(keys, labels, store, encoder, config, lam)
    return breakdown


def project_constraints(store: PrototypeStore) -> None:
    """Clamp classification logits back to home >= 0, others <= 0. Idempotent."""
    if store.mode != CLASSIFICATION or len(store) == 0:
        return
    rows = np.arange(len(store))
    home_vals = np.maximum(store.logits[rows, store.homes], 0.0)
    np.minimum(store.logits, 0.0, out=store.logits)
    store.logits[rows, store.homes] = home_vals


class Adam:
    """Adam without weight decay (beta1=0.9, beta2=0.999, eps=1e-8).

    Dense slots hold one moment pair per tensor. Row slots key their moments
    by prototype id, so creations start fresh bias-correction clocks and
    prunes drop state without any index bookkeeping.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._dense: dict[str, dict] = {}
        self._rows: dict[str, dict[int, list]] = {}

    # -- dense tensors -------------------------------------------------------

    def step_param(self, name: str, param: np.ndarray, grad: np.ndarray) -> None:
        if param.shape != grad.shape:
            raise ShapeMismatch(f"{name}: param {param.shape} vs grad {grad.shape}")
        slot = self._dense.setdefault(
            name, {"m": np.zeros_like(param), "v": np.zeros_like(param), "t": 0}
        )
        if slot["m"].shape != param.shape:
            raise ShapeMismatch(f"{name}: moment shape {slot['m'].shape} vs param {param.shape}")
        slot["t"] += 1
        slot["m"] = self.beta1 * slot["m"] + (1 - self.beta1) * grad
        slot["v"] = self.beta2 * slot["v"] + (1 - self.beta2) * grad**2
        m_hat = slot["m"] / (1 - self.beta1 ** slot["t"])
        v_hat = slot["v"] / (1 - self.beta2 ** slot["t"])
        param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    # -- per-prototype rows ----------------------------------------------------

    def step_rows(self, name: str, ids, params: np.ndarray, grads: np.ndarray) -> None:
        """Update one row per prototype id, in place."""
        if params.shape != grads.shape or params.shape[0] != len(ids):
            raise ShapeMismatch(f"{name}: rows {params.shape} vs grads {grads.shape}")
        slots = self._rows.setdefault(name, {})
        row_shape = params.shape[1:]
        for i, pid in enumerate(ids):
            pid = int(pid)
            slot = slots.get(pid)
            if slot is None:
                slot = [np.zeros(row_shape), np.zeros(row_shape), 0]
                slots[pid] = slot
            slot[2] += 1
            slot[0] = self.beta1 * slot[0] + (1 - self.beta1) * grads[i]
            slot[1] = self.beta2 * slot[1] + (1 - self.beta2) * grads[i] ** 2
            m_hat = slot[0] / (1 - self.beta1 ** slot[2])
            v_hat = slot[1] / (1 - self.beta2 ** slot[2])
            params[i] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def drop_rows(self, pid: int) -> None:
        for slots in self._rows.values():
            slots.pop(int(pid), None)

    # -- persistence -----------------------------------------------------------

    def state(self) -> dict:
        return {
            "lr": self.lr,
            "dense": {
                name: {"m": s["m"].copy(), "v": s["v"].copy(), "t": s["t"]}
                for name, s in self._dense.items()
            },
            "rows": {
                name: {
                    int(pid): [s[0].copy(), s[1].copy(), s[2]] for pid, s in slots.items()
                }
                for name, slots in self._rows.items()
            },
        }

    def restore(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self._dense = {
            name: {"m": np.array(s["m"]), "v": np.array(s["v"]), "t": int(s["t"])}
            for name, s in state["dense"].items()
        }
        self._rows = {
            name: {
                int(pid): [np.array(s[0]), np.array(s[1]), int(s[2])]
                for pid, s in slots.items()
            }
            for name, slots in state["rows"].items()
        }
