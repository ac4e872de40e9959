"""Prototype lifecycle: initialization, gated creation, and discounted pruning.

Creation streams one example at a time, so a decision sees every prototype
spawned earlier in the same batch. Pruning scores each live prototype over a
sliding window of recorded importance rows with a linear step discount and
removes the ones that fall below the threshold, never emptying a class.
"""

from __future__ import annotations

import math
from collections import deque
from typing import NamedTuple

import numpy as np

from .core import (
    CLASSIFICATION,
    REGRESSION,
    EmbeddedExample,
    Prototype,
    PrototypeStore,
    TrainConfig,
    beta_logits,
)
from .encoder import Encoder
from .errors import EmptyClass, EmptyWindow, NonMonotoneStep
from .inference import ImportanceRow


class LambdaResult(NamedTuple):
    value: float
    clamped: bool


def compute_lambda(sigma: float, rho: float, alpha: float, dim: int, lambda_floor: float) -> LambdaResult:
    """Creation threshold 2*sigma*log(alpha / (1 + rho/sigma)^(dim/2)).

    The raw expression goes non-positive whenever alpha <= (1+rho/sigma)^(dim/2),
    which would spawn a prototype for every example; in that regime the value
    is clamped to ``lambda_floor`` and the result is flagged so callers can
    count clamp events.
    """
    raw = 2.0 * sigma * (math.log(alpha) - 0.5 * dim * math.log1p(rho / sigma))
    if raw <= 0.0:
        return LambdaResult(lambda_floor, True)
    return LambdaResult(raw, False)


def init_prototypes(dataset, encoder: Encoder, config: TrainConfig) -> PrototypeStore:
    """Seed the store from frozen-encoder embeddings.

    Classification: one prototype per class, the mean embedding of up to
    ``n_init`` examples sampled without replacement under ``config.seed``,
    with the +beta/-beta logit pattern and variance sigma0.

    Regression: the target range is cut into ``n_reg_bins`` equal-width bins;
    every nonempty bin yields one prototype whose scalar output is the mean
    target inside the bin. A constant-target dataset degenerates to a single
    bin covering everything.
    """
    rng = np.random.default_rng(config.seed)
    dim = encoder.spec.output_dim

    if dataset.mode == CLASSIFICATION:
        store = PrototypeStore(
            CLASSIFICATION, dim=dim, num_classes=dataset.num_classes, capacity=config.p_max
        )
        labels = dataset.labels.astype(np.int64)
        for c in range(dataset.num_classes):
            members = np.flatnonzero(labels == c)
            if len(members) == 0:
                raise EmptyClass(f"class {c} has no training examples")
            chosen = _sample_members(members, config.n_init, rng)
            feats = _encode_rows(encoder, dataset, chosen)
            store.add(
                Prototype(
                    embedding=feats.mean(axis=0),
                    logits=beta_logits(dataset.num_classes, c, config.beta),
                    variance=config.sigma0,
                    home_class=c,
                )
            )
        return store

    targets = dataset.labels.astype(np.float64)
    lo, hi = float(targets.min()), float(targets.max())
    if hi > lo:
        edges = np.linspace(lo, hi, config.n_reg_bins + 1)
    else:
        edges = np.array([lo, lo])  # degenerate range: one bin holds everything
    store = PrototypeStore(REGRESSION, dim=dim, bin_edges=edges, capacity=config.p_max)
    n_bins = len(edges) - 1
    if hi > lo:
        width = (hi - lo) / n_bins
        bins = np.minimum(((targets - lo) / width).astype(np.int64), n_bins - 1)
    else:
        bins = np.zeros(len(targets), dtype=np.int64)
    for b in range(n_bins):
        members = np.flatnonzero(bins == b)
        if len(members) == 0:
            continue
        chosen = _sample_members(members, config.n_init, rng)
        feats = _encode_rows(encoder, dataset, chosen)
        store.add(
            Prototype(
                embedding=feats.mean(axis=0),
                logits=float(targets[members].mean()),
                variance=config.sigma0,
                home_class=b,
            )
        )
    return store


def _sample_members(members: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    # Taking the whole group keeps dataset order and draws nothing from rng,
    # so runs with n >= group size stay aligned with mean-prototype baselines.
    if n >= len(members):
        return members
    return members[rng.choice(len(members), size=n, replace=False)]


def _encode_rows(encoder: Encoder, dataset, rows: np.ndarray) -> np.ndarray:
    keys = dataset.ids[rows] if encoder.consumes_ids else dataset.features[rows]
    return encoder.encode_frozen_for_init(keys)


class CreateResult(NamedTuple):
    proto_id: int | None
    wanted: bool


def maybe_create(
    example: EmbeddedExample,
    store: PrototypeStore,
    config: TrainConfig,
    step: int,
    lam: float,
) -> CreateResult:
    """Spawn a prototype from the example if it sits beyond lam of its class.

    The gate compares the minimum squared L2 distance to same-class
    prototypes (infinite when the class bucket is empty) strictly against
    ``lam``, only after the warm-up period. ``wanted`` reports that the gate
    fired even when a full store silently declines the creation, so callers
    can count declined events. Regression stores participate only when
    ``config.regression_creation`` is set, using target bins as pseudo-classes.
    """
    if store.mode == REGRESSION:
        if not config.regression_creation:
            return CreateResult(None, False)
        home = store.bin_index(float(example.label))
    else:
        home = int(example.label)

    if step < config.warmup_steps:
        return CreateResult(None, False)

    rows = store.class_rows(home)
    if len(rows) == 0:
        min_d2 = math.inf
    else:
        diff = store.embed[rows] - example.features[None, :]
        min_d2 = float((diff * diff).sum(axis=1).min())
    if not min_d2 > lam:
        return CreateResult(None, False)
    if len(store) >= store.capacity:
        return CreateResult(None, True)

    if store.mode == REGRESSION:
        logits: np.ndarray | float = float(example.label)
    else:
        logits = beta_logits(store.num_classes, home, config.beta)
    pid = store.add(
        Prototype(
            embedding=np.array(example.features, dtype=np.float64),
            logits=logits,
            variance=config.sigma0,
            home_class=home,
            created_step=step,
        )
    )
    return CreateResult(pid, True)


class ImportanceWindow:
    """Ring of the most recent importance rows, at most ``capacity`` of them.

    Rows are ordered by step; anything older than ``current_step - capacity``
    is evicted even when the ring is not full.
    """

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        self.rows: deque[ImportanceRow] = deque()
        self.current_step = 0

    def __len__(self) -> int:
        return len(self.rows)

    def record(self, row: ImportanceRow) -> None:
        if row.step < self.current_step:
            raise NonMonotoneStep(
                f"row step {row.step} is older than window step {self.current_step}"
            )
        self.rows.append(row)
        self.current_step = row.step
        while len(self.rows) > self.capacity:
            self.rows.popleft()
        floor = self.current_step - self.capacity
        while self.rows and self.rows[0].step < floor:
            self.rows.popleft()


def discount(step: int, now: int, delta: int) -> float:
    """Linear recency weight: 1 at the current step, 0 at now - delta."""
    return (step - now + delta) / delta


def prune(store: PrototypeStore, window: ImportanceWindow, config: TrainConfig) -> list[int]:
    """Remove prototypes whose discounted mean importance fell below epsilon.

    score_k = (1/delta) * sum over window rows of discount(row.step) * z_k,
    with rows that predate a prototype contributing zero. Protected from
    removal: the last prototype of a class, and anything younger than
    delta/2 steps (a newborn has had no time to accumulate window mass).
    Returns the removed ids in store order.
    """
    if len(window) == 0:
        raise EmptyWindow("cannot prune from an empty importance window")

    delta = config.delta
    now = window.current_step
    scores: dict[int, float] = {int(pid): 0.0 for pid in store.ids}
    for row in window.rows:
        w = discount(row.step, now, delta)
        for pid, z in zip(row.ids, row.weights):
            pid = int(pid)
            if pid in scores:
                scores[pid] += w * z

    sizes = store.class_sizes()
    removed: list[int] = []
    for pid in [int(p) for p in store.ids]:
        if scores[pid] / delta >= config.epsilon:
            continue
        proto = store.get(pid)
        if now - proto.created_step < delta / 2:
            continue
        if sizes[proto.home_class] <= 1:
            continue
        store.remove(pid)
        sizes[proto.home_class] -= 1
        removed.append(pid)
    return removed
