"""Prototype store and the domain types shared by inference, dynamics and training.

The store is array-backed: embeddings, log-variances and logits live in
contiguous float64 arrays ordered by insertion, which is what the hot kernels
and the optimizer consume. ``Prototype`` objects returned by queries are
materialized copies; mutating them does not touch the store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .errors import (
    CapacityExceeded,
    ConfigInvalid,
    InvariantViolation,
    ModeMismatch,
    UnknownId,
)

CLASSIFICATION = "classification"
REGRESSION = "regression"


@dataclass
class EmbeddedExample:
    """One encoded example: feature vector in prototype space plus its label.

    ``label`` is a class index for classification datasets and a real target
    for regression; the two never mix within one dataset.
    """

    id: int
    features: np.ndarray
    label: int | float


@dataclass
class Prototype:
    """A learned cluster center with its own prediction parameters.

    ``logits`` is a length-C vector in classification mode and a plain float
    in regression mode (no sign constraint there). ``id`` is assigned by the
    store on insertion; ids are monotone and never reused, so importance rows
    recorded before a prune can still be attributed safely.
    """

    embedding: np.ndarray
    logits: np.ndarray | float
    variance: float
    home_class: int
    created_step: int = 0
    id: int = -1


class PrototypeStore:
    """Ordered, capacity-capped set of prototypes with a per-class index."""

    def __init__(
        self,
        mode: str = CLASSIFICATION,
        *,
        dim: int,
        num_classes: int | None = None,
        bin_edges: np.ndarray | None = None,
        capacity: int = 256,
    ):
        if mode not in (CLASSIFICATION, REGRESSION):
            raise ConfigInvalid(f"unknown store mode {mode!r}")
        if mode == CLASSIFICATION and (num_classes is None or num_classes < 1):
            raise ConfigInvalid("classification store needs num_classes >= 1")
        if capacity < 1:
            raise ConfigInvalid("capacity must be >= 1")
        self.mode = mode
        self.dim = int(dim)
        self.num_classes = int(num_classes) if num_classes is not None else None
        self.bin_edges = None if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
        self.capacity = int(capacity)
        self.next_id = 0

        self.embed = np.zeros((0, self.dim))
        self.logvar = np.zeros(0)
        if mode == CLASSIFICATION:
            self.logits = np.zeros((0, self.num_classes))
        else:
            self.logits = np.zeros(0)
        self.ids = np.zeros(0, dtype=np.int64)
        self.homes = np.zeros(0, dtype=np.int64)
        self.created = np.zeros(0, dtype=np.int64)

        self._row_of: dict[int, int] = {}
        self._by_class: dict[int, list[int]] = {}

    def __len__(self) -> int:
        return self.embed.shape[0]

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.logvar)

    # -- mutation ----------------------------------------------------------

    def add(self, proto: Prototype) -> int:
        """Append a prototype; returns its freshly assigned id."""
        if len(self) >= self.capacity:
            raise CapacityExceeded(f"store already holds {self.capacity} prototypes")
        self._validate(proto)

        pid = self.next_id
        self.next_id += 1
        emb = np.asarray(proto.embedding, dtype=np.float64).reshape(self.dim)
        self.embed = np.vstack([self.embed, emb[None, :]])
        self.logvar = np.append(self.logvar, math.log(proto.variance))
        if self.mode == CLASSIFICATION:
            lg = np.asarray(proto.logits, dtype=np.float64).reshape(self.num_classes)
            self.logits = np.vstack([self.logits, lg[None, :]])
        else:
            self.logits = np.append(self.logits, float(proto.logits))
        self.ids = np.append(self.ids, pid)
        self.homes = np.append(self.homes, int(proto.home_class))
        self.created = np.append(self.created, int(proto.created_step))

        self._row_of[pid] = len(self) - 1
        self._by_class.setdefault(int(proto.home_class), []).append(pid)
        proto.id = pid
        return pid

    def remove(self, pid: int) -> Prototype:
        """Delete a prototype by id; surviving ids are unchanged."""
        pid = int(pid)
        if pid not in self._row_of:
            raise UnknownId(f"no prototype with id {pid}")
        row = self._row_of[pid]
        removed = self._materialize(row)

        self.embed = np.delete(self.embed, row, axis=0)
        self.logvar = np.delete(self.logvar, row)
        self.logits = np.delete(self.logits, row, axis=0)
        self.ids = np.delete(self.ids, row)
        self.homes = np.delete(self.homes, row)
        self.created = np.delete(self.created, row)

        del self._row_of[pid]
        for other, r in self._row_of.items():
            if r > row:
                self._row_of[other] = r - 1
        bucket = self._by_class[removed.home_class]
        bucket.remove(pid)
        if not bucket:
            del self._by_class[removed.home_class]
        return removed

    # -- queries -----------------------------------------------------------

    def query(self, home_class: int | None = None) -> list[Prototype]:
        """Prototypes in insertion order, optionally restricted to one class."""
        if home_class is None:
            return [self._materialize(r) for r in range(len(self))]
        return [self.get(pid) for pid in self._by_class.get(int(home_class), [])]

    def get(self, pid: int) -> Prototype:
        pid = int(pid)
        if pid not in self._row_of:
            raise UnknownId(f"no prototype with id {pid}")
        return self._materialize(self._row_of[pid])

    def has(self, pid: int) -> bool:
        return int(pid) in self._row_of

    def row_of(self, pid: int) -> int:
        pid = int(pid)
        if pid not in self._row_of:
            raise UnknownId(f"no prototype with id {pid}")
        return self._row_of[pid]

    def class_rows(self, home_class: int) -> np.ndarray:
        """Row indices of one class bucket, in insertion order."""
        ids = self._by_class.get(int(home_class), [])
        return np.array([self._row_of[p] for p in ids], dtype=np.int64)

    def class_sizes(self) -> dict[int, int]:
        return {c: len(ids) for c, ids in self._by_class.items()}

    def bin_index(self, target: float) -> int:
        """Pseudo-class of a regression target under the stored bin edges."""
        if self.mode != REGRESSION or self.bin_edges is None:
            raise ModeMismatch("bin_index requires a regression store with bin edges")
        edges = self.bin_edges
        if len(edges) < 2:
            return 0
        idx = int(np.searchsorted(edges, target, side="right")) - 1
        return min(max(idx, 0), len(edges) - 2)

    # -- internals ----------------------------------------------------------

    def _materialize(self, row: int) -> Prototype:
        if self.mode == CLASSIFICATION:
            lg: np.ndarray | float = self.logits[row].copy()
        else:
            lg = float(self.logits[row])
        return Prototype(
            embedding=self.embed[row].copy(),
            logits=lg,
            variance=float(np.exp(self.logvar[row])),
            home_class=int(self.homes[row]),
            created_step=int(self.created[row]),
            id=int(self.ids[row]),
        )

    def _validate(self, proto: Prototype) -> None:
        emb = np.asarray(proto.embedding, dtype=np.float64)
        if emb.shape != (self.dim,):
            raise InvariantViolation(
                f"embedding shape {emb.shape} does not match dim {self.dim}"
            )
        if not np.all(np.isfinite(emb)):
            raise InvariantViolation("embedding has non-finite entries")
        if not (proto.variance > 0 and math.isfinite(proto.variance)):
            raise InvariantViolation(f"variance must be positive, got {proto.variance}")
        home = int(proto.home_class)
        if self.mode == CLASSIFICATION:
            if not 0 <= home < self.num_classes:
                raise InvariantViolation(f"home_class {home} outside 0..{self.num_classes - 1}")
            lg = np.asarray(proto.logits, dtype=np.float64)
            if lg.shape != (self.num_classes,):
                raise InvariantViolation(
                    f"logits shape {lg.shape} does not match {self.num_classes} classes"
                )
            if not np.all(np.isfinite(lg)):
                raise InvariantViolation("logits have non-finite entries")
            if lg[home] < 0 or np.any(np.delete(lg, home) > 0):
                raise InvariantViolation(
                    "logits break the sign constraints (home >= 0, others <= 0)"
                )
        else:
            if not np.isfinite(float(proto.logits)):
                raise InvariantViolation("regression logit must be finite")


def beta_logits(num_classes: int, home_class: int, beta: float) -> np.ndarray:
    """Initial logit pattern: +beta at the home class, -beta elsewhere."""
    lg = np.full(num_classes, -beta, dtype=np.float64)
    lg[home_class] = beta
    return lg


@dataclass
class TrainConfig:
    """Every knob of a training run.

    The boolean switches past ``seed`` exist to reproduce reference regimes
    (single-prototype reduction, frozen variances or encoder) and to opt into
    the pseudo-class creation path for regression stores.
    """

    alpha: float = 0.1
    rho: float = 1.0
    sigma0: float = 1.0
    beta: float = 1.0
    epsilon: float = 1e-3
    delta: int = 800
    m_per_epoch: int = 4
    rho_d: float = 1e-5
    p_max: int = 256
    warmup_steps: int = 100
    n_init: int = 8
    n_reg_bins: int = 10
    lambda_floor: float = 1e-3
    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 5
    seed: int = 0
    indicator_logits: bool = False
    train_variances: bool = True
    train_encoder: bool = True
    regression_creation: bool = False

    def validate(self) -> "TrainConfig":
        checks = [
            (self.alpha > 0, "alpha must be > 0"),
            (self.rho >= 0, "rho must be >= 0"),
            (self.sigma0 > 0, "sigma0 must be > 0"),
            (self.beta > 0, "beta must be > 0"),
            (self.epsilon > 0, "epsilon must be > 0"),
            (self.delta >= 1, "delta must be >= 1"),
            (self.m_per_epoch >= 1, "m_per_epoch must be >= 1"),
            (self.rho_d >= 0, "rho_d must be >= 0"),
            (self.p_max >= 1, "p_max must be >= 1"),
            (self.warmup_steps >= 0, "warmup_steps must be >= 0"),
            (self.n_init >= 1, "n_init must be >= 1"),
            (self.n_reg_bins >= 1, "n_reg_bins must be >= 1"),
            (self.lambda_floor > 0, "lambda_floor must be > 0"),
            (self.learning_rate > 0, "learning_rate must be > 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigInvalid(message)
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        return cls(**values).validate()
