"""Pluggable feature providers: frozen embedding tables and a small MLP.

Three kinds stand in for a large pretrained encoder at desk scale:

* ``frozen_table``          -- example id -> stored vector, no parameters.
* ``frozen_table_with_projection`` -- stored vector times a trainable affine map.
* ``mlp``                   -- raw input vector through tanh hidden layers and
                               a linear output layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigInvalid, ShapeMismatch, UnknownExample

FROZEN_TABLE = "frozen_table"
TABLE_PROJECTION = "frozen_table_with_projection"
MLP = "mlp"
KINDS = (FROZEN_TABLE, TABLE_PROJECTION, MLP)


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = ()
    trainable: bool = False


class Encoder:
    """Deterministic feature map; table kinds consume ids, mlp consumes vectors."""

    def __init__(
        self,
        spec: EncoderSpec,
        *,
        table: np.ndarray | None = None,
        table_ids: np.ndarray | None = None,
        params: dict[str, np.ndarray] | None = None,
        seed: int = 0,
    ):
        if spec.kind not in KINDS:
            raise ConfigInvalid(f"unknown encoder kind {spec.kind!r}")
        self.spec = spec
        self.table = None
        self._row_of: dict[int, int] = {}
        if spec.kind in (FROZEN_TABLE, TABLE_PROJECTION):
            if table is None or table_ids is None:
                raise ConfigInvalid("table kinds need table and table_ids")
            self.table = np.asarray(table, dtype=np.float64)
            ids = np.asarray(table_ids, dtype=np.int64)
            if self.table.ndim != 2 or self.table.shape[1] != spec.input_dim:
                raise ShapeMismatch(
                    f"table shape {self.table.shape} does not match input_dim {spec.input_dim}"
                )
            if len(ids) != self.table.shape[0]:
                raise ShapeMismatch("table_ids length does not match table rows")
            self.table_ids = ids
            self._row_of = {int(i): r for r, i in enumerate(ids)}
        if spec.kind == FROZEN_TABLE and spec.input_dim != spec.output_dim:
            raise ConfigInvalid("frozen_table passes vectors through; dims must match")

        self.params: dict[str, np.ndarray] = {}
        if params is not None:
            self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        elif spec.kind != FROZEN_TABLE:
            self.params = self._init_params(seed)
        self._check_param_shapes()

    # -- constructors --------------------------------------------------------

    @staticmethod
    def frozen_table(ids, vectors) -> "Encoder":
        vectors = np.asarray(vectors, dtype=np.float64)
        spec = EncoderSpec(FROZEN_TABLE, vectors.shape[1], vectors.shape[1])
        return Encoder(spec, table=vectors, table_ids=ids)

    @staticmethod
    def with_projection(ids, vectors, output_dim: int, *, seed: int = 0, trainable: bool = True) -> "Encoder":
        vectors = np.asarray(vectors, dtype=np.float64)
        spec = EncoderSpec(TABLE_PROJECTION, vectors.shape[1], output_dim, trainable=trainable)
        return Encoder(spec, table=vectors, table_ids=ids, seed=seed)

    @staticmethod
    def mlp(input_dim: int, hidden: tuple[int, ...], output_dim: int, *, seed: int = 0, trainable: bool = True) -> "Encoder":
        spec = EncoderSpec(MLP, input_dim, output_dim, hidden=tuple(hidden), trainable=trainable)
        return Encoder(spec, seed=seed)

    # -- encoding ------------------------------------------------------------

    @property
    def consumes_ids(self) -> bool:
        return self.spec.kind != MLP

    def encode_batch(self, keys) -> tuple[np.ndarray, dict]:
        """Map a batch of ids (table kinds) or raw rows (mlp) to features.

        Returns (features, cache); the cache feeds :meth:`backward`.
        """
        if self.consumes_ids:
            rows = self._rows_for(np.asarray(keys, dtype=np.int64))
            base = self.table[rows]
            if self.spec.kind == FROZEN_TABLE:
                return base.copy(), {}
            out = base @ self.params["proj_w"] + self.params["proj_b"]
            return out, {"inputs": base}
        X = np.asarray(keys, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise ShapeMismatch(
                f"mlp input shape {X.shape} does not match input_dim {self.spec.input_dim}"
            )
        acts = [X]
        h = X
        n_hidden = len(self.spec.hidden)
        for layer in range(n_hidden):
            h = np.tanh(h @ self.params[f"w{layer}"] + self.params[f"b{layer}"])
            acts.append(h)
        out = h @ self.params[f"w{n_hidden}"] + self.params[f"b{n_hidden}"]
        return out, {"acts": acts}

    def encode(self, key) -> np.ndarray:
        """Single-example convenience wrapper around :meth:`encode_batch`."""
        if self.consumes_ids:
            feats, _ = self.encode_batch(np.array([key], dtype=np.int64))
        else:
            feats, _ = self.encode_batch(np.asarray(key, dtype=np.float64)[None, :])
        return feats[0]

    def encode_frozen_for_init(self, keys) -> np.ndarray:
        """Encode for prototype initialization; never touches training state."""
        feats, _ = self.encode_batch(keys)
        return feats

    # -- gradients -----------------------------------------------------------

    def backward(self, cache: dict, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. encoder parameters given dL/d(features).

        Frozen encoders (kind without parameters, or trainable=False) return
        all-zero buffers so callers can treat the result uniformly.
        """
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        if not self.spec.trainable or self.spec.kind == FROZEN_TABLE:
            return grads
        if self.spec.kind == TABLE_PROJECTION:
            base = cache["inputs"]
            grads["proj_w"] = base.T @ grad_out
            grads["proj_b"] = grad_out.sum(axis=0)
            return grads
        acts = cache["acts"]
        n_hidden = len(self.spec.hidden)
        g = grad_out
        grads[f"w{n_hidden}"] = acts[-1].T @ g
        grads[f"b{n_hidden}"] = g.sum(axis=0)
        for layer in range(n_hidden - 1, -1, -1):
            g = (g @ self.params[f"w{layer + 1}"].T) * (1.0 - acts[layer + 1] ** 2)
            grads[f"w{layer}"] = acts[layer].T @ g
            grads[f"b{layer}"] = g.sum(axis=0)
        return grads

    # -- internals -----------------------------------------------------------

    def _rows_for(self, ids: np.ndarray) -> np.ndarray:
        rows = np.empty(len(ids), dtype=np.int64)
        for i, ex_id in enumerate(ids):
            row = self._row_of.get(int(ex_id))
            if row is None:
                raise UnknownExample(f"example id {int(ex_id)} not in embedding table")
            rows[i] = row
        return rows

    def _layer_dims(self) -> list[tuple[int, int]]:
        if self.spec.kind == TABLE_PROJECTION:
            return [(self.spec.input_dim, self.spec.output_dim)]
        dims = [self.spec.input_dim, *self.spec.hidden, self.spec.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        if self.spec.kind == TABLE_PROJECTION:
            fan_in = self.spec.input_dim
            bound = 1.0 / np.sqrt(fan_in)
            params["proj_w"] = rng.uniform(-bound, bound, (fan_in, self.spec.output_dim))
            params["proj_b"] = np.zeros(self.spec.output_dim)
            return params
        for layer, (fan_in, fan_out) in enumerate(self._layer_dims()):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"w{layer}"] = rng.uniform(-bound, bound, (fan_in, fan_out))
            params[f"b{layer}"] = np.zeros(fan_out)
        return params

    def _check_param_shapes(self) -> None:
        if self.spec.kind == FROZEN_TABLE:
            return
        if self.spec.kind == TABLE_PROJECTION:
            expected = {
                "proj_w": (self.spec.input_dim, self.spec.output_dim),
                "proj_b": (self.spec.output_dim,),
            }
        else:
            expected = {}
            for layer, (fan_in, fan_out) in enumerate(self._layer_dims()):
                expected[f"w{layer}"] = (fan_in, fan_out)
                expected[f"b{layer}"] = (fan_out,)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ShapeMismatch(f"encoder parameter {name} must have shape {shape}")


def batch_keys(encoder: Encoder, dataset, idx) -> np.ndarray:
    """Pick the encoder input view of a dataset slice (ids or raw features)."""
    if encoder.consumes_ids:
        return dataset.ids[idx]
    return dataset.features[idx]
