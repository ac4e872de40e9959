"""Dataset files, checkpoint persistence, config parsing and synthetic data.

Both on-disk formats are documented field by field in ``docs/formats.md``.
Datasets are newline-delimited decimal text behind a one-line header;
checkpoints are a versioned binary container (little-endian float64/int64
payloads) with a trailing SHA-256 checksum.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, fields

import numpy as np

from .core import CLASSIFICATION, REGRESSION, EmbeddedExample, PrototypeStore, TrainConfig
from .dynamics import ImportanceWindow
from .encoder import Encoder, EncoderSpec
from .errors import (
    ConfigInvalid,
    CorruptChecksum,
    DimensionMismatch,
    IoError,
    LabelOutOfRange,
    ParseError,
    VersionMismatch,
)
from .inference import ImportanceRow

DATASET_MAGIC = "protofit-dataset"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"PFITCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    """In-memory dataset: ids, feature rows and labels, all aligned."""

    mode: str
    dim: int
    num_classes: int | None
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def examples(self, encoder: Encoder | None = None) -> list[EmbeddedExample]:
        """Materialize per-example views, optionally through an encoder."""
        if encoder is None:
            feats = self.features
        else:
            keys = self.ids if encoder.consumes_ids else self.features
            feats, _ = encoder.encode_batch(keys)
        out = []
        for i in range(len(self)):
            label = int(self.labels[i]) if self.mode == CLASSIFICATION else float(self.labels[i])
            out.append(EmbeddedExample(id=int(self.ids[i]), features=feats[i], label=label))
        return out


def _validated(mode, dim, num_classes, ids, features, labels) -> Dataset:
    ids = np.asarray(ids, dtype=np.int64)
    features = np.asarray(features, dtype=np.float64).reshape(len(ids), dim)
    if not np.all(np.isfinite(features)):
        raise ParseError("features contain NaN or infinity")
    if len(np.unique(ids)) != len(ids):
        raise ParseError("duplicate example ids")
    if mode == CLASSIFICATION:
        labels = np.asarray(labels, dtype=np.int64)
        if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
            bad = int(labels[(labels < 0) | (labels >= num_classes)][0])
            raise LabelOutOfRange(f"label {bad} outside 0..{num_classes - 1}")
    else:
        labels = np.asarray(labels, dtype=np.float64)
        if not np.all(np.isfinite(labels)):
            raise ParseError("regression targets contain NaN or infinity")
    return Dataset(mode, dim, num_classes, ids, features, labels)


# -- dataset text format -------------------------------------------------------


def load_dataset(path) -> Dataset:
    """Parse a dataset file; errors carry the offending line or record id."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read dataset {path}: {exc}") from exc
    if not lines:
        raise ParseError(f"{path}: empty file, missing header")

    head = lines[0].split()
    if len(head) < 2 or head[0] != DATASET_MAGIC:
        raise ParseError(f"{path}:1: bad header magic")
    try:
        version = int(head[1])
    except ValueError:
        raise ParseError(f"{path}:1: bad header version") from None
    if version != DATASET_VERSION:
        raise ParseError(f"{path}:1: unsupported dataset version {version}")
    try:
        if head[2] == CLASSIFICATION and len(head) == 6:
            mode, dim, num_classes, count = CLASSIFICATION, int(head[3]), int(head[4]), int(head[5])
        elif head[2] == REGRESSION and len(head) == 5:
            mode, dim, num_classes, count = REGRESSION, int(head[3]), None, int(head[4])
        else:
            raise ValueError
    except (ValueError, IndexError):
        raise ParseError(f"{path}:1: malformed header {lines[0]!r}") from None
    if dim < 1 or count < 0 or (mode == CLASSIFICATION and num_classes < 1):
        raise ParseError(f"{path}:1: header values out of range")

    records = [ln for ln in lines[1:] if ln.strip()]
    if len(records) != count:
        raise ParseError(f"{path}: header promises {count} records, found {len(records)}")

    ids, feats, labels = [], [], []
    seen: set[int] = set()
    for lineno, line in enumerate(records, start=2):
        parts = line.split()
        try:
            ex_id = int(parts[0])
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{lineno}: bad record id") from None
        if ex_id in seen:
            raise ParseError(f"{path}:{lineno}: duplicate id {ex_id}")
        seen.add(ex_id)
        if len(parts) != dim + 2:
            raise DimensionMismatch(
                f"{path}:{lineno}: record {ex_id} has {len(parts) - 2} features, expected {dim}"
            )
        try:
            row = [float(v) for v in parts[1 : dim + 1]]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: unparseable feature value") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(f"{path}:{lineno}: record {ex_id} has non-finite features")
        try:
            label = int(parts[-1]) if mode == CLASSIFICATION else float(parts[-1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: unparseable label") from None
        if mode == CLASSIFICATION and not 0 <= label < num_classes:
            raise LabelOutOfRange(
                f"{path}:{lineno}: label {label} outside 0..{num_classes - 1}"
            )
        ids.append(ex_id)
        feats.append(row)
        labels.append(label)

    features = np.array(feats, dtype=np.float64).reshape(len(ids), dim)
    return _validated(mode, dim, num_classes, np.array(ids, dtype=np.int64), features, labels)


def save_dataset(path, dataset: Dataset) -> None:
    lines = []
    if dataset.mode == CLASSIFICATION:
        lines.append(
            f"{DATASET_MAGIC} {DATASET_VERSION} {CLASSIFICATION} "
            f"{dataset.dim} {dataset.num_classes} {len(dataset)}"
        )
    else:
        lines.append(
            f"{DATASET_MAGIC} {DATASET_VERSION} {REGRESSION} {dataset.dim} {len(dataset)}"
        )
    for i in range(len(dataset)):
        feats = " ".join(repr(float(v)) for v in dataset.features[i])
        if dataset.mode == CLASSIFICATION:
            label = str(int(dataset.labels[i]))
        else:
            label = repr(float(dataset.labels[i]))
        lines.append(f"{int(dataset.ids[i])} {feats} {label}")
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset {path}: {exc}") from exc


# -- synthetic blobs -----------------------------------------------------------


def generate_synthetic(
    classes: int,
    modes_per_class: int,
    separation: float,
    dim: int,
    count: int,
    seed: int,
    *,
    blob_std: float = 1.0,
    layout: str = "random",
    center_seed: int | None = None,
) -> Dataset:
    """Isotropic Gaussian blobs at seeded centers, one label per class.

    ``layout="random"`` draws the mode centers from the seeded generator and
    rescales them so the minimum pairwise center distance equals
    ``separation``. ``layout="xor"`` places 2 classes x 2 modes on the
    corners of an axis-aligned square of side ``separation`` with classes on
    opposite diagonals. Samples interleave classes and modes round-robin.
    ``center_seed`` pins the mode layout independently of the sample draw,
    so one fixed generator can be resampled at different sizes.
    """
    if classes < 1 or modes_per_class < 1 or dim < 1 or count < 1:
        raise ConfigInvalid("classes, modes_per_class, dim and count must be >= 1")
    if separation < 0 or blob_std <= 0:
        raise ConfigInvalid("separation must be >= 0 and blob_std > 0")
    rng = np.random.default_rng(seed)
    center_rng = rng if center_seed is None else np.random.default_rng(center_seed)
    total_modes = classes * modes_per_class

    if layout == "xor":
        if classes != 2 or modes_per_class != 2 or dim < 2:
            raise ConfigInvalid("xor layout needs 2 classes, 2 modes per class, dim >= 2")
        centers = np.zeros((4, dim))
        s = separation
        centers[0, :2] = (0.0, 0.0)  # class 0
        centers[1, :2] = (s, s)  # class 0
        centers[2, :2] = (0.0, s)  # class 1
        centers[3, :2] = (s, 0.0)  # class 1
        center_class = np.array([0, 0, 1, 1])
    elif layout == "random":
        centers = center_rng.normal(size=(total_modes, dim))
        if total_modes > 1:
            diff = centers[:, None, :] - centers[None, :, :]
            dists = np.sqrt((diff**2).sum(-1))
            np.fill_diagonal(dists, np.inf)
            # rescale so the closest pair of centers sits exactly at `separation`
            centers *= separation / dists.min()
        center_class = np.repeat(np.arange(classes), modes_per_class)
    else:
        raise ConfigInvalid(f"unknown layout {layout!r}")

    by_class = [np.flatnonzero(center_class == c) for c in range(classes)]
    features = np.empty((count, dim))
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        c = i % classes
        mode_idx = by_class[c][(i // classes) % modes_per_class]
        features[i] = centers[mode_idx] + blob_std * rng.normal(size=dim)
        labels[i] = c
    ids = np.arange(count, dtype=np.int64)
    return _validated(CLASSIFICATION, dim, classes, ids, features, labels)


# -- config files ---------------------------------------------------------------


def parse_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` text; '#' starts a comment, blank lines ignored."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    values: dict[str, str] = {}
    for lineno, line in enumerate(raw, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ParseError(f"{path}:{lineno}: expected key = value")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ParseError(f"{path}:{lineno}: expected key = value")
        if key in values:
            raise ParseError(f"{path}:{lineno}: duplicate key {key}")
        values[key] = value
    return values


def config_from_strings(values: dict[str, str]) -> TrainConfig:
    """Coerce raw string settings onto TrainConfig with typed validation."""
    typed: dict[str, object] = {}
    by_name = {f.name: f for f in fields(TrainConfig)}
    for key, raw in values.items():
        if key not in by_name:
            raise ConfigInvalid(f"unknown config key {key!r}")
        target = by_name[key].type
        try:
            if target == "int":
                typed[key] = int(raw)
            elif target == "float":
                typed[key] = float(raw)
            elif target == "bool":
                if raw.lower() in ("true", "1", "yes"):
                    typed[key] = True
                elif raw.lower() in ("false", "0", "no"):
                    typed[key] = False
                else:
                    raise ValueError(raw)
            else:
                typed[key] = raw
        except ValueError:
            raise ConfigInvalid(f"config key {key}: cannot parse {raw!r}") from None
    return TrainConfig.from_dict(typed)


# -- checkpoints -----------------------------------------------------------------


@dataclass
class Checkpoint:
    """Everything needed to continue a run bit-exactly from a save point."""

    config: TrainConfig
    store: PrototypeStore
    encoder: Encoder
    shared_log_sigma: float
    optimizer_state: dict
    window: ImportanceWindow
    next_epoch: int
    global_step: int
    rng_state: dict
    best_metric: float | None
    diagnostics: dict


def _array_entries(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    store = ckpt.store
    entries = [
        ("store.embed", store.embed),
        ("store.logvar", store.logvar),
        ("store.logits", store.logits),
        ("store.ids", store.ids),
        ("store.homes", store.homes),
        ("store.created", store.created),
    ]
    if store.bin_edges is not None:
        entries.append(("store.bin_edges", store.bin_edges))
    if ckpt.encoder.table is not None:
        entries.append(("encoder.table", ckpt.encoder.table))
        entries.append(("encoder.table_ids", ckpt.encoder.table_ids))
    for name in sorted(ckpt.encoder.params):
        entries.append((f"encoder.param.{name}", ckpt.encoder.params[name]))

    opt = ckpt.optimizer_state
    for name in sorted(opt["dense"]):
        slot = opt["dense"][name]
        entries.append((f"opt.dense.{name}.m", np.asarray(slot["m"], dtype=np.float64)))
        entries.append((f"opt.dense.{name}.v", np.asarray(slot["v"], dtype=np.float64)))
    for name in sorted(opt["rows"]):
        slots = opt["rows"][name]
        pids = np.array(sorted(slots), dtype=np.int64)
        if len(pids):
            m = np.stack([slots[int(p)][0] for p in pids])
            v = np.stack([slots[int(p)][1] for p in pids])
            t = np.array([slots[int(p)][2] for p in pids], dtype=np.int64)
        else:
            m = np.zeros((0, 1))
            v = np.zeros((0, 1))
            t = np.zeros(0, dtype=np.int64)
        entries.append((f"opt.rows.{name}.ids", pids))
        entries.append((f"opt.rows.{name}.m", m))
        entries.append((f"opt.rows.{name}.v", v))
        entries.append((f"opt.rows.{name}.t", t))

    rows = list(ckpt.window.rows)
    entries.append(("window.example_ids", np.array([r.example_id for r in rows], dtype=np.int64)))
    entries.append(("window.steps", np.array([r.step for r in rows], dtype=np.int64)))
    offsets = np.zeros(len(rows) + 1, dtype=np.int64)
    for i, r in enumerate(rows):
        offsets[i + 1] = offsets[i] + len(r.ids)
    entries.append(("window.offsets", offsets))
    if rows:
        entries.append(("window.proto_ids", np.concatenate([r.ids for r in rows])))
        entries.append(("window.weights", np.concatenate([r.weights for r in rows])))
    else:
        entries.append(("window.proto_ids", np.zeros(0, dtype=np.int64)))
        entries.append(("window.weights", np.zeros(0)))
    return entries


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the versioned binary container with a trailing SHA-256 checksum."""
    # note: ascontiguousarray would promote 0-d moment buffers to 1-d
    entries = [
        (name, arr if arr.ndim == 0 else np.ascontiguousarray(arr))
        for name, arr in _array_entries(ckpt)
    ]
    header = {
        "config": ckpt.config.to_dict(),
        "store": {
            "mode": ckpt.store.mode,
            "dim": ckpt.store.dim,
            "num_classes": ckpt.store.num_classes,
            "capacity": ckpt.store.capacity,
            "next_id": ckpt.store.next_id,
            "has_bin_edges": ckpt.store.bin_edges is not None,
        },
        "encoder": {
            "kind": ckpt.encoder.spec.kind,
            "input_dim": ckpt.encoder.spec.input_dim,
            "output_dim": ckpt.encoder.spec.output_dim,
            "hidden": list(ckpt.encoder.spec.hidden),
            "trainable": ckpt.encoder.spec.trainable,
            "has_table": ckpt.encoder.table is not None,
        },
        "opt": {
            "lr": ckpt.optimizer_state["lr"],
            "dense_t": {name: ckpt.optimizer_state["dense"][name]["t"]
                        for name in sorted(ckpt.optimizer_state["dense"])},
            "row_names": sorted(ckpt.optimizer_state["rows"]),
        },
        "progress": {
            "shared_log_sigma": ckpt.shared_log_sigma,
            "next_epoch": ckpt.next_epoch,
            "global_step": ckpt.global_step,
            "window_capacity": ckpt.window.capacity,
            "window_current_step": ckpt.window.current_step,
            "best_metric": ckpt.best_metric,
            "diagnostics": ckpt.diagnostics,
        },
        "rng": ckpt.rng_state,
        "arrays": [[name, str(arr.dtype), list(arr.shape)] for name, arr in entries],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<Q", len(header_bytes))
    blob += header_bytes
    for _, arr in entries:
        blob += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    digest = hashlib.sha256(bytes(blob)).digest()
    blob += digest
    try:
        with open(path, "wb") as fh:
            fh.write(bytes(blob))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    """Read, verify and rebuild a checkpoint saved by :func:`save_checkpoint`."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(CHECKPOINT_MAGIC) + 4 + 8 + 32:
        raise CorruptChecksum(f"{path}: truncated checkpoint")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptChecksum(f"{path}: bad magic, not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptChecksum(f"{path}: checksum mismatch")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: file version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", body, pos)
    pos += 8
    header = json.loads(body[pos : pos + header_len].decode("utf-8"))
    pos += header_len

    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape in header["arrays"]:
        dt = np.dtype(dtype)
        n_bytes = dt.itemsize * int(np.prod(shape)) if shape else dt.itemsize
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype=dt, count=n_items, offset=pos).reshape(shape)
        arrays[name] = arr.copy()
        pos += n_bytes

    config = TrainConfig.from_dict(header["config"])

    st = header["store"]
    store = PrototypeStore(
        st["mode"],
        dim=st["dim"],
        num_classes=st["num_classes"],
        bin_edges=arrays.get("store.bin_edges"),
        capacity=st["capacity"],
    )
    store.embed = arrays["store.embed"]
    store.logvar = arrays["store.logvar"]
    store.logits = arrays["store.logits"]
    store.ids = arrays["store.ids"]
    store.homes = arrays["store.homes"]
    store.created = arrays["store.created"]
    store.next_id = st["next_id"]
    store._row_of = {int(pid): r for r, pid in enumerate(store.ids)}
    store._by_class = {}
    for pid, home in zip(store.ids, store.homes):
        store._by_class.setdefault(int(home), []).append(int(pid))

    enc = header["encoder"]
    spec = EncoderSpec(
        kind=enc["kind"],
        input_dim=enc["input_dim"],
        output_dim=enc["output_dim"],
        hidden=tuple(enc["hidden"]),
        trainable=enc["trainable"],
    )
    params = {
        name[len("encoder.param."):]: arr
        for name, arr in arrays.items()
        if name.startswith("encoder.param.")
    }
    encoder = Encoder(
        spec,
        table=arrays.get("encoder.table"),
        table_ids=arrays.get("encoder.table_ids"),
        params=params or None,
    )

    opt_state: dict = {"lr": header["opt"]["lr"], "dense": {}, "rows": {}}
    for name, t in header["opt"]["dense_t"].items():
        opt_state["dense"][name] = {
            "m": arrays[f"opt.dense.{name}.m"],
            "v": arrays[f"opt.dense.{name}.v"],
            "t": int(t),
        }
    for name in header["opt"]["row_names"]:
        pids = arrays[f"opt.rows.{name}.ids"]
        m = arrays[f"opt.rows.{name}.m"]
        v = arrays[f"opt.rows.{name}.v"]
        t = arrays[f"opt.rows.{name}.t"]
        opt_state["rows"][name] = {
            int(pid): [m[i], v[i], int(t[i])] for i, pid in enumerate(pids)
        }

    progress = header["progress"]
    window = ImportanceWindow(progress["window_capacity"])
    window.current_step = progress["window_current_step"]
    offsets = arrays["window.offsets"]
    proto_ids = arrays["window.proto_ids"]
    weights = arrays["window.weights"]
    for i in range(len(arrays["window.steps"])):
        lo, hi = offsets[i], offsets[i + 1]
        window.rows.append(
            ImportanceRow(
                example_id=int(arrays["window.example_ids"][i]),
                step=int(arrays["window.steps"][i]),
                ids=proto_ids[lo:hi],
                weights=weights[lo:hi],
            )
        )

    return Checkpoint(
        config=config,
        store=store,
        encoder=encoder,
        shared_log_sigma=progress["shared_log_sigma"],
        optimizer_state=opt_state,
        window=window,
        next_epoch=progress["next_epoch"],
        global_step=progress["global_step"],
        rng_state=header["rng"],
        best_metric=progress["best_metric"],
        diagnostics=progress["diagnostics"],
    )
