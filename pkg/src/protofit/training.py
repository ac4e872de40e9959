"""Training loop: creation, window recording, gradient steps and prune passes.

Per batch: recompute the creation threshold from the shared scale, run the
fused forward/backward, stream the batch through the creation gate, record
one importance row per example, apply Adam to the parameters that existed at
forward time, and re-project the logit constraints. Prune passes run at M
evenly spaced batch boundaries per epoch. Everything that consumes
randomness draws from one seeded generator, so identical config + seed +
dataset reproduce the history bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import CLASSIFICATION, EmbeddedExample, PrototypeStore, TrainConfig
from .dynamics import ImportanceWindow, compute_lambda, init_prototypes, maybe_create, prune
from .encoder import Encoder, batch_keys
from .errors import ConfigInvalid, DimensionMismatch
from .inference import ImportanceRow, batch_importance, class_distributions
from .objective import (
    ENC_PREFIX,
    PROTO_EMBED,
    PROTO_LOG_SIGMA,
    PROTO_LOGITS,
    SHARED_LOG_SIGMA,
    Adam,
    forward_backward,
    project_constraints,
)

@dataclass
class StepRecord:
    step: int
    loss: float
    l_div: float
    num_prototypes: int
    created: int
    pruned: int
    clamped: int


HISTORY_HEADER = "step\tloss\tl_div\tK\tcreated\tpruned\tclamped"


def history_lines(records: list[StepRecord]) -> list[str]:
    """Delimited text rows; float fields use repr so the text is bit-stable."""
    lines = [HISTORY_HEADER]
    for r in records:
        lines.append(
            f"{r.step}\t{r.loss!r}\t{r.l_div!r}\t{r.num_prototypes}\t"
            f"{r.created}\t{r.pruned}\t{r.clamped}"
        )
    return lines


@dataclass
class TrainResult:
    store: PrototypeStore
    encoder: Encoder
    shared_log_sigma: float
    history: list[StepRecord]
    diagnostics: dict[str, int]
    epochs_run: int
    early_stopped: bool
    best_metric: float | None
    checkpoint: "object" = None  # dataio.Checkpoint; typed loosely to avoid a cycle
    # lifecycle events of this call only (not restored on resume):
    # created -> (step, prototype id, triggering example id), pruned -> (step, id)
    events: dict[str, list[tuple]] = field(default_factory=dict)


def prune_marks(num_batches: int, m_per_epoch: int) -> set[int]:
    """Batch indices after which a prune pass runs: M evenly spaced per epoch."""
    marks = set()
    for j in range(num_batches):
        if ((j + 1) * m_per_epoch) // num_batches > (j * m_per_epoch) // num_batches:
            marks.add(j)
    return marks


def evaluate(dataset, store: PrototypeStore, encoder: Encoder, *, indicator_logits: bool = False) -> dict:
    """Deterministic metrics: accuracy or MSE, per-class accuracy, K, z entropy."""
    if dataset.dim != encoder.spec.input_dim:
        raise DimensionMismatch(
            f"dataset dim {dataset.dim} does not match encoder input {encoder.spec.input_dim}"
        )
    keys = dataset.ids if encoder.consumes_ids else dataset.features
    X, _ = encoder.encode_batch(keys)
    _, z = batch_importance(X, store)
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(z > 0, np.log(np.where(z > 0, z, 1.0)), 0.0)
    entropy = float(-(z * logs).sum(axis=1).mean())

    out = {
        "mode": store.mode,
        "count": len(dataset),
        "num_prototypes": len(store),
        "mean_importance_entropy": entropy,
    }
    if store.mode == CLASSIFICATION:
        q = class_distributions(store, indicator_logits=indicator_logits)
        probs = z @ q
        pred = probs.argmax(axis=1)
        y = dataset.labels.astype(np.int64)
        out["accuracy"] = float((pred == y).mean())
        per_class = {}
        for c in range(dataset.num_classes):
            sel = y == c
            per_class[c] = float((pred[sel] == c).mean()) if sel.any() else float("nan")
        out["per_class_accuracy"] = per_class
    else:
        yhat = z @ store.logits
        out["mse"] = float(((dataset.labels - yhat) ** 2).mean())
    return out


def train(
    dataset,
    config: TrainConfig,
    *,
    encoder: Encoder | None = None,
    val_dataset=None,
    resume=None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run the full fitting procedure and return the trained head.

    ``resume`` takes a checkpoint produced by a previous call and continues
    the run bit-exactly. ``stop_after_epoch`` ends the run after that epoch
    index completes (checkpointable mid-run stop).
    """
    from . import dataio  # deferred: dataio imports this module's neighbors

    config.validate()
    if len(dataset) == 0:
        raise ConfigInvalid("training dataset is empty")

    if resume is not None:
        if resume.config != config:
            raise ConfigInvalid("resume checkpoint was written under a different config")
        store = resume.store
        encoder = resume.encoder
        shared_log_sigma = np.array(resume.shared_log_sigma)
        opt = Adam(config.learning_rate)
        opt.restore(resume.optimizer_state)
        window = resume.window
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        step = resume.global_step
        start_epoch = resume.next_epoch
        best_metric = resume.best_metric
        diagnostics = dict(resume.diagnostics)
    else:
        if encoder is None:
            encoder = Encoder.frozen_table(dataset.ids, dataset.features)
        store = init_prototypes(dataset, encoder, config)
        shared_log_sigma = np.zeros(())  # shared scale starts at 1
        opt = Adam(config.learning_rate)
        window = ImportanceWindow(config.delta)
        rng = np.random.default_rng(config.seed)
        step = 0
        start_epoch = 0
        best_metric = None
        diagnostics = {
            "clamp_events": 0,
            "created": 0,
            "pruned": 0,
            "capacity_declined": 0,
        }

    n = len(dataset)
    bs = config.batch_size
    num_batches = math.ceil(n / bs)
    marks = prune_marks(num_batches, config.m_per_epoch)
    classification = store.mode == CLASSIFICATION

    history: list[StepRecord] = []
    events: dict[str, list[tuple]] = {"created": [], "pruned": []}
    early_stopped = False
    epochs_run = start_epoch

    for epoch in range(start_epoch, config.max_epochs):
        perm = rng.permutation(n)
        for j in range(num_batches):
            idx = perm[j * bs : (j + 1) * bs]
            keys = batch_keys(encoder, dataset, idx)
            labels = dataset.labels[idx]

            lam, clamped = compute_lambda(
                float(np.exp(shared_log_sigma)),
                config.rho,
                config.alpha,
                store.dim,
                config.lambda_floor,
            )
            if clamped:
                diagnostics["clamp_events"] += 1

            breakdown, cache = forward_backward(keys, labels, store, encoder, config, lam)

            created = 0
            for b_i, ds_i in enumerate(idx):
                example = EmbeddedExample(
                    id=int(dataset.ids[ds_i]),
                    features=cache.features[b_i],
                    label=labels[b_i] if not classification else int(labels[b_i]),
                )
                result = maybe_create(example, store, config, step, lam)
                if result.proto_id is not None:
                    created += 1
                    events["created"].append((step, result.proto_id, example.id))
                elif result.wanted:
                    diagnostics["capacity_declined"] += 1
            diagnostics["created"] += created

            for b_i, ds_i in enumerate(idx):
                window.record(
                    ImportanceRow(
                        example_id=int(dataset.ids[ds_i]),
                        step=step,
                        ids=cache.proto_ids,
                        weights=cache.z[b_i],
                    )
                )

            # Update only the prototypes that existed at forward time; they
            # occupy the leading rows because creation appends.
            k0 = len(cache.proto_ids)
            ids0 = cache.proto_ids
            opt.step_rows(PROTO_EMBED, ids0, store.embed[:k0], breakdown.grads[PROTO_EMBED])
            if not (classification and config.indicator_logits):  # indicators never train
                opt.step_rows(PROTO_LOGITS, ids0, store.logits[:k0], breakdown.grads[PROTO_LOGITS])
            if config.train_variances:
                opt.step_rows(
                    PROTO_LOG_SIGMA, ids0, store.logvar[:k0], breakdown.grads[PROTO_LOG_SIGMA]
                )
            opt.step_param(SHARED_LOG_SIGMA, shared_log_sigma, breakdown.grads[SHARED_LOG_SIGMA])
            if encoder.spec.trainable and config.train_encoder:
                for name, param in encoder.params.items():
                    opt.step_param(ENC_PREFIX + name, param, breakdown.grads[ENC_PREFIX + name])
            project_constraints(store)

            pruned = 0
            if j in marks and len(window) > 0:
                removed = prune(store, window, config)
                for pid in removed:
                    opt.drop_rows(pid)
                    events["pruned"].append((step, pid))
                pruned = len(removed)
                diagnostics["pruned"] += pruned

            history.append(
                StepRecord(
                    step=step,
                    loss=breakdown.total,
                    l_div=breakdown.l_div,
                    num_prototypes=len(store),
                    created=created,
                    pruned=pruned,
                    clamped=1 if clamped else 0,
                )
            )
            step += 1

        epochs_run = epoch + 1

        if val_dataset is not None:
            metrics = evaluate(val_dataset, store, encoder, indicator_logits=config.indicator_logits)
            metric = metrics["accuracy"] if classification else -metrics["mse"]
            # patience of one epoch: the first epoch without improvement stops the run
            if best_metric is not None and metric <= best_metric:
                early_stopped = True
            else:
                best_metric = metric
        if early_stopped or (stop_after_epoch is not None and epoch >= stop_after_epoch):
            next_epoch = epoch + 1
            break
    else:
        next_epoch = config.max_epochs

    checkpoint = dataio.Checkpoint(
        config=config,
        store=store,
        encoder=encoder,
        shared_log_sigma=float(shared_log_sigma),
        optimizer_state=opt.state(),
        window=window,
        next_epoch=next_epoch,
        global_step=step,
        rng_state=rng.bit_generator.state,
        best_metric=best_metric,
        diagnostics=dict(diagnostics),
    )
    return TrainResult(
        store=store,
        encoder=encoder,
        shared_log_sigma=float(shared_log_sigma),
        history=history,
        diagnostics=diagnostics,
        epochs_run=epochs_run,
        early_stopped=early_stopped,
        best_metric=best_metric,
        checkpoint=checkpoint,
        events=events,
    )
