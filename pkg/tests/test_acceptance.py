"""Acceptance suite: one test per exit criterion, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. Tolerances are pinned here and nowhere else.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from protofit.baselines import protonet_classify, protonet_fit, train_protonet
from protofit.core import (
    CLASSIFICATION,
    REGRESSION,
    EmbeddedExample,
    Prototype,
    PrototypeStore,
    TrainConfig,
    beta_logits,
)
from protofit.dataio import Dataset, generate_synthetic, load_checkpoint, save_checkpoint
from protofit.dynamics import ImportanceWindow, init_prototypes, maybe_create, prune
from protofit.encoder import Encoder
from protofit.inference import ImportanceRow, classify
from protofit.objective import (
    ENC_PREFIX,
    PROTO_EMBED,
    PROTO_LOG_SIGMA,
    PROTO_LOGITS,
    SHARED_LOG_SIGMA,
    backward,
    diversity_loss,
    forward_backward,
    task_loss,
)
from protofit.training import evaluate, history_lines, train

from conftest import max_rel_err, numerical_gradients, random_instance


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} {name}: FAIL")
        raise
    print(f"ACCEPTANCE {number} {name}: PASS")


# -- 1: gradient oracle ----------------------------------------------------------


def test_criterion_1_gradient_oracle():
    with criterion(1, "gradient-oracle"):
        started = time.monotonic()
        rng = np.random.default_rng(101)
        config = TrainConfig(rho_d=0.01).validate()
        for trial in range(50):
            mode = REGRESSION if trial % 3 == 2 else CLASSIFICATION
            kind = ("projection", "mlp", "frozen_table")[trial % 3]
            store, encoder, keys, labels, lam = random_instance(
                rng, mode=mode, encoder_kind=kind
            )
            analytic = backward(keys, labels, store, encoder, config, lam)

            def loss():
                lb = task_loss(keys, labels, store, encoder,
                               indicator_logits=config.indicator_logits)
                return lb.l0 + config.rho_d * diversity_loss(store, lam)

            arrays = {
                PROTO_EMBED: store.embed,
                PROTO_LOGITS: store.logits,
                PROTO_LOG_SIGMA: store.logvar,
            }
            for name, param in encoder.params.items():
                arrays[ENC_PREFIX + name] = param
            numeric = numerical_gradients(loss, arrays, h=1e-5)
            for name, num in numeric.items():
                err = max_rel_err(analytic.grads[name], num)
                assert err < 1e-4, f"trial {trial} {name}: rel err {err}"
            # the shared scale only feeds the stop-gradient threshold
            assert float(analytic.grads[SHARED_LOG_SIGMA]) == 0.0
        elapsed = time.monotonic() - started
        assert elapsed < 60.0, f"gradient oracle took {elapsed:.1f}s"


# -- 2: single-prototype reduction -------------------------------------------------


def test_criterion_2_protonet_equivalence():
    with criterion(2, "protonet-equivalence"):
        rng = np.random.default_rng(202)
        feats = rng.normal(size=(90, 5)) * 2
        labels = rng.integers(0, 3, size=90)
        labels[:3] = [0, 1, 2]
        ds = Dataset(CLASSIFICATION, 5, 3, np.arange(90, dtype=np.int64), feats, labels)
        enc = Encoder.frozen_table(ds.ids, ds.features)

        cfg = TrainConfig(n_init=10**6, sigma0=1.0 / math.sqrt(2.0)).validate()
        store = init_prototypes(ds, enc, cfg)
        reference = protonet_fit(ds, enc)
        np.testing.assert_allclose(store.embed, reference, atol=1e-12)

        for _ in range(1000):
            x = rng.normal(size=5) * 3
            ours = classify(x, store, indicator_logits=True).class_probs
            theirs = protonet_classify(x, reference)
            assert np.abs(ours - theirs).max() <= 1e-9


# -- 3: normalization and convexity --------------------------------------------------


def test_criterion_3_normalization_and_convexity():
    with criterion(3, "normalization-convexity"):
        rng = np.random.default_rng(303)
        checked = 0
        for _ in range(200):
            dim = int(rng.integers(2, 6))
            k = int(rng.integers(1, 9))
            num_classes = int(rng.integers(2, 5))
            store = PrototypeStore(CLASSIFICATION, dim=dim, num_classes=num_classes,
                                   capacity=16)
            for i in range(k):
                home = int(rng.integers(0, num_classes))
                store.add(Prototype(embedding=rng.normal(size=dim),
                                    logits=beta_logits(num_classes, home, 1.0),
                                    variance=float(rng.uniform(0.3, 3.0)),
                                    home_class=home))
            store.logits = rng.normal(size=(k, num_classes)) * 2
            q_rows = np.exp(store.logits - store.logits.max(axis=1, keepdims=True))
            q_rows /= q_rows.sum(axis=1, keepdims=True)
            for j in range(50):
                x = rng.normal(size=dim)
                if j % 5 == 0:
                    x = store.embed[0] + 1000.0 * _unit(rng, dim)  # ||x-p||^2 = 1e6
                pred = classify(x, store)
                z = pred.importance.weights
                assert abs(z.sum() - 1.0) <= 1e-9
                assert np.all(z >= 0.0) and np.all(z <= 1.0)
                probs = pred.class_probs
                assert abs(probs.sum() - 1.0) <= 1e-9
                assert np.all(probs >= -1e-15)
                # convexity: inside the hull of the per-prototype distributions
                assert np.all(probs <= q_rows.max(axis=0) + 1e-12)
                assert np.all(probs >= q_rows.min(axis=0) - 1e-12)
                checked += 1
        assert checked == 10_000


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


# -- 4: creation and pruning decision oracles ------------------------------------------


def test_criterion_4_creation_and_pruning_oracles():
    with criterion(4, "creation-pruning-oracles"):
        rng = np.random.default_rng(404)
        cfg = TrainConfig(warmup_steps=0, p_max=32, sigma0=1.0, beta=1.0).validate()
        for trial in range(6):
            lam = float(rng.uniform(1.0, 10.0))
            init = [(rng.normal(size=3), c) for c in (0, 1)]
            store = PrototypeStore(CLASSIFICATION, dim=3, num_classes=2, capacity=32)
            for emb, c in init:
                store.add(Prototype(embedding=emb, logits=beta_logits(2, c, 1.0),
                                    variance=1.0, home_class=c))
            # brute force recomputes every pairwise distance from scratch per step
            shadow = [(np.array(e), c) for e, c in init]
            for step in range(200):
                x = rng.normal(size=3) * rng.uniform(0.5, 4.0)
                label = int(rng.integers(0, 2))
                ex = EmbeddedExample(id=step, features=x, label=label)
                got = maybe_create(ex, store, cfg, step, lam).proto_id is not None

                same = [p for p, c in shadow if c == label]
                dmin = min((float(((x - p) ** 2).sum()) for p in same), default=math.inf)
                want = dmin > lam and len(shadow) < cfg.p_max
                assert got == want, f"creation diverged at step {step} (trial {trial})"
                if want:
                    shadow.append((x.copy(), label))

        for trial in range(6):
            n = int(rng.integers(3, 9))
            store = PrototypeStore(CLASSIFICATION, dim=2, num_classes=2, capacity=32)
            for i in range(n):
                home = int(rng.integers(0, 2))
                store.add(Prototype(embedding=rng.normal(size=2),
                                    logits=beta_logits(2, home, 1.0),
                                    variance=1.0, home_class=home))
            store.created[:] = rng.integers(-60, 10, size=n)
            delta = int(rng.integers(4, 16))
            pcfg = TrainConfig(epsilon=float(rng.uniform(1e-3, 0.15)), delta=delta).validate()
            window = ImportanceWindow(delta)
            step = 30
            for _ in range(int(rng.integers(1, delta + 4))):
                raw = rng.uniform(0, 1, size=n)
                window.record(ImportanceRow(example_id=0, step=step,
                                            ids=store.ids.copy(),
                                            weights=raw / raw.sum()))
                step += int(rng.integers(0, 2))

            # independent score recomputation from the raw retained rows
            now = window.current_step
            scores = {int(p): 0.0 for p in store.ids}
            for row in window.rows:
                w = (row.step - now + delta) / delta
                for pid, z in zip(row.ids, row.weights):
                    scores[int(pid)] += w * float(z)
            counts = {}
            for pid in store.ids:
                home = store.get(int(pid)).home_class
                counts[home] = counts.get(home, 0) + 1
            want_removed = []
            for pid in [int(p) for p in store.ids]:
                proto = store.get(pid)
                if scores[pid] / delta >= pcfg.epsilon:
                    continue
                if now - proto.created_step < delta / 2:
                    continue
                if counts[proto.home_class] <= 1:
                    continue
                counts[proto.home_class] -= 1
                want_removed.append(pid)

            got_removed = prune(store, window, pcfg)
            assert got_removed == want_removed, f"pruning diverged (trial {trial})"


# -- 5: multi-modal advantage ---------------------------------------------------------


def test_criterion_5_multimodal_advantage():
    with criterion(5, "multimodal-advantage"):
        started = time.monotonic()
        base = dict(alpha=math.exp(8.0), rho=0.0, warmup_steps=3, delta=64,
                    m_per_epoch=4, batch_size=32, max_epochs=5, learning_rate=0.05,
                    p_max=64)
        for seed in range(5):
            train_ds = generate_synthetic(2, 2, 10.0, 2, 400, seed=100 + seed, layout="xor")
            test_ds = generate_synthetic(2, 2, 10.0, 2, 400, seed=200 + seed, layout="xor")
            cfg = TrainConfig(**base, seed=seed).validate()

            ours = train(train_ds, cfg)
            metrics = evaluate(test_ds, ours.store, ours.encoder)
            assert metrics["accuracy"] >= 0.95, f"seed {seed}: {metrics['accuracy']}"
            assert len(ours.store) >= 4, f"seed {seed}: K={len(ours.store)}"

            baseline = train_protonet(train_ds, cfg)
            hits = sum(
                int(protonet_classify(test_ds.features[i], baseline.prototypes).argmax()
                    == test_ds.labels[i])
                for i in range(len(test_ds))
            )
            assert hits / len(test_ds) <= 0.6, f"seed {seed}: baseline {hits / len(test_ds)}"
        elapsed = time.monotonic() - started
        assert elapsed < 120.0, f"multimodal advantage took {elapsed:.1f}s"


# -- 6: adaptive capacity trend ---------------------------------------------------------


def test_criterion_6_adaptive_capacity_trend():
    with criterion(6, "adaptive-capacity"):
        base = dict(alpha=math.exp(2.5), rho=0.0, warmup_steps=3, delta=160,
                    m_per_epoch=2, batch_size=32, max_epochs=3, learning_rate=0.02,
                    p_max=128)
        monotone = 0
        for seed in range(5):
            sizes = []
            for n in (100, 400, 1600):
                # fixed 6-mode generator (3 classes x 2 modes), fresh draws per size
                ds = generate_synthetic(3, 2, 10.0, 4, n, seed=1000 + seed,
                                        layout="random", center_seed=55)
                cfg = TrainConfig(**base, seed=seed).validate()
                sizes.append(len(train(ds, cfg).store))
            if sizes[0] <= sizes[1] <= sizes[2]:
                monotone += 1
        assert monotone >= 4, f"capacity non-decreasing on only {monotone}/5 seeds"


# -- 7: per-step cost linear in K ----------------------------------------------------------


def test_criterion_7_linear_complexity():
    with criterion(7, "linear-step-cost"):
        rng = np.random.default_rng(707)
        dim = 16
        cfg = TrainConfig(rho_d=1e-5).validate()
        table = rng.normal(size=(32, dim))
        enc = Encoder.frozen_table(np.arange(32), table)
        labels = rng.integers(0, 2, size=32)

        def median_step_time(k):
            store = PrototypeStore(CLASSIFICATION, dim=dim, num_classes=2, capacity=512)
            for i in range(k):
                store.add(Prototype(embedding=rng.normal(size=dim),
                                    logits=beta_logits(2, i % 2, 1.0),
                                    variance=1.0, home_class=i % 2))
            forward_backward(np.arange(32), labels, store, enc, cfg, 1.0)  # warm-up
            times = []
            for _ in range(40):
                t0 = time.perf_counter()
                forward_backward(np.arange(32), labels, store, enc, cfg, 1.0)
                times.append(time.perf_counter() - t0)
            return float(np.median(times))

        t64 = median_step_time(64)
        t128 = median_step_time(128)
        assert t128 <= 2.5 * t64 + 1e-3, f"t64={t64:.6f}s t128={t128:.6f}s"


# -- 8: determinism and persistence -----------------------------------------------------------


def test_criterion_8_determinism_and_persistence(tmp_path):
    with criterion(8, "determinism-persistence"):
        ds = generate_synthetic(2, 2, 10.0, 2, 160, seed=31, layout="xor")
        cfg = TrainConfig(alpha=math.exp(8.0), rho=0.0, batch_size=32, max_epochs=4,
                          warmup_steps=2, delta=32, m_per_epoch=2,
                          learning_rate=0.05, seed=17).validate()

        path_a, path_b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        run_a = train(ds, cfg)
        path_a.write_text("\n".join(history_lines(run_a.history)) + "\n")
        run_b = train(ds, cfg)
        path_b.write_text("\n".join(history_lines(run_b.history)) + "\n")
        assert path_a.read_bytes() == path_b.read_bytes()

        first = train(ds, cfg, stop_after_epoch=1)
        mid = tmp_path / "mid.pfit"
        save_checkpoint(mid, first.checkpoint)
        rest = train(ds, cfg, resume=load_checkpoint(mid))
        stitched = history_lines(first.history)[1:] + history_lines(rest.history)[1:]
        assert stitched == history_lines(run_a.history)[1:]
        np.testing.assert_array_equal(rest.store.embed, run_a.store.embed)
        np.testing.assert_array_equal(rest.store.logits, run_a.store.logits)
        np.testing.assert_array_equal(rest.store.logvar, run_a.store.logvar)


# -- 9: pruning of outlier-born prototypes ---------------------------------------------------


def test_criterion_9_outliers_pruned_class_means_survive():
    with criterion(9, "outlier-pruning"):
        base = generate_synthetic(2, 1, 6.0, 2, 2043, seed=7)
        outlier_feats = np.array([[80.0 + 30.0 * i, 90.0] for i in range(5)])
        outlier_labels = np.array([i % 2 for i in range(5)], dtype=np.int64)
        feats = np.vstack([base.features, outlier_feats])
        labels = np.concatenate([base.labels, outlier_labels])
        ds = Dataset(CLASSIFICATION, 2, 2, np.arange(len(feats), dtype=np.int64),
                     feats, labels)
        outlier_ids = set(range(2043, 2048))

        cfg = TrainConfig(alpha=math.exp(8.0), rho=0.0, warmup_steps=2, delta=64,
                          m_per_epoch=4, batch_size=32, max_epochs=2,
                          learning_rate=0.02, p_max=64, seed=0).validate()
        # epsilon stays at its default
        assert cfg.epsilon == 1e-3
        result = train(ds, cfg)

        steps_per_epoch = math.ceil(len(ds) / cfg.batch_size)
        total_steps = cfg.max_epochs * steps_per_epoch
        created = {pid: (s, ex) for s, pid, ex in result.events["created"]}
        pruned = {pid: s for s, pid in result.events["pruned"]}

        spawned = {pid: s for pid, (s, ex) in created.items() if ex in outlier_ids}
        assert len(spawned) >= 5, "each outlier should spawn a prototype"

        # enough runway = newborn grace (delta/2) plus one prune-pass interval
        runway = cfg.delta // 2 + steps_per_epoch // cfg.m_per_epoch
        checked = 0
        for pid, born in spawned.items():
            if born > total_steps - runway:
                continue  # the run ends before this one is even prunable
            assert pid in pruned, f"outlier prototype {pid} was never pruned"
            assert pruned[pid] - born <= steps_per_epoch, (
                f"outlier prototype {pid} outlived an epoch: "
                f"born {born}, pruned {pruned[pid]}"
            )
            checked += 1
        assert checked >= 5

        # the initial class-mean prototypes survive the whole run
        assert result.store.has(0) and result.store.has(1)
