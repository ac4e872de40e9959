"""Time the numba kernels against the pure-numpy fallback.

Usage:
    python benchmarks/bench_kernels.py [--reps 200]

The per-kernel table calls both implementations directly. The end-to-end
training-step row uses whichever backend is active for the process; rerun
with PROTOFIT_BACKEND=numpy to time the fallback there.
"""

import argparse
import math
import time

import numpy as np

from protofit import kernels
from protofit.core import CLASSIFICATION, Prototype, PrototypeStore, TrainConfig, beta_logits
from protofit.encoder import Encoder
from protofit.objective import forward_backward

SHAPES = [(32, 8, 16), (32, 64, 32), (32, 256, 64), (128, 256, 64)]


def best_of(fn, reps):
    fn()  # warm-up (and jit compile)
    best = math.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(reps):
    have_numba = kernels.BACKEND == "numba"
    print(f"active backend: {kernels.BACKEND}")
    header = f"{'kernel':<22}{'B':>5}{'K':>5}{'D':>5}{'numpy':>12}"
    if have_numba:
        header += f"{'numba':>12}{'speedup':>9}"
    print(header)
    rng = np.random.default_rng(0)
    for b, k, d in SHAPES:
        X = rng.normal(size=(b, d))
        P = rng.normal(size=(k, d))
        sigma = rng.uniform(0.5, 2.0, size=k)
        d2 = kernels.sq_dists_np(X, P)
        t = rng.normal(size=(b, k))
        cases = [
            ("gaussian_importance", lambda: kernels.gaussian_importance_np(X, P, sigma),
             (lambda: kernels.gaussian_importance_numba(X, P, sigma)) if have_numba else None),
            ("backprop_importance", lambda: kernels.backprop_importance_np(X, P, sigma, d2, t),
             (lambda: kernels.backprop_importance_numba(X, P, sigma, d2, t)) if have_numba else None),
            ("pairwise_hinge", lambda: kernels.pairwise_hinge_np(P, 1.0),
             (lambda: kernels.pairwise_hinge_numba(P, 1.0)) if have_numba else None),
        ]
        for name, np_fn, nb_fn in cases:
            t_np = best_of(np_fn, reps)
            line = f"{name:<22}{b:>5}{k:>5}{d:>5}{t_np * 1e6:>10.1f}us"
            if nb_fn is not None:
                t_nb = best_of(nb_fn, reps)
                line += f"{t_nb * 1e6:>10.1f}us{t_np / t_nb:>8.1f}x"
            print(line)


def bench_train_step(reps):
    rng = np.random.default_rng(1)
    dim, k, batch = 32, 128, 32
    store = PrototypeStore(CLASSIFICATION, dim=dim, num_classes=2, capacity=256)
    for i in range(k):
        store.add(Prototype(embedding=rng.normal(size=dim),
                            logits=beta_logits(2, i % 2, 1.0),
                            variance=1.0, home_class=i % 2))
    enc = Encoder.frozen_table(np.arange(batch), rng.normal(size=(batch, dim)))
    labels = rng.integers(0, 2, size=batch)
    cfg = TrainConfig(rho_d=1e-5).validate()
    t = best_of(lambda: forward_backward(np.arange(batch), labels, store, enc, cfg, 1.0), reps)
    print(f"\nforward+backward step (B={batch}, K={k}, D={dim}, {kernels.BACKEND}): "
          f"{t * 1e6:.1f}us")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--reps", type=int, default=200)
    args = parser.parse_args()
    bench_kernels(args.reps)
    bench_train_step(args.reps)


if __name__ == "__main__":
    main()
