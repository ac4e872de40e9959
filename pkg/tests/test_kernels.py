"""The numba path and the numpy fallback must agree on every kernel."""

import numpy as np
import pytest

from protofit import kernels

pytestmark = pytest.mark.skipif(
    kernels.BACKEND != "numba", reason="numba backend not active; nothing to compare"
)


@pytest.mark.parametrize("b,k,d", [(1, 1, 2), (7, 5, 3), (32, 64, 16)])
def test_sq_dists_agree(rng, b, k, d):
    X = rng.normal(size=(b, d))
    P = rng.normal(size=(k, d))
    np.testing.assert_allclose(
        kernels.sq_dists_numba(X, P), kernels.sq_dists_np(X, P), rtol=1e-12, atol=1e-12
    )


@pytest.mark.parametrize("b,k,d", [(1, 1, 2), (7, 5, 3), (32, 64, 16)])
def test_gaussian_importance_agree(rng, b, k, d):
    X = rng.normal(size=(b, d)) * 3
    P = rng.normal(size=(k, d))
    sigma = rng.uniform(0.4, 2.5, size=k)
    d2_nb, z_nb = kernels.gaussian_importance_numba(X, P, sigma)
    d2_np, z_np = kernels.gaussian_importance_np(X, P, sigma)
    np.testing.assert_allclose(d2_nb, d2_np, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(z_nb, z_np, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(z_nb.sum(axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("b,k,d", [(1, 1, 2), (7, 5, 3), (32, 64, 16)])
def test_backprop_importance_agree(rng, b, k, d):
    X = rng.normal(size=(b, d))
    P = rng.normal(size=(k, d))
    sigma = rng.uniform(0.4, 2.5, size=k)
    d2 = kernels.sq_dists_np(X, P)
    t = rng.normal(size=(b, k))
    out_nb = kernels.backprop_importance_numba(X, P, sigma, d2, t)
    out_np = kernels.backprop_importance_np(X, P, sigma, d2, t)
    for a, b_ in zip(out_nb, out_np):
        np.testing.assert_allclose(a, b_, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("k,d,lam", [(1, 2, 1.0), (2, 2, 0.5), (12, 4, 2.0)])
def test_pairwise_hinge_agree(rng, k, d, lam):
    P = rng.normal(size=(k, d))
    v_nb, g_nb = kernels.pairwise_hinge_numba(P, lam)
    v_np, g_np = kernels.pairwise_hinge_np(P, lam)
    assert v_nb == pytest.approx(v_np, rel=1e-12, abs=1e-15)
    np.testing.assert_allclose(g_nb, g_np, rtol=1e-10, atol=1e-12)


def test_pairwise_hinge_coincident_prototypes():
    P = np.zeros((2, 3))
    for impl in (kernels.pairwise_hinge_numba, kernels.pairwise_hinge_np):
        value, grad = impl(P, 1.0)
        assert value == pytest.approx(1.0)
        np.testing.assert_array_equal(grad, 0.0)


def test_pairwise_hinge_boundary_inactive():
    P = np.array([[0.0, 0.0], [1.0, 0.0]])
    for impl in (kernels.pairwise_hinge_numba, kernels.pairwise_hinge_np):
        value, grad = impl(P, 1.0)
        assert value == 0.0
        np.testing.assert_array_equal(grad, 0.0)
