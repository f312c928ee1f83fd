"""Exact-GP regression against dense-formula oracles and finite differences."""

import numpy as np
import pytest

from gpccopf import gp
from gpccopf.gp import (GpError, GpModel, KernelParams, fit, kernel,
                        kernel_matrix, nlml_and_grad, predict, predict_grad,
                        predict_var_grad)

from oracles import dense_gp_posterior, dense_nlml, fd_grad


def random_instance(seed, n=5, d=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    params = KernelParams(
        signal_var=float(rng.uniform(0.5, 2.0)),
        lengthscales=rng.uniform(0.5, 2.0, size=d),
        noise_var=float(rng.uniform(0.01, 0.1)))
    return X, y, params


# ---------------------------------------------------------------------------
# Kernel

def test_kernel_hand_values():
    p = KernelParams(2.0, np.array([1.0, 2.0]), 0.1)
    assert kernel([0, 0], [0, 0], p) == pytest.approx(2.0)
    # distance (1, 2) scaled by lengthscales is (1, 1): exp(-1)
    assert kernel([0, 0], [1, 2], p) == pytest.approx(2.0 * np.exp(-1.0))


def test_kernel_matrix_symmetric_psd():
    X, _, p = random_instance(0, n=20)
    K = kernel_matrix(X, X, p)
    assert np.allclose(K, K.T, atol=1e-14)
    w = np.linalg.eigvalsh(K)
    assert w.min() > -1e-10
    assert np.allclose(np.diag(K), p.signal_var)


# ---------------------------------------------------------------------------
# Posterior vs dense oracle

def test_posterior_matches_dense_oracle():
    for seed in range(10):
        X, y, p = random_instance(seed)
        rng = np.random.default_rng(100 + seed)
        xs = rng.normal(size=X.shape[1])
        K = kernel_matrix(X, X, p) + p.noise_var * np.eye(len(X))
        L = np.linalg.cholesky(K)
        model = GpModel(p, X, y, np.linalg.solve(K, y), 0.0, L)
        mean, var = predict(model, xs)
        m_ref, v_ref = dense_gp_posterior(X, y, xs, p.signal_var,
                                          p.lengthscales, p.noise_var)
        assert mean == pytest.approx(m_ref, abs=1e-10)
        assert var == pytest.approx(v_ref, abs=1e-10)


def test_nlml_matches_dense_oracle():
    for seed in range(5):
        X, y, p = random_instance(seed, n=8)
        nlml, _ = nlml_and_grad(X, y, p)
        ref = dense_nlml(X, y, p.signal_var, p.lengthscales, p.noise_var)
        assert nlml == pytest.approx(ref, abs=1e-10)


def test_nlml_gradient_finite_difference():
    for seed in range(20):
        X, y, p = random_instance(seed, n=6)
        v0 = p.to_log_vector()
        _, grad = nlml_and_grad(X, y, KernelParams.from_log_vector(v0))
        num = fd_grad(lambda v: nlml_and_grad(
            X, y, KernelParams.from_log_vector(v))[0], v0)
        denom = np.maximum(np.abs(num), 1.0)
        assert np.max(np.abs(grad - num) / denom) < 1e-4


# ---------------------------------------------------------------------------
# Fitting

def test_fit_recovers_smooth_function():
    rng = np.random.default_rng(3)
    X = rng.uniform(-2, 2, size=(60, 1))
    y = np.sin(2.0 * X[:, 0]) + rng.normal(0, 0.01, size=60)
    model = fit(X, y, restarts=2, seed=0, maxiter=150)
    xs = np.linspace(-1.5, 1.5, 20)[:, None]
    pred = np.array([predict(model, x)[0] for x in xs])
    assert np.max(np.abs(pred - np.sin(2.0 * xs[:, 0]))) < 0.05
    assert model.params.noise_var < 0.01


def test_fit_validates_restarts():
    with pytest.raises(GpError, match="restarts"):
        fit(np.zeros((3, 1)), np.zeros(3), restarts=0)


# ---------------------------------------------------------------------------
# Input-space derivatives

def fitted_model(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(30, 2))
    y = np.sin(X[:, 0]) * np.cos(X[:, 1])
    return fit(X, y, restarts=1, seed=0, maxiter=100)


def test_mean_gradient_finite_difference():
    model = fitted_model()
    for seed in range(5):
        xs = np.random.default_rng(seed).uniform(-0.8, 0.8, size=2)
        g = predict_grad(model, xs)
        num = fd_grad(lambda x: predict(model, x)[0], xs)
        assert np.max(np.abs(g - num)) < 1e-5


def test_mean_hessian_finite_difference():
    model = fitted_model()
    xs = np.array([0.2, -0.3])
    H = gp.gp_mean_hess(model, xs)
    assert np.allclose(H, H.T, atol=1e-12)
    for i in range(2):
        num = fd_grad(lambda x: predict_grad(model, x)[i], xs)
        assert np.max(np.abs(H[i] - num)) < 1e-5


def test_variance_gradient_finite_difference():
    model = fitted_model()
    for seed in range(5):
        xs = np.random.default_rng(10 + seed).uniform(-0.8, 0.8, size=2)
        g = predict_var_grad(model, xs)
        num = fd_grad(lambda x: predict(model, x)[1], xs)
        assert np.max(np.abs(g - num)) < 1e-5


# ---------------------------------------------------------------------------
# Batch path and persistence

def test_batch_matches_scalar_predict():
    model = fitted_model()
    Xq = np.random.default_rng(1).uniform(-1, 1, size=(50, 2))
    means, vars_ = gp.gp_predict_batch(model, Xq)
    for i, x in enumerate(Xq):
        m, v = predict(model, x)
        assert means[i] == pytest.approx(m, abs=1e-10)
        assert vars_[i] == pytest.approx(v, abs=1e-10)
    assert np.array_equal(gp.gp_mean_batch(model, Xq), means)


def test_exact_model_round_trip():
    model = fitted_model()
    again = gp.model_from_dict(model.to_dict(), X_train=model.X_train)
    xs = np.array([0.1, 0.4])
    assert predict(again, xs)[0] == pytest.approx(predict(model, xs)[0],
                                                  abs=1e-12)
    assert predict(again, xs)[1] == pytest.approx(predict(model, xs)[1],
                                                  abs=1e-10)
