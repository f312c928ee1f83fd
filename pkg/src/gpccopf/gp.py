"""Gaussian-process regression with an ARD squared-exponential kernel.

Two model classes share one predictive core:

* ``GpModel`` -- exact GP, trained by minimizing the negative log marginal
  likelihood (NLML) in log-hyperparameter space with L-BFGS-B restarts.
* ``SparseGpModel`` -- variational inducing-point GP; the evidence lower
  bound (ELBO) is maximized jointly over log-hyperparameters and the
  inducing inputs Z.  All ELBO algebra is kept in low-rank (m x m / m x n)
  form so cost stays O(n m^2).

Both predict a latent (noise-free) mean and variance, and expose analytic
first and second derivatives of the posterior mean plus the gradient of the
posterior variance; the dispatch optimizer consumes all of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize

LOG_BOUND = 10.0            # box for log-hyperparameters
NOISE_FLOOR = 1e-8          # lower bound on the noise variance
JITTER_LADDER = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
PENALTY_NLML = 1e12         # soft reject for non-factorizable proposals


class GpError(Exception):
    pass


@dataclass
class KernelParams:
    signal_var: float
    lengthscales: np.ndarray
    noise_var: float

    def to_log_vector(self) -> np.ndarray:
        return np.concatenate([[np.log(self.signal_var)],
                               np.log(self.lengthscales),
                               [np.log(self.noise_var)]])

    @classmethod
    def from_log_vector(cls, v: np.ndarray) -> "KernelParams":
        return cls(float(np.exp(v[0])), np.exp(v[1:-1]), float(np.exp(v[-1])))


def kernel(x, xp, params: KernelParams) -> float:
    """ARD-RBF covariance between two points."""
    d = (np.asarray(x) - np.asarray(xp)) / params.lengthscales
    return params.signal_var * float(np.exp(-0.5 * np.dot(d, d)))


def kernel_matrix(X1: np.ndarray, X2: np.ndarray,
                  params: KernelParams) -> np.ndarray:
    A = X1 / params.lengthscales
    B = X2 / params.lengthscales
    sq = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :]
          - 2.0 * A @ B.T)
    return params.signal_var * np.exp(-0.5 * np.maximum(sq, 0.0))


def _chol_with_jitter(K: np.ndarray):
    """Lower Cholesky factor of K, climbing the fixed jitter ladder."""
    tried = []
    scale = np.mean(np.diag(K))
    for jit in (0.0,) + JITTER_LADDER:
        try:
            return cholesky(K + jit * scale * np.eye(K.shape[0]), lower=True), jit
        except np.linalg.LinAlgError:
            tried.append(jit)
    raise GpError(f"Cholesky failed after jitter ladder {tried}")


# ---------------------------------------------------------------------------
# Exact GP

def nlml_and_grad(X: np.ndarray, y: np.ndarray, params: KernelParams):
    """Negative log marginal likelihood and gradient w.r.t. log-params.

    Parameter order: [log signal_var, log lengthscale_1..D, log noise_var].
    """
    n, D = X.shape
    Kf = kernel_matrix(X, X, params)
    K = Kf + params.noise_var * np.eye(n)
    L, _ = _chol_with_jitter(K)
    alpha = cho_solve((L, True), y)
    nlml = (0.5 * float(y @ alpha) + float(np.sum(np.log(np.diag(L))))
            + 0.5 * n * np.log(2.0 * np.pi))

    Kinv = cho_solve((L, True), np.eye(n))
    W = np.outer(alpha, alpha) - Kinv           # dLML/dK = 0.5 * W

    grad = np.empty(D + 2)
    grad[0] = -0.5 * float(np.sum(W * Kf))
    scaled = X / params.lengthscales
    for d in range(D):
        sq_d = (scaled[:, d][:, None] - scaled[:, d][None, :]) ** 2
        grad[1 + d] = -0.5 * float(np.sum(W * Kf * sq_d))
    grad[-1] = -0.5 * params.noise_var * float(np.trace(W))
    return nlml, grad


def _init_params(X, y, rng, perturb: bool) -> KernelParams:
    n, D = X.shape
    sv = max(float(np.var(y)), 1e-4)
    ls = np.maximum(np.std(X, axis=0), 1e-2) * np.sqrt(D)
    nv = max(0.01 * sv, 10 * NOISE_FLOOR)
    p = KernelParams(sv, ls, nv)
    if perturb:
        v = p.to_log_vector() + rng.normal(0.0, 1.0, size=D + 2)
        p = KernelParams.from_log_vector(np.clip(v, -LOG_BOUND, LOG_BOUND))
    return p


@dataclass
class GpModel:
    params: KernelParams
    X_train: np.ndarray
    y_train: np.ndarray
    alpha: np.ndarray           # (K + noise I)^-1 y
    nlml: float
    _chol: np.ndarray | None = None

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            K = (kernel_matrix(self.X_train, self.X_train, self.params)
                 + self.params.noise_var * np.eye(len(self.X_train)))
            self._chol, _ = _chol_with_jitter(K)
        return self._chol

    # persistence keeps only what cannot be rebuilt
    def to_dict(self) -> dict:
        return {"kind": "exact",
                "log_params": self.params.to_log_vector().tolist(),
                "alpha": self.alpha.tolist(),
                "nlml": self.nlml}

    @classmethod
    def from_dict(cls, d: dict, X_train: np.ndarray) -> "GpModel":
        params = KernelParams.from_log_vector(np.array(d["log_params"]))
        y = None
        alpha = np.array(d["alpha"])
        return cls(params, X_train, y, alpha, d["nlml"])


def fit(X: np.ndarray, y: np.ndarray, restarts: int = 5, seed: int = 0,
        maxiter: int = 200) -> GpModel:
    """Multi-start quasi-Newton NLML minimization in log-space."""
    if restarts < 1:
        raise GpError("restarts must be >= 1")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, D = X.shape
    bounds = [(-LOG_BOUND, LOG_BOUND)] * (D + 2)
    bounds[-1] = (np.log(NOISE_FLOOR), LOG_BOUND)

    def objective(v):
        # a failed factorization (pathological line-search proposal) is a
        # soft reject: huge value, zero gradient, and L-BFGS-B backtracks
        try:
            return nlml_and_grad(X, y, KernelParams.from_log_vector(v))
        except GpError:
            return PENALTY_NLML, np.zeros(D + 2)

    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        p0 = _init_params(X, y, rng, perturb=(r > 0))
        v0 = np.clip(p0.to_log_vector(), bounds[0][0], LOG_BOUND)
        v0[-1] = max(v0[-1], np.log(NOISE_FLOOR))
        res = minimize(objective, v0, jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": maxiter})
        if (np.isfinite(res.fun) and res.fun < PENALTY_NLML
                and (best is None or res.fun < best.fun)):
            best = res
    if best is None:
        raise GpError("all restarts produced non-finite NLML")

    params = KernelParams.from_log_vector(best.x)
    K = kernel_matrix(X, X, params) + params.noise_var * np.eye(n)
    L, _ = _chol_with_jitter(K)
    alpha = cho_solve((L, True), y)
    return GpModel(params, X, y, alpha, float(best.fun), L)


def predict(model: GpModel, xs: np.ndarray) -> tuple[float, float]:
    """Latent posterior mean and variance at a single point."""
    ks = kernel_matrix(np.atleast_2d(xs), model.X_train, model.params)[0]
    mean = float(ks @ model.alpha)
    v = solve_triangular(model.chol, ks, lower=True)
    var = model.params.signal_var - float(v @ v)
    if var < -1e-12:
        raise GpError(f"negative posterior variance {var}")
    return mean, max(var, 0.0)


def predict_grad(model: GpModel, xs: np.ndarray) -> np.ndarray:
    """Gradient of the posterior mean w.r.t. the input point."""
    return _mean_grad(model.X_train, model.alpha, model.params, xs)


def _mean_grad(P, w, params, xs):
    ks = kernel_matrix(np.atleast_2d(xs), P, params)[0]
    diff = P - np.asarray(xs)                      # (n, D)
    return ((w * ks) @ (diff / params.lengthscales ** 2))


def _mean_hess(P, w, params, xs):
    """Hessian of the posterior mean w.r.t. the input point."""
    ks = kernel_matrix(np.atleast_2d(xs), P, params)[0]
    inv_l2 = 1.0 / params.lengthscales ** 2
    diff = (P - np.asarray(xs)) * inv_l2           # (n, D), already scaled
    wk = w * ks
    H = (diff * wk[:, None]).T @ diff
    H -= np.diag(inv_l2 * np.sum(wk))
    return H


def predict_var_grad(model: GpModel, xs: np.ndarray) -> np.ndarray:
    """Gradient of the posterior variance w.r.t. the input point."""
    ks = kernel_matrix(np.atleast_2d(xs), model.X_train, model.params)[0]
    kinv_ks = cho_solve((model.chol, True), ks)
    diff = (model.X_train - np.asarray(xs)) / model.params.lengthscales ** 2
    # d ks_i / dx = ks_i * diff_i ; d var/dx = -2 (d ks/dx)^T Kinv ks
    return -2.0 * ((ks * kinv_ks) @ diff)


# ---------------------------------------------------------------------------
# Sparse variational GP (inducing points, collapsed bound)

def elbo_and_grad(X: np.ndarray, y: np.ndarray, params: KernelParams,
                  Z: np.ndarray):
    """Collapsed variational lower bound and its gradients.

    Returns ``(elbo, grad_log_params, grad_Z)``.  The bound is

        log N(y | 0, Q + noise I) - tr(K_nn - Q) / (2 noise),
        Q = K_nm K_mm^{-1} K_mn,

    evaluated and differentiated without ever forming an n x n matrix.
    """
    n, D = X.shape
    m = Z.shape[0]
    sv, nv = params.signal_var, params.noise_var

    Kmm = kernel_matrix(Z, Z, params)
    Kmn = kernel_matrix(Z, X, params)
    Lm, jit = _chol_with_jitter(Kmm)
    A = solve_triangular(Lm, Kmn, lower=True)          # (m, n)
    Bm = nv * np.eye(m) + A @ A.T
    LB, _ = _chol_with_jitter(Bm)

    Ay = A @ y
    c = cho_solve((LB, True), Ay)
    # beta = (Q + nv I)^-1 y  via Woodbury
    beta = (y - A.T @ c) / nv
    logdet = (n - m) * np.log(nv) + 2.0 * float(np.sum(np.log(np.diag(LB))))
    quad = float(y @ beta)
    tr_K = n * sv
    tr_Q = float(np.sum(A * A))
    elbo = (-0.5 * (quad + logdet + n * np.log(2.0 * np.pi))
            - (tr_K - tr_Q) / (2.0 * nv))

    # Gradients through dELBO = sum(Gmn o dKmn) + sum(Gmm o dKmm) + ...
    # with H = beta beta^T + (I/nv - Binv)/1 ... kept in low-rank pieces:
    # Gmn = C H, C = Kmm^-1 Kmn;  Gmm = -0.5 C H C^T.
    C = solve_triangular(Lm.T, A, lower=False)          # Kmm^-1 Kmn
    Cb = C @ beta                                       # (m,)
    W = cho_solve((LB, True), A @ C.T).T                # (m, m): C A^T Binv^T
    # C (I/nv - Binv) = (1/nv) * C A^T Bm^-1 A   (rows of low-rank part)
    CH = np.outer(Cb, beta) + (W @ A) / nv              # C H  (m, n)
    Gmn = CH
    Gmm = -0.5 * CH @ C.T

    tr_Binv = (n - float(np.sum(A * cho_solve((LB, True), A)))) / nv
    tr_G = float(beta @ beta) - tr_Binv
    d_nv = 0.5 * tr_G + (tr_K - tr_Q) / (2.0 * nv * nv)

    grad_logp = np.empty(D + 2)
    # signal variance scales every kernel block linearly
    grad_logp[0] = (float(np.sum(Gmm * Kmm)) + float(np.sum(Gmn * Kmn))
                    - n * sv / (2.0 * nv))
    Zs = Z / params.lengthscales
    Xs = X / params.lengthscales
    GK_mn = Gmn * Kmn
    GK_mm = Gmm * Kmm
    for d in range(D):
        smn = (Zs[:, d][:, None] - Xs[:, d][None, :]) ** 2
        smm = (Zs[:, d][:, None] - Zs[:, d][None, :]) ** 2
        grad_logp[1 + d] = float(np.sum(GK_mn * smn)) + float(np.sum(GK_mm * smm))
    grad_logp[-1] = nv * d_nv

    inv_l2 = 1.0 / params.lengthscales ** 2
    grad_Z = (GK_mn @ X - np.sum(GK_mn, axis=1)[:, None] * Z) * inv_l2
    grad_Z += 2.0 * (GK_mm @ Z - np.sum(GK_mm, axis=1)[:, None] * Z) * inv_l2
    return elbo, grad_logp, grad_Z


def _kmeanspp_seed(X: np.ndarray, m: int, rng) -> np.ndarray:
    """k-means++-style spread-out subset of X used to initialize Z."""
    n = X.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((X - X[idx[0]]) ** 2, axis=1)
    for _ in range(1, m):
        total = float(d2.sum())
        if total <= 0:
            idx.append(int(rng.integers(n)))
            continue
        j = int(np.searchsorted(np.cumsum(d2 / total), rng.random()))
        j = min(j, n - 1)
        idx.append(j)
        d2 = np.minimum(d2, np.sum((X - X[j]) ** 2, axis=1))
    return X[idx].copy()


@dataclass
class SparseGpModel:
    params: KernelParams
    Z: np.ndarray
    weights: np.ndarray         # mean = k(x*, Z) @ weights
    Lm: np.ndarray              # chol of K(Z, Z), lower
    LB: np.ndarray              # chol of nv I + A A^T, lower
    elbo: float

    def to_dict(self) -> dict:
        return {"kind": "sparse",
                "log_params": self.params.to_log_vector().tolist(),
                "Z": self.Z.tolist(),
                "weights": self.weights.tolist(),
                "Lm": self.Lm.tolist(),
                "LB": self.LB.tolist(),
                "elbo": self.elbo}

    @classmethod
    def from_dict(cls, d: dict, X_train=None) -> "SparseGpModel":
        return cls(KernelParams.from_log_vector(np.array(d["log_params"])),
                   np.array(d["Z"]), np.array(d["weights"]),
                   np.array(d["Lm"]), np.array(d["LB"]), d["elbo"])

    def _var_terms(self, Ks: np.ndarray) -> np.ndarray:
        """Posterior variance via triangular solves (no explicit inverse
        difference, which cancels catastrophically for clustered Z)."""
        C = solve_triangular(self.Lm, Ks.T, lower=True)       # (m, N)
        D = solve_triangular(self.LB, C, lower=True)
        return (self.params.signal_var - np.sum(C * C, axis=0)
                + self.params.noise_var * np.sum(D * D, axis=0))


def _sparse_posterior(X, y, params, Z, elbo: float) -> SparseGpModel:
    m = Z.shape[0]
    nv = params.noise_var
    Kmm = kernel_matrix(Z, Z, params)
    Kmn = kernel_matrix(Z, X, params)
    Lm, _ = _chol_with_jitter(Kmm)
    A = solve_triangular(Lm, Kmn, lower=True)
    Bm = nv * np.eye(m) + A @ A.T
    LB, _ = _chol_with_jitter(Bm)
    c = cho_solve((LB, True), A @ y)
    weights = solve_triangular(Lm.T, c, lower=False)
    return SparseGpModel(params, Z.copy(), weights, Lm, LB, elbo)


def fit_sparse(X: np.ndarray, y: np.ndarray, m: int, restarts: int = 5,
               seed: int = 0, maxiter: int = 200) -> SparseGpModel:
    """Joint optimization of log-hyperparameters and inducing inputs."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, D = X.shape
    if not 1 <= m <= n:
        raise GpError("need 1 <= m <= n inducing points")
    bounds = ([(-LOG_BOUND, LOG_BOUND)] * (D + 1)
              + [(np.log(NOISE_FLOOR), LOG_BOUND)]
              + [(None, None)] * (m * D))

    def objective(v):
        params = KernelParams.from_log_vector(v[:D + 2])
        Z = v[D + 2:].reshape(m, D)
        try:
            elbo, g_p, g_Z = elbo_and_grad(X, y, params, Z)
        except GpError:
            return PENALTY_NLML, np.zeros(v.size)
        return -elbo, -np.concatenate([g_p, g_Z.ravel()])

    best = None
    for r in range(restarts):
        rng = np.random.default_rng(seed + r)
        p0 = _init_params(X, y, rng, perturb=(r > 0))
        Z0 = _kmeanspp_seed(X, m, rng)
        v0 = np.concatenate([p0.to_log_vector(), Z0.ravel()])
        v0[D + 1] = max(v0[D + 1], np.log(NOISE_FLOOR))
        res = minimize(objective, v0, jac=True, method="L-BFGS-B",
                       bounds=bounds, options={"maxiter": maxiter})
        if (np.isfinite(res.fun) and res.fun < PENALTY_NLML
                and (best is None or res.fun < best.fun)):
            best = res
    if best is None:
        raise GpError("all restarts produced non-finite ELBO")
    params = KernelParams.from_log_vector(best.x[:D + 2])
    Z = best.x[D + 2:].reshape(m, D)
    return _sparse_posterior(X, y, params, Z, float(-best.fun))


def sparse_from_fixed(X, y, params: KernelParams, Z) -> SparseGpModel:
    """Sparse posterior at fixed hyperparameters and inducing points."""
    elbo, _, _ = elbo_and_grad(np.asarray(X, float), np.asarray(y, float),
                               params, np.asarray(Z, float))
    return _sparse_posterior(np.asarray(X, float), np.asarray(y, float),
                             params, np.asarray(Z, float), elbo)


def predict_sparse(model: SparseGpModel, xs: np.ndarray) -> tuple[float, float]:
    Ks = kernel_matrix(np.atleast_2d(xs), model.Z, model.params)
    mean = float(Ks[0] @ model.weights)
    var = float(model._var_terms(Ks)[0])
    if var < -1e-8:
        raise GpError(f"negative posterior variance {var}")
    return mean, max(var, 0.0)


def predict_sparse_grad(model: SparseGpModel, xs: np.ndarray) -> np.ndarray:
    return _mean_grad(model.Z, model.weights, model.params, xs)


def _sparse_M_ks(model: SparseGpModel, ks: np.ndarray) -> np.ndarray:
    """(Kmm^-1 - nv (Lm B Lm^T)^-1) ks without forming either inverse."""
    c = solve_triangular(model.Lm, ks, lower=True)
    d = cho_solve((model.LB, True), c)
    return solve_triangular(model.Lm.T, c - model.params.noise_var * d,
                            lower=False)


def predict_sparse_var_grad(model: SparseGpModel, xs: np.ndarray) -> np.ndarray:
    ks = kernel_matrix(np.atleast_2d(xs), model.Z, model.params)[0]
    Mks = _sparse_M_ks(model, ks)
    diff = (model.Z - np.asarray(xs)) / model.params.lengthscales ** 2
    return -2.0 * ((ks * Mks) @ diff)


# ---------------------------------------------------------------------------
# Model-agnostic accessors used by the hybrid layer

def gp_mean_batch(model, X: np.ndarray) -> np.ndarray:
    """Posterior mean at many points at once (Monte-Carlo replay path)."""
    if isinstance(model, SparseGpModel):
        P, w = model.Z, model.weights
    else:
        P, w = model.X_train, model.alpha
    return kernel_matrix(np.atleast_2d(X), P, model.params) @ w


def gp_predict_batch(model, X: np.ndarray, chunk: int = 20000):
    """Posterior mean and variance at many points, chunked to bound memory."""
    X = np.atleast_2d(X)
    mean = np.empty(len(X))
    var = np.empty(len(X))
    for lo in range(0, len(X), chunk):
        Xc = X[lo:lo + chunk]
        if isinstance(model, SparseGpModel):
            Ks = kernel_matrix(Xc, model.Z, model.params)
            mean[lo:lo + chunk] = Ks @ model.weights
            var[lo:lo + chunk] = model._var_terms(Ks)
        else:
            Ks = kernel_matrix(Xc, model.X_train, model.params)
            mean[lo:lo + chunk] = Ks @ model.alpha
            V = solve_triangular(model.chol, Ks.T, lower=True)
            var[lo:lo + chunk] = model.params.signal_var - np.sum(V * V, axis=0)
    return mean, np.maximum(var, 0.0)


def gp_predict(model, xs):
    if isinstance(model, SparseGpModel):
        return predict_sparse(model, xs)
    return predict(model, xs)


def gp_mean_grad(model, xs):
    if isinstance(model, SparseGpModel):
        return predict_sparse_grad(model, xs)
    return predict_grad(model, xs)


def gp_mean_hess(model, xs):
    if isinstance(model, SparseGpModel):
        return _mean_hess(model.Z, model.weights, model.params, xs)
    return _mean_hess(model.X_train, model.alpha, model.params, xs)


def gp_var_grad(model, xs):
    if isinstance(model, SparseGpModel):
        return predict_sparse_var_grad(model, xs)
    return predict_var_grad(model, xs)


def model_from_dict(d: dict, X_train=None):
    if d["kind"] == "exact":
        return GpModel.from_dict(d, X_train)
    return SparseGpModel.from_dict(d)
