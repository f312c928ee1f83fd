"""Hybrid surrogate: OLS linear model on DC outputs plus residual GPs.

The linear stage is fit from standardized inputs to standardized DC
outputs; one independent GP per output dimension learns the standardized
AC-minus-DC residual.  Predictions, gradients and variances are exposed in
physical units, with the standardizer chain rule folded into cached
physical-space coefficients.  When every GP contribution is zeroed the
model degenerates exactly to the linear/DC stage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import gp
from .dataset import Sample, Standardizer, stack
from .grid import GridCase


class HybridError(Exception):
    pass


@dataclass
class LinearModel:
    W: np.ndarray    # (n_out, n_in), standardized spaces
    b: np.ndarray    # (n_out,)


def fit_linear(X: np.ndarray, Y: np.ndarray, ridge: float = 1e-8) -> LinearModel:
    """Ordinary least squares per output column, ridge fallback if rank-deficient."""
    X = np.atleast_2d(np.asarray(X, float))
    Y = np.atleast_2d(np.asarray(Y, float))
    n, d = X.shape
    A = np.hstack([X, np.ones((n, 1))])
    if np.linalg.matrix_rank(A) < d + 1:
        G = A.T @ A + ridge * np.eye(d + 1)
        coef = np.linalg.solve(G, A.T @ Y)
    else:
        coef, *_ = np.linalg.lstsq(A, Y, rcond=None)
    return LinearModel(W=coef[:d].T.copy(), b=coef[d].copy())


@dataclass
class InputDistribution:
    mu_x: np.ndarray
    sigma_x: np.ndarray     # (D, D) covariance, PSD


def build_input_distribution(case: GridCase, decision, spec) -> InputDistribution:
    """Input mean/covariance induced by uncertainty and generator response.

    Under a realization w of the uncertain injections, every controllable
    generator moves by alpha_g * Omega with Omega = -sum(w), so the input
    vector is linear in w and its covariance is J diag(sigma^2) J^T.
    """
    alpha = np.asarray(decision.alpha, float)
    if np.any(alpha < -1e-9) or abs(alpha.sum() - 1.0) > 1e-8:
        raise HybridError("participation factors must be >= 0 and sum to 1")
    ctrl = case.controllable_gens()
    a_c = np.array([alpha[g] for g in ctrl])
    sig2 = spec.sigma_arr ** 2
    nc, nu = len(ctrl), len(spec.bus_ids)
    mu = np.concatenate([np.asarray(decision.p_g, float), spec.nominal_arr])
    S = np.zeros((nc + nu, nc + nu))
    S[:nc, :nc] = np.outer(a_c, a_c) * sig2.sum()
    S[:nc, nc:] = -np.outer(a_c, sig2)
    S[nc:, :nc] = S[:nc, nc:].T
    S[nc:, nc:] = np.diag(sig2)
    return InputDistribution(mu, S)


@dataclass
class HybridModel:
    std_in: Standardizer
    std_dc: Standardizer
    std_r: Standardizer
    linear: LinearModel
    gps: list                       # one GpModel/SparseGpModel per output
    input_names: list[str]
    output_names: list[str]
    case_hash: str
    mode: str                       # "exact" | "sparse"
    X_train_std: np.ndarray | None  # shared standardized training inputs

    # cached physical-space linear map
    def __post_init__(self):
        sx, mx = self.std_in.std, self.std_in.mean
        sd, md = self.std_dc.std, self.std_dc.mean
        self.W_phys = (sd[:, None] * self.linear.W) / sx[None, :]
        self.b_phys = md + sd * (self.linear.b - self.linear.W @ (mx / sx))

    @property
    def n_out(self) -> int:
        return len(self.gps)

    def _xs(self, x):
        return self.std_in.apply(x)

    def predict(self, x: np.ndarray, with_gp: bool = True):
        """Physical-space mean and GP posterior variance per output."""
        xs = self._xs(x)
        mean = self.W_phys @ np.asarray(x, float) + self.b_phys
        var = np.zeros(self.n_out)
        if with_gp:
            for j, g in enumerate(self.gps):
                m, v = gp.gp_predict(g, xs)
                mean[j] += self.std_r.mean[j] + self.std_r.std[j] * m
                var[j] = self.std_r.std[j] ** 2 * v
        return mean, var

    def predict_mean_batch(self, X: np.ndarray) -> np.ndarray:
        """Means only, vectorized over rows of X (N, D) -> (N, n_out)."""
        X = np.atleast_2d(np.asarray(X, float))
        Xs = self.std_in.apply(X)
        out = X @ self.W_phys.T + self.b_phys
        for j, g in enumerate(self.gps):
            out[:, j] += self.std_r.mean[j] \
                + self.std_r.std[j] * gp.gp_mean_batch(g, Xs)
        return out

    def predict_batch(self, X: np.ndarray):
        """Vectorized means and GP variances, (N, D) -> ((N, n_out), (N, n_out))."""
        X = np.atleast_2d(np.asarray(X, float))
        Xs = self.std_in.apply(X)
        mean = X @ self.W_phys.T + self.b_phys
        var = np.empty_like(mean)
        for j, g in enumerate(self.gps):
            m, v = gp.gp_predict_batch(g, Xs)
            mean[:, j] += self.std_r.mean[j] + self.std_r.std[j] * m
            var[:, j] = self.std_r.std[j] ** 2 * v
        return mean, var

    def mean_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d mean / dx, (n_out, D), physical units."""
        xs = self._xs(x)
        J = self.W_phys.copy()
        for j, g in enumerate(self.gps):
            J[j] += (self.std_r.std[j] / self.std_in.std) * gp.gp_mean_grad(g, xs)
        return J

    def mean_hessian(self, x: np.ndarray, j: int) -> np.ndarray:
        """Hessian of output j's mean w.r.t. x (the linear part drops out)."""
        xs = self._xs(x)
        H = gp.gp_mean_hess(self.gps[j], xs)
        scale = np.outer(1.0 / self.std_in.std, 1.0 / self.std_in.std)
        return self.std_r.std[j] * H * scale

    def gp_var_grad(self, x: np.ndarray, j: int) -> np.ndarray:
        xs = self._xs(x)
        return (self.std_r.std[j] ** 2 / self.std_in.std) \
            * gp.gp_var_grad(self.gps[j], xs)

    def to_dict(self) -> dict:
        return {
            "format": "gpccopf-hybrid-model",
            "standardization": "population divisor n",
            "case_hash": self.case_hash,
            "mode": self.mode,
            "input_names": self.input_names,
            "output_names": self.output_names,
            "std_in": self.std_in.to_dict(),
            "std_dc": self.std_dc.to_dict(),
            "std_r": self.std_r.to_dict(),
            "linear_W": self.linear.W.tolist(),
            "linear_b": self.linear.b.tolist(),
            "X_train_std": (self.X_train_std.tolist()
                            if self.X_train_std is not None else None),
            "gps": [g.to_dict() for g in self.gps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HybridModel":
        if d.get("format") != "gpccopf-hybrid-model":
            raise HybridError("not a hybrid model file")
        X = np.array(d["X_train_std"]) if d["X_train_std"] is not None else None
        gps = [gp.model_from_dict(gd, X) for gd in d["gps"]]
        return cls(
            std_in=Standardizer.from_dict(d["std_in"]),
            std_dc=Standardizer.from_dict(d["std_dc"]),
            std_r=Standardizer.from_dict(d["std_r"]),
            linear=LinearModel(np.array(d["linear_W"]), np.array(d["linear_b"])),
            gps=gps,
            input_names=d["input_names"],
            output_names=d["output_names"],
            case_hash=d["case_hash"],
            mode=d["mode"],
            X_train_std=X,
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "HybridModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_hybrid(train: list[Sample], case: GridCase, case_hash_: str,
               input_names_: list[str], output_names_: list[str],
               mode: str = "exact", m: int = 50, restarts: int = 3,
               seed: int = 0, maxiter: int = 200) -> HybridModel:
    """Train the linear stage and one residual GP per output."""
    if mode not in ("exact", "sparse"):
        raise HybridError(f"unknown mode {mode!r}")
    X, _, Ydc, R = stack(train)
    std_in = Standardizer.fit(X)
    std_dc = Standardizer.fit(Ydc)
    std_r = Standardizer.fit(R)
    Xs = std_in.apply(X)
    linear = fit_linear(Xs, std_dc.apply(Ydc))

    gps = []
    for j in range(R.shape[1]):
        yj = std_r.apply(R)[:, j]
        sj = seed + 1000 * j
        if mode == "exact":
            gps.append(gp.fit(Xs, yj, restarts=restarts, seed=sj,
                              maxiter=maxiter))
        else:
            gps.append(gp.fit_sparse(Xs, yj, m=min(m, len(Xs)),
                                     restarts=restarts, seed=sj,
                                     maxiter=maxiter))
    return HybridModel(std_in, std_dc, std_r, linear, gps,
                       input_names_, output_names_, case_hash_, mode,
                       X_train_std=Xs)


def ta1_propagate(model: HybridModel, dist: InputDistribution):
    """First-order propagation of the input distribution to output moments.

    mean_j = linear_j(mu) + gp_j(mu);  var_j = gp posterior variance at mu
    plus g_j^T Sigma g_j with g_j the analytic surrogate gradient.
    """
    mu_y, gp_var = model.predict(dist.mu_x)
    J = model.mean_jacobian(dist.mu_x)
    var_y = gp_var + np.einsum("jd,de,je->j", J, dist.sigma_x, J)
    return mu_y, np.maximum(var_y, 0.0)
