"""Chance-constrained economic dispatch over the hybrid surrogate.

Decision variables are the controllable non-slack generator setpoints and
the participation factors of every generator (slack included; its setpoint
is the surrogate's predicted balance residue, not a variable).  Each
engineering limit becomes a Gaussian margin  mu +/- z(eps) * sigma  with
the output moments supplied by first-order propagation through the
surrogate; generator active limits admit exact margins because the
response p_g + alpha * Omega is linear in the uncertainty.

The solver is a local SQP method (scipy's SLSQP) fed fully analytic
gradients of both the cost and every margin.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .dataset import UncertaintySpec
from .grid import GridCase
from .hybrid import HybridModel, InputDistribution, build_input_distribution

VAR_SMOOTHING = 1e-16   # floor under the square root; kills the sigma=0 kink


class CcopfError(Exception):
    pass


# ---------------------------------------------------------------------------
# Standard normal helpers (self-contained; the CDF uses erf, the inverse is
# Acklam's rational approximation polished by one Newton step on the CDF).

def norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)


def quantile(p: float) -> float:
    """Inverse standard normal CDF, |Phi(z) - p| < 1e-10 on (0, 1)."""
    if not 0.0 < p < 1.0:
        raise CcopfError("quantile argument must lie in (0, 1)")
    p_low = 0.02425
    if p < p_low:
        q = math.sqrt(-2.0 * math.log(p))
        z = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
             / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    elif p <= 1.0 - p_low:
        q = p - 0.5
        r = q * q
        z = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
             / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    else:
        q = math.sqrt(-2.0 * math.log(1.0 - p))
        z = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
              / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    # one Newton refinement of Phi(z) = p
    err = norm_cdf(z) - p
    z -= err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * z * z)
    return z


# ---------------------------------------------------------------------------

@dataclass
class DispatchDecision:
    p_g: np.ndarray     # controllable non-slack generator setpoints, case order (pu)
    alpha: np.ndarray   # participation factor per generator (slack included)


@dataclass
class CcConfig:
    epsilon: float = 0.025
    kkt_tol: float = 1e-9
    max_iter: int = 200
    feas_tol: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise CcopfError("epsilon must lie in (0, 0.5)")


@dataclass
class CcSolution:
    decision: DispatchDecision
    expected_cost: float
    mu_y: np.ndarray
    sigma_y: np.ndarray
    margins: np.ndarray
    margin_names: list[str]
    status: str             # optimal | infeasible | max_iter | failed
    wall_time: float
    n_iter: int
    solver_message: str = ""

    def to_dict(self) -> dict:
        return {
            "decision": {"p_g": self.decision.p_g.tolist(),
                         "alpha": self.decision.alpha.tolist()},
            "expected_cost": self.expected_cost,
            "mu_y": self.mu_y.tolist(),
            "sigma_y": self.sigma_y.tolist(),
            "margins": dict(zip(self.margin_names, self.margins.tolist())),
            "status": self.status,
            "timings": {"wall_time_s": self.wall_time},
            "n_iter": self.n_iter,
            "solver_message": self.solver_message,
        }


def expected_cost(case: GridCase, decision: DispatchDecision,
                  spec: UncertaintySpec, mu_slack: float,
                  var_slack: float) -> float:
    """Exact Gaussian expectation of the quadratic dispatch cost."""
    var_omega = spec.total_variance()
    total = 0.0
    for j, gi in enumerate(case.controllable_gens()):
        c2, c1, c0 = case.generators[gi].cost
        p = decision.p_g[j]
        total += c2 * p * p + c1 * p + c0
        total += c2 * decision.alpha[gi] ** 2 * var_omega
    c2, c1, c0 = case.generators[case.slack_gen].cost
    total += c2 * (mu_slack ** 2 + var_slack) + c1 * mu_slack + c0
    return total


# ---------------------------------------------------------------------------
# Moments of every surrogate output plus their decision derivatives.

class _Propagator:
    """Caches per-evaluation surrogate calls for cost/constraint assembly."""

    def __init__(self, case: GridCase, model: HybridModel,
                 spec: UncertaintySpec, include_var: bool = True):
        self.case = case
        self.model = model
        self.spec = spec
        self.include_var = include_var
        self.ctrl = case.controllable_gens()
        self.nc = len(self.ctrl)
        self.ng = len(case.generators)
        self.sig2 = spec.sigma_arr ** 2
        self.s2sum = float(self.sig2.sum())
        self._cache_key = None

    def moments(self, p_g: np.ndarray, a_c: np.ndarray):
        """mu, var and gradients w.r.t. (p_g, a_c) for every output."""
        key = (p_g.tobytes(), a_c.tobytes())
        if key == self._cache_key:
            return self._cache
        model, nc = self.model, self.nc
        mu_x = np.concatenate([p_g, self.spec.nominal_arr])
        mu_y, gp_var = model.predict(mu_x)
        J = model.mean_jacobian(mu_x)           # (n_out, D)
        g_gen, g_unc = J[:, :nc], J[:, nc:]
        n_out = len(mu_y)

        dmu_dp = g_gen                          # (n_out, nc)
        if self.include_var:
            t = g_gen @ a_c
            u = g_unc @ self.sig2
            var = gp_var + self.s2sum * t * t - 2.0 * t * u \
                + (g_unc ** 2) @ self.sig2
            Sigma = self._sigma_x(a_c)
            dvar_dp = np.empty((n_out, nc))
            for j in range(n_out):
                full = model.gp_var_grad(mu_x, j) \
                    + 2.0 * model.mean_hessian(mu_x, j) @ (Sigma @ J[j])
                dvar_dp[j] = full[:nc]
            dvar_da = (2.0 * self.s2sum * t - 2.0 * u)[:, None] * g_gen
        else:
            var = np.zeros(n_out)
            dvar_dp = np.zeros((n_out, nc))
            dvar_da = np.zeros((n_out, nc))
        self._cache_key = key
        self._cache = (mu_y, np.maximum(var, 0.0), dmu_dp, dvar_dp, dvar_da)
        return self._cache

    def _sigma_x(self, a_c):
        nc, nu = self.nc, len(self.spec.bus_ids)
        S = np.zeros((nc + nu, nc + nu))
        S[:nc, :nc] = np.outer(a_c, a_c) * self.s2sum
        S[:nc, nc:] = -np.outer(a_c, self.sig2)
        S[nc:, :nc] = S[:nc, nc:].T
        S[nc:, nc:] = np.diag(self.sig2)
        return S


def _output_limit_rows(case: GridCase):
    """(name, output_index, lower, upper) for every constrained output."""
    rows = []
    pq = case.pq_buses()
    for k, i in enumerate(pq):
        b = case.buses[i]
        rows.append((f"V:bus{b.orig_id}", k, b.v_min, b.v_max))
    off = len(pq)
    for j, g in enumerate(case.generators):
        rows.append((f"Q:bus{case.buses[g.bus].orig_id}", off + j, g.q_min, g.q_max))
    off += len(case.generators)
    for k, br in enumerate(case.branches):
        rows.append((f"S:br{k}", off + k, None, br.s_max))
    slack = case.generators[case.slack_gen]
    rows.append(("pslack", off + len(case.branches), slack.p_min, slack.p_max))
    return rows


def margin_names(case: GridCase) -> list[str]:
    names = []
    for name, _, lo, hi in _output_limit_rows(case):
        if hi is not None:
            names.append(f"{name}:hi")
        if lo is not None:
            names.append(f"{name}:lo")
    for gi in case.controllable_gens():
        ob = case.buses[case.generators[gi].bus].orig_id
        names.append(f"P:bus{ob}:hi")
        names.append(f"P:bus{ob}:lo")
    return names


def _margins_and_jac(case, prop: _Propagator, z: float,
                     p_g: np.ndarray, alpha: np.ndarray):
    """Margin vector (>= 0 feasible) and its Jacobian w.r.t. [p_g; alpha]."""
    ctrl = prop.ctrl
    nc, ng = prop.nc, prop.ng
    a_c = alpha[ctrl]
    mu, var, dmu_dp, dvar_dp, dvar_da = prop.moments(p_g, a_c)
    sig = np.sqrt(var + VAR_SMOOTHING)
    dsig_dp = dvar_dp / (2.0 * sig)[:, None]
    dsig_da = dvar_da / (2.0 * sig)[:, None]

    rows = _output_limit_rows(case)
    n_con = sum((r[2] is not None) + (r[3] is not None) for r in rows) + 2 * nc
    m = np.empty(n_con)
    Jm = np.zeros((n_con, nc + ng))
    a_cols = nc + np.asarray(ctrl)

    k = 0
    for _, j, lo, hi in rows:
        if hi is not None:
            m[k] = hi - mu[j] - z * sig[j]
            Jm[k, :nc] = -dmu_dp[j] - z * dsig_dp[j]
            Jm[k, a_cols] = -z * dsig_da[j]
            k += 1
        if lo is not None:
            m[k] = mu[j] - z * sig[j] - lo
            Jm[k, :nc] = dmu_dp[j] - z * dsig_dp[j]
            Jm[k, a_cols] = -z * dsig_da[j]
            k += 1

    sigma_omega = math.sqrt(prop.s2sum)
    for jj, gi in enumerate(ctrl):
        g = case.generators[gi]
        m[k] = g.p_max - p_g[jj] - z * sigma_omega * alpha[gi]
        Jm[k, jj] = -1.0
        Jm[k, nc + gi] = -z * sigma_omega
        k += 1
        m[k] = p_g[jj] - z * sigma_omega * alpha[gi] - g.p_min
        Jm[k, jj] = 1.0
        Jm[k, nc + gi] = -z * sigma_omega
        k += 1
    return m, Jm


def constraint_margins(case: GridCase, decision: DispatchDecision,
                       model: HybridModel, spec: UncertaintySpec,
                       epsilon: float) -> np.ndarray:
    """Reformulated chance-constraint margins at a decision (>= 0 feasible)."""
    z = quantile(1.0 - epsilon)
    prop = _Propagator(case, model, spec)
    m, _ = _margins_and_jac(case, prop, z,
                            np.asarray(decision.p_g, float),
                            np.asarray(decision.alpha, float))
    return m


def _cost_and_grad(case, prop: _Propagator, spec, p_g, alpha):
    ctrl = prop.ctrl
    nc, ng = prop.nc, prop.ng
    a_c = alpha[ctrl]
    mu, var, dmu_dp, dvar_dp, dvar_da = prop.moments(p_g, a_c)
    var_omega = spec.total_variance() if prop.include_var else 0.0

    grad = np.zeros(nc + ng)
    total = 0.0
    for jj, gi in enumerate(ctrl):
        c2, c1, _c0 = case.generators[gi].cost
        total += c2 * p_g[jj] ** 2 + c1 * p_g[jj] + _c0
        total += c2 * alpha[gi] ** 2 * var_omega
        grad[jj] += 2.0 * c2 * p_g[jj] + c1
        grad[nc + gi] += 2.0 * c2 * alpha[gi] * var_omega
    c2, c1, c0 = case.generators[case.slack_gen].cost
    js = len(mu) - 1    # slack output is last by the output contract
    total += c2 * (mu[js] ** 2 + var[js]) + c1 * mu[js] + c0
    grad[:nc] += (2.0 * c2 * mu[js] + c1) * dmu_dp[js] + c2 * dvar_dp[js]
    grad[nc + np.asarray(ctrl)] += c2 * dvar_da[js]
    return total, grad


def _restore_feasibility(x, g_ineq, g_jac, bounds, steps: int = 5):
    """Newton steps on the most-violated margin, tangent to sum(alpha)=1.

    SLSQP sometimes stalls a hair outside the feasible set ("positive
    directional derivative for linesearch"); nudging the iterate back
    inside lets the re-polish pass converge.
    """
    lo = np.array([-np.inf if b[0] is None else b[0] for b in bounds])
    hi = np.array([np.inf if b[1] is None else b[1] for b in bounds])
    x = x.copy()
    for _ in range(steps):
        m = g_ineq(x)
        k = int(np.argmin(m))
        if m[k] >= 0.0:
            break
        J = g_jac(x)[k]
        # project out the alpha-sum direction so the equality stays intact
        d = J.copy()
        na = _n_alpha_dims(bounds)
        if na:
            d[-na:] -= d[-na:].mean()
        denom = float(J @ d)
        if denom <= 0.0:
            break
        x = np.clip(x + d * ((-m[k] + 1e-9) / denom), lo, hi)
    return x


def _n_alpha_dims(bounds) -> int:
    """Trailing decision entries that are participation factors in [0, 1]."""
    n = 0
    for b in reversed(bounds):
        if b == (0.0, 1.0):
            n += 1
        else:
            break
    return n


def _run_slsqp(f, x0, bounds, constraints, g_ineq, config: CcConfig):
    """SLSQP with feasibility restoration and re-polish restarts.

    SLSQP occasionally stops on a flat linesearch a hair outside the
    feasibility tolerance; restoring feasibility and re-running from the
    returned iterate fixes that without touching the tolerances.  Returns
    (result, total iterations).
    """
    g_jac = constraints[0]["jac"]
    n_iter_total = 0
    res = None
    for _attempt in range(3):
        start = x0 if res is None else _restore_feasibility(
            res.x, g_ineq, g_jac, bounds)
        res = minimize(f, start, jac=True,
                       method="SLSQP", bounds=bounds, constraints=constraints,
                       options={"maxiter": config.max_iter,
                                "ftol": config.kkt_tol})
        n_iter_total += int(res.nit)
        if res.success and g_ineq(res.x).min() >= -config.feas_tol:
            break
    if g_ineq(res.x).min() < -config.feas_tol:
        # final restoration: accept the nudged iterate when it keeps the
        # objective within KKT slack of the stalled one
        x_fix = _restore_feasibility(res.x, g_ineq, g_jac, bounds)
        if g_ineq(x_fix).min() >= -config.feas_tol:
            res.x = x_fix
    return res, n_iter_total


def _classify(res, feasible: bool, config: CcConfig) -> str:
    # status 8 is SLSQP's flat-linesearch exit; at a feasible iterate it is
    # a converged point for our purposes
    if feasible and (res.success or res.status == 8):
        return "optimal"
    if res.status == 9:        # iteration limit
        return "max_iter"
    if not feasible:
        return "infeasible"
    return "failed"


def solve(case: GridCase, model: HybridModel, spec: UncertaintySpec,
          config: CcConfig, start: DispatchDecision | None = None,
          deterministic: bool = False) -> CcSolution:
    """Local NLP solve of the chance-constrained dispatch.

    ``deterministic=True`` drops all uncertainty terms (z = 0, no variance)
    and is used for the warm start and as the comparison baseline.
    """
    t0 = time.perf_counter()
    ctrl = case.controllable_gens()
    nc, ng = len(ctrl), len(case.generators)
    z = 0.0 if deterministic else quantile(1.0 - config.epsilon)
    eff_spec = spec if not deterministic else UncertaintySpec(
        spec.bus_ids, (0.0,) * len(spec.bus_ids), spec.nominal)
    prop = _Propagator(case, model, eff_spec, include_var=not deterministic)

    if start is None:
        p0 = np.array([np.clip(case.generators[g].p_nominal,
                               case.generators[g].p_min,
                               case.generators[g].p_max) for g in ctrl])
        a0 = np.full(ng, 1.0 / ng)
    else:
        p0 = np.asarray(start.p_g, float).copy()
        a0 = np.asarray(start.alpha, float).copy()
    x0 = np.concatenate([p0, a0])

    def unpack(x):
        return x[:nc], x[nc:]

    def f(x):
        p_g, alpha = unpack(x)
        return _cost_and_grad(case, prop, eff_spec, p_g, alpha)

    def g_ineq(x):
        p_g, alpha = unpack(x)
        return _margins_and_jac(case, prop, z, p_g, alpha)[0]

    def g_ineq_jac(x):
        p_g, alpha = unpack(x)
        return _margins_and_jac(case, prop, z, p_g, alpha)[1]

    bounds = [(case.generators[g].p_min, case.generators[g].p_max)
              for g in ctrl] + [(0.0, 1.0)] * ng
    constraints = [
        {"type": "ineq", "fun": g_ineq, "jac": g_ineq_jac},
        {"type": "eq", "fun": lambda x: np.array([x[nc:].sum() - 1.0]),
         "jac": lambda x: np.concatenate([np.zeros(nc), np.ones(ng)])[None, :]},
    ]
    res, n_iter_total = _run_slsqp(f, x0, bounds, constraints, g_ineq, config)

    p_g, alpha = unpack(res.x)
    alpha = np.clip(alpha, 0.0, None)
    alpha = alpha / alpha.sum()
    decision = DispatchDecision(p_g.copy(), alpha)
    margins, _ = _margins_and_jac(case, prop, z, p_g, alpha)
    mu, var, *_ = prop.moments(p_g, alpha[ctrl])
    cost = expected_cost(case, decision, eff_spec, mu[-1],
                         var[-1] if not deterministic else 0.0)

    status = _classify(res, margins.min() >= -config.feas_tol, config)
    return CcSolution(
        decision=decision, expected_cost=float(cost),
        mu_y=mu, sigma_y=np.sqrt(var + VAR_SMOOTHING),
        margins=margins, margin_names=margin_names(case),
        status=status, wall_time=time.perf_counter() - t0,
        n_iter=n_iter_total, solver_message=str(res.message),
    )


def most_violated(sol: CcSolution, k: int = 5) -> list[tuple[str, float]]:
    order = np.argsort(sol.margins)
    return [(sol.margin_names[i], float(sol.margins[i])) for i in order[:k]]
