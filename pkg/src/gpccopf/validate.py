"""Monte-Carlo validation, scenario-approach baseline, and method comparison.

``mc_validate`` is the ground truth: it replays a dispatch decision through
the full AC power flow (never the surrogate) under sampled uncertainty and
counts physical-limit violations.  ``scenario_baseline`` solves the same
dispatch with hard surrogate-mean constraints at each sampled scenario --
keeping the baseline in the same model class isolates the chance-margin
mechanism from surrogate error.  ``compare`` assembles the cost / failure /
CPU table across all methods with one shared validation seed.

Samples use derived seeds (``seed + i``), so evaluation order -- serial or
concurrent -- cannot change any report.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass

import numpy as np

from . import ccopf
from .ccopf import (CcConfig, CcSolution, DispatchDecision, _classify,
                    _cost_and_grad, _output_limit_rows, _Propagator,
                    _run_slsqp, VAR_SMOOTHING)
from .dataset import UncertaintySpec
from .grid import GridCase, case_hash
from .hybrid import HybridModel
from .powerflow import PfInput, solve_ac


class ValidateError(Exception):
    pass


# ---------------------------------------------------------------------------
# Monte-Carlo AC replay

@dataclass
class McReport:
    n_samples: int
    failure_probability: float
    rates: dict                 # per-constraint violation rate
    n_diverged: int
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "failure_probability": self.failure_probability,
            "rates": self.rates,
            "n_diverged": self.n_diverged,
            "timings": {"wall_time_s": self.wall_time},
        }


def _constraint_names(case: GridCase) -> list[str]:
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


def _replay_input(case: GridCase, decision: DispatchDecision,
                  spec: UncertaintySpec, w: np.ndarray) -> tuple[PfInput, np.ndarray]:
    """Bus injections for one realization; also the realized ctrl outputs."""
    omega = -float(w.sum())
    alpha = np.asarray(decision.alpha, float)
    ctrl = case.controllable_gens()
    p_real = np.array([decision.p_g[j] + alpha[gi] * omega
                       for j, gi in enumerate(ctrl)])
    p = np.array([-b.p_load for b in case.buses])
    q = np.array([-b.q_load for b in case.buses])
    for j, gi in enumerate(ctrl):
        p[case.generators[gi].bus] += p_real[j]
    for j, bus in enumerate(spec.bus_ids):
        p[bus] += spec.nominal_arr[j] + w[j]
    v = np.array([b.v_setpoint for b in case.buses])
    return PfInput(p, q, v), p_real


def _violated(case: GridCase, sol, p_real: np.ndarray,
              limit_tol: float = 1e-6) -> list[str]:
    """Names of violated physical constraints at a converged AC solution.

    ``limit_tol`` (pu) absorbs solver round-off: a dispatch that sits
    numerically on a limit (e.g. a generator pinned at p_max plus ~1e-12
    of participation-factor noise) is not a physical violation.
    """
    bad = []
    for i in case.pq_buses():
        b = case.buses[i]
        if sol.v_mag[i] > b.v_max + limit_tol:
            bad.append(f"V:bus{b.orig_id}:hi")
        if sol.v_mag[i] < b.v_min - limit_tol:
            bad.append(f"V:bus{b.orig_id}:lo")
    for g, qv in zip(case.generators, sol.q_gen):
        ob = case.buses[g.bus].orig_id
        if qv > g.q_max + limit_tol:
            bad.append(f"Q:bus{ob}:hi")
        if qv < g.q_min - limit_tol:
            bad.append(f"Q:bus{ob}:lo")
    for k, br in enumerate(case.branches):
        if sol.s_flow[k] > br.s_max + limit_tol:
            bad.append(f"S:br{k}:hi")
    slack = case.generators[case.slack_gen]
    if sol.p_slack > slack.p_max + limit_tol:
        bad.append("pslack:hi")
    if sol.p_slack < slack.p_min - limit_tol:
        bad.append("pslack:lo")
    for j, gi in enumerate(case.controllable_gens()):
        g = case.generators[gi]
        ob = case.buses[g.bus].orig_id
        if p_real[j] > g.p_max + limit_tol:
            bad.append(f"P:bus{ob}:hi")
        if p_real[j] < g.p_min - limit_tol:
            bad.append(f"P:bus{ob}:lo")
    return bad


def mc_validate(case: GridCase, decision: DispatchDecision,
                spec: UncertaintySpec, n: int, seed: int,
                tol: float = 1e-8) -> McReport:
    """Empirical violation probability of a decision by full-AC replay.

    A sample fails if any physical constraint is violated or the AC solve
    diverges (divergence is counted as failure, conservatively).
    """
    if n < 1:
        raise ValidateError("need at least one MC sample")
    t0 = time.perf_counter()
    counts = {name: 0 for name in _constraint_names(case)}
    failures = 0
    diverged = 0
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        w = rng.normal(0.0, spec.sigma_arr) if spec.bus_ids else np.empty(0)
        pf_in, p_real = _replay_input(case, decision, spec, w)
        sol = solve_ac(case, pf_in, tol=tol)
        if not sol.converged:
            diverged += 1
            failures += 1
            continue
        bad = _violated(case, sol, p_real)
        for name in bad:
            counts[name] += 1
        if bad:
            failures += 1
    return McReport(
        n_samples=n,
        failure_probability=failures / n,
        rates={k: v / n for k, v in counts.items()},
        n_diverged=diverged,
        wall_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Scenario-approach baseline

def _draw_scenarios(spec: UncertaintySpec, n: int, seed: int) -> np.ndarray:
    """(n, n_u) realizations; scenario k uses derived seed ``seed + k``,
    so growing n extends (nests) the set rather than resampling it."""
    W = np.empty((n, len(spec.bus_ids)))
    for k in range(n):
        W[k] = np.random.default_rng(seed + k).normal(0.0, spec.sigma_arr)
    return W


def scenario_baseline(case: GridCase, model: HybridModel,
                      spec: UncertaintySpec, n_scenarios: int, seed: int,
                      config: CcConfig) -> CcSolution:
    """Dispatch with hard surrogate-mean constraints per sampled scenario.

    Each scenario realizes the generator response p_g + alpha * Omega and
    the uncertain injections, and the surrogate mean outputs at that input
    must satisfy every limit (no variance margin).  The base case (omega=0)
    is always enforced.  The cost is the same risk-aware expectation used
    by the chance-constrained solve.  ``n_scenarios = 0`` degenerates to
    the deterministic dispatch.
    """
    if n_scenarios < 0:
        raise ValidateError("n_scenarios must be >= 0")
    if n_scenarios == 0:
        return ccopf.solve(case, model, spec, config, deterministic=True)

    t0 = time.perf_counter()
    ctrl = case.controllable_gens()
    nc, ng = len(ctrl), len(case.generators)
    nu = len(spec.bus_ids)
    W = np.vstack([np.zeros(nu), _draw_scenarios(spec, n_scenarios, seed)])
    omegas = -W.sum(axis=1)
    prop = _Propagator(case, model, spec, include_var=True)
    rows = _output_limit_rows(case)
    rows_per = sum((r[2] is not None) + (r[3] is not None) for r in rows) + 2 * nc
    a_cols = nc + np.asarray(ctrl)

    def unpack(x):
        return x[:nc], x[nc:]

    def f(x):
        p_g, alpha = unpack(x)
        return _cost_and_grad(case, prop, spec, p_g, alpha)

    def margins_jac(x):
        p_g, alpha = unpack(x)
        a_c = alpha[ctrl]
        m = np.empty(rows_per * len(W))
        Jm = np.zeros((rows_per * len(W), nc + ng))
        for s, (w, om) in enumerate(zip(W, omegas)):
            xk = np.concatenate([p_g + a_c * om, spec.nominal_arr + w])
            mu, _ = model.predict(xk)
            J = model.mean_jacobian(xk)
            k = rows_per * s
            for _, j, lo, hi in rows:
                if hi is not None:
                    m[k] = hi - mu[j]
                    Jm[k, :nc] = -J[j, :nc]
                    Jm[k, a_cols] = -J[j, :nc] * om
                    k += 1
                if lo is not None:
                    m[k] = mu[j] - lo
                    Jm[k, :nc] = J[j, :nc]
                    Jm[k, a_cols] = J[j, :nc] * om
                    k += 1
            for jj, gi in enumerate(ctrl):
                g = case.generators[gi]
                pr = p_g[jj] + alpha[gi] * om
                m[k] = g.p_max - pr
                Jm[k, jj] = -1.0
                Jm[k, nc + gi] = -om
                k += 1
                m[k] = pr - g.p_min
                Jm[k, jj] = 1.0
                Jm[k, nc + gi] = om
                k += 1
        return m, Jm

    def g_ineq(x):
        return margins_jac(x)[0]

    def g_ineq_jac(x):
        return margins_jac(x)[1]

    p0 = np.array([np.clip(case.generators[g].p_nominal,
                           case.generators[g].p_min,
                           case.generators[g].p_max) for g in ctrl])
    x0 = np.concatenate([p0, np.full(ng, 1.0 / ng)])
    bounds = [(case.generators[g].p_min, case.generators[g].p_max)
              for g in ctrl] + [(0.0, 1.0)] * ng
    constraints = [
        {"type": "ineq", "fun": g_ineq, "jac": g_ineq_jac},
        {"type": "eq", "fun": lambda x: np.array([x[nc:].sum() - 1.0]),
         "jac": lambda x: np.concatenate([np.zeros(nc), np.ones(ng)])[None, :]},
    ]
    res, n_iter = _run_slsqp(f, x0, bounds, constraints, g_ineq, config)

    p_g, alpha = unpack(res.x)
    alpha = np.clip(alpha, 0.0, None)
    alpha = alpha / alpha.sum()
    decision = DispatchDecision(p_g.copy(), alpha)
    margins, _ = margins_jac(np.concatenate([p_g, alpha]))
    mu, var, *_ = prop.moments(p_g, alpha[ctrl])
    cost = ccopf.expected_cost(case, decision, spec, mu[-1], var[-1])
    names = [f"s{s}:{nm}" for s in range(len(W))
             for nm in _constraint_names(case)]
    return CcSolution(
        decision=decision, expected_cost=float(cost),
        mu_y=mu, sigma_y=np.sqrt(var + VAR_SMOOTHING),
        margins=margins, margin_names=names,
        status=_classify(res, margins.min() >= -config.feas_tol, config),
        wall_time=time.perf_counter() - t0,
        n_iter=n_iter, solver_message=str(res.message),
    )


# ---------------------------------------------------------------------------
# Method comparison

@dataclass
class ComparisonRow:
    method: str
    cost: float
    failure_probability: float
    cpu_s: float                # solve wall time only
    status: str
    case_hash: str
    spec_hash: str
    validation_seed: int


@dataclass
class ComparisonReport:
    rows: list
    n_mc: int

    def __post_init__(self):
        keys = {(r.case_hash, r.spec_hash, r.validation_seed)
                for r in self.rows}
        if len(keys) > 1:
            raise ValidateError("comparison rows mix case/spec/seed bundles")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "cost", "failure_prob", "cpu_s"])
        for r in self.rows:
            w.writerow([r.method, repr(r.cost), repr(r.failure_probability),
                        repr(r.cpu_s)])
        return buf.getvalue()

    def to_text(self) -> str:
        r0 = self.rows[0]
        lines = [
            "Method comparison (scenario rows enforce surrogate-mean "
            "constraints per scenario, not full AC)",
            f"case_hash={r0.case_hash} spec_hash={r0.spec_hash} "
            f"validation_seed={r0.validation_seed} n_mc={self.n_mc}",
            "",
            f"{'method':<18} {'cost':>14} {'failure_prob':>13} "
            f"{'cpu_s':>9} {'status':>10}",
        ]
        for r in self.rows:
            fp = ("%.4f" % r.failure_probability
                  if np.isfinite(r.failure_probability) else "n/a")
            lines.append(f"{r.method:<18} {r.cost:>14.4f} {fp:>13} "
                         f"{r.cpu_s:>9.2f} {r.status:>10}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "n_mc": self.n_mc,
            "rows": [{"method": r.method, "cost": r.cost,
                      "failure_probability": r.failure_probability,
                      "timings": {"cpu_s": r.cpu_s}, "status": r.status,
                      "case_hash": r.case_hash, "spec_hash": r.spec_hash,
                      "validation_seed": r.validation_seed}
                     for r in self.rows],
        }


def spec_hash(case: GridCase, spec: UncertaintySpec) -> str:
    payload = json.dumps({
        "bus_ids": [case.buses[b].orig_id for b in spec.bus_ids],
        "sigma": list(spec.sigma),
        "nominal": list(spec.nominal),
    }, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def compare(case: GridCase, spec: UncertaintySpec, models: dict,
            cc_config: CcConfig, scenario_counts: list[int],
            n_mc: int, validation_seed: int,
            scenario_seed: int = 0) -> ComparisonReport:
    """Cost / empirical failure / CPU table across dispatch methods.

    ``models`` maps mode name ("exact" and optionally "sparse") to a trained
    hybrid model.  Every row is validated with the same MC seed; CPU time
    covers the solve only.  A failed sub-run keeps its row (status recorded,
    failure probability NaN) and the others proceed.
    """
    if "exact" not in models:
        raise ValidateError("compare needs at least the exact-mode model")
    ch = case_hash(case)
    sh = spec_hash(case, spec)
    rows = []

    def add(method, sol):
        if sol.status in ("optimal", "max_iter"):
            rep = mc_validate(case, sol.decision, spec, n_mc, validation_seed)
            fp = rep.failure_probability
        else:
            fp = float("nan")
        rows.append(ComparisonRow(
            method=method, cost=sol.expected_cost, failure_probability=fp,
            cpu_s=sol.wall_time, status=sol.status,
            case_hash=ch, spec_hash=sh, validation_seed=validation_seed))

    det = ccopf.solve(case, models["exact"], spec, cc_config,
                      deterministic=True)
    add("deterministic", det)
    for mode in ("exact", "sparse"):
        if mode in models:
            sol = ccopf.solve(case, models[mode], spec, cc_config,
                              start=det.decision)
            add(f"gp-ccopf-{mode}", sol)
    for n_s in scenario_counts:
        sol = scenario_baseline(case, models["exact"], spec, n_s,
                                scenario_seed, cc_config)
        add(f"sa-{n_s}", sol)
    return ComparisonReport(rows=rows, n_mc=n_mc)
