"""AC (Newton-Raphson) and DC power flow, plus the surrogate output vector.

The AC solver works on the polar mismatch equations with a dense Jacobian
rebuilt every iteration; at 9-39 bus scale there is nothing to gain from
decoupling or sparsity.  PV buses are never switched to PQ here: reactive
limits are enforced downstream by the dispatch constraints, so the solver
exposes the unclipped physics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BusKind, GridCase, build_dc_matrices, build_ybus


class PowerFlowError(Exception):
    pass


@dataclass
class PfInput:
    p_injection: np.ndarray     # net active injection per bus (pu), slack entry unused
    q_injection: np.ndarray     # net reactive injection per bus (pu), used at PQ buses
    v_setpoints: np.ndarray     # magnitudes (pu), used at Slack/PV buses


@dataclass
class PfSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_slack: float              # slack generator active output (pu)
    q_gen: np.ndarray           # reactive output per generator, case order (pu)
    s_flow: np.ndarray          # apparent flow per branch, max of both ends (pu)
    converged: bool
    iterations: int
    max_mismatch: float


def nominal_input(case: GridCase, extra_p: np.ndarray | None = None) -> PfInput:
    """PfInput for the case-file dispatch, optionally with added injections."""
    n = case.n_bus
    p = np.array([-b.p_load for b in case.buses])
    q = np.array([-b.q_load for b in case.buses])
    for g in case.generators:
        if not g.is_slack:
            p[g.bus] += g.p_nominal
    if extra_p is not None:
        p = p + extra_p
    v = np.array([b.v_setpoint for b in case.buses])
    return PfInput(p, q, v)


def _branch_flows(case: GridCase, V: np.ndarray) -> np.ndarray:
    s = np.empty(len(case.branches))
    for k, br in enumerate(case.branches):
        y = 1.0 / complex(br.r, br.x)
        bsh = 0.5j * br.b_charging
        a = br.tap_ratio
        vf, vt = V[br.from_bus], V[br.to_bus]
        i_f = (y + bsh) / (a * a) * vf - y / a * vt
        i_t = (y + bsh) * vt - y / a * vf
        s[k] = max(abs(vf * np.conj(i_f)), abs(vt * np.conj(i_t)))
    return s


def solve_ac(case: GridCase, inp: PfInput, tol: float = 1e-8,
             max_iter: int = 20) -> PfSolution:
    """Newton-Raphson AC power flow from a flat start."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    Y = build_ybus(case)
    n = case.n_bus
    slack = case.slack_bus
    pv = case.pv_buses()
    pq = case.pq_buses()
    pvpq = sorted(pv + pq)
    npvpq, npq = len(pvpq), len(pq)

    vm = np.ones(n)
    va = np.zeros(n)
    for b in case.buses:
        if b.kind is not BusKind.PQ:
            vm[b.id] = inp.v_setpoints[b.id]

    p_spec = inp.p_injection
    q_spec = inp.q_injection

    converged = False
    it = 0
    max_mis = np.inf
    for it in range(max_iter + 1):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        mis = np.concatenate([S.real[pvpq] - p_spec[pvpq],
                              S.imag[pq] - q_spec[pq]])
        max_mis = float(np.max(np.abs(mis))) if mis.size else 0.0
        if not np.isfinite(max_mis):
            break
        if max_mis < tol:
            converged = True
            break
        if it == max_iter:
            break

        Ibus = Y @ V
        diagV = np.diag(V)
        diagI = np.diag(Ibus)
        diagVnorm = np.diag(V / np.abs(V))
        dS_dVa = 1j * diagV @ np.conj(diagI - Y @ diagV)
        dS_dVm = diagV @ np.conj(Y @ diagVnorm) + np.conj(diagI) @ diagVnorm

        J = np.empty((npvpq + npq, npvpq + npq))
        J[:npvpq, :npvpq] = dS_dVa[np.ix_(pvpq, pvpq)].real
        J[:npvpq, npvpq:] = dS_dVm[np.ix_(pvpq, pq)].real
        J[npvpq:, :npvpq] = dS_dVa[np.ix_(pq, pvpq)].imag
        J[npvpq:, npvpq:] = dS_dVm[np.ix_(pq, pq)].imag
        try:
            dx = np.linalg.solve(J, -mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError("singular Jacobian") from exc
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]

    V = vm * np.exp(1j * va)
    S = V * np.conj(Y @ V)
    p_slack = S.real[slack] + case.buses[slack].p_load
    q_gen = np.array([S.imag[g.bus] + case.buses[g.bus].q_load
                      for g in case.generators])
    return PfSolution(
        v_mag=vm, v_ang=va, p_slack=float(p_slack), q_gen=q_gen,
        s_flow=_branch_flows(case, V) if converged else np.full(len(case.branches), np.nan),
        converged=converged, iterations=it, max_mismatch=max_mis,
    )


def solve_dc(case: GridCase, p_injection: np.ndarray):
    """Linear DC power flow.

    Returns ``(theta, p_flow, p_slack)`` with the slack generator output
    recovered from lossless balance, including the slack bus's own load.
    """
    B, flow_map = build_dc_matrices(case)
    slack = case.slack_bus
    keep = [i for i in range(case.n_bus) if i != slack]
    Bred = B[np.ix_(keep, keep)]
    try:
        theta_red = np.linalg.solve(Bred, p_injection[keep])
    except np.linalg.LinAlgError as exc:
        raise PowerFlowError("singular DC system (islanded grid?)") from exc
    theta = np.zeros(case.n_bus)
    theta[keep] = theta_red
    p_flow = flow_map @ theta
    p_slack = -float(np.sum(p_injection[keep])) + case.buses[slack].p_load
    return theta, p_flow, p_slack


# ---------------------------------------------------------------------------
# Output vector contract: [V at PQ buses] ++ [Q at generator buses]
# ++ [apparent flow per branch] ++ [slack generator P].  The ordering is part
# of every persisted model file.

def output_names(case: GridCase) -> list[str]:
    names = [f"V:bus{case.buses[i].orig_id}" for i in case.pq_buses()]
    names += [f"Q:bus{case.buses[g.bus].orig_id}" for g in case.generators]
    names += [f"S:br{k}" for k in range(len(case.branches))]
    names.append("pslack")
    return names


def output_dim(case: GridCase) -> int:
    return len(case.pq_buses()) + len(case.generators) + len(case.branches) + 1


def extract_outputs(case: GridCase, sol: PfSolution) -> np.ndarray:
    if not sol.converged:
        raise PowerFlowError("cannot extract outputs from a non-converged solution")
    return np.concatenate([
        sol.v_mag[case.pq_buses()],
        sol.q_gen,
        sol.s_flow,
        [sol.p_slack],
    ])


def dc_outputs(case: GridCase, p_flow: np.ndarray, p_slack: float) -> np.ndarray:
    """DC solution in the output-vector layout.

    The DC model carries no voltage or reactive information, so V entries
    are fixed at 1.0 and Q entries at 0.0.  Flow entries keep the signed
    from->to DC flow: that keeps them exactly linear in the injections, so
    the residual against the (non-negative) AC apparent flow stays smooth.
    """
    n_pq = len(case.pq_buses())
    return np.concatenate([
        np.ones(n_pq),
        np.zeros(len(case.generators)),
        p_flow,
        [p_slack],
    ])
