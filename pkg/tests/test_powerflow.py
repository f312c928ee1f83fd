"""AC/DC power-flow solutions against closed forms and a Gauss-Seidel oracle."""

import numpy as np
import pytest

from gpccopf import grid, powerflow
from gpccopf.powerflow import (PfInput, dc_outputs, extract_outputs,
                               nominal_input, output_dim, output_names,
                               solve_ac, solve_dc, PowerFlowError)

from oracles import gauss_seidel_pf, two_bus_closed_form
from test_grid import make_case_text, two_bus_text


@pytest.fixture(scope="module")
def case2():
    return grid.parse_case(two_bus_text(r=0.0, x=0.1, p_mw=10.0))


def test_two_bus_lossless_closed_form(case2):
    """Load 0.1 pu over x=0.1: V2 sin(th) = -0.01 and V2 cos(th) ~ 1."""
    sol = solve_ac(case2, nominal_input(case2), tol=1e-8)
    assert sol.converged
    assert sol.v_ang[1] == pytest.approx(-0.010000, abs=5e-5)
    assert sol.v_mag[1] == pytest.approx(0.99995, abs=1e-5)


def test_two_bus_matches_quartic_closed_form():
    case = grid.parse_case(two_bus_text(r=0.03, x=0.12, p_mw=40.0,
                                        q_mvar=15.0))
    sol = solve_ac(case, nominal_input(case), tol=1e-10)
    assert sol.converged
    v2, th2 = two_bus_closed_form(0.03, 0.12, 0.40, 0.15)
    assert sol.v_mag[1] == pytest.approx(v2, abs=1e-8)
    assert sol.v_ang[1] == pytest.approx(th2, abs=1e-8)


def test_flat_start_exact_for_zero_injection():
    bus = [
        [1, 3, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
        [2, 1, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
    ]
    gen = [[1, 0, 0, 300, -300, 1.0, 100, 1, 250, 10]]
    br = [[1, 2, 0, 0.1, 0, 0, 0, 0, 0, 0, 1]]
    cost = [[2, 0, 0, 3, 0.1, 5, 1]]
    case = grid.parse_case(make_case_text(bus, gen, br, cost))
    sol = solve_ac(case, nominal_input(case))
    assert sol.converged and sol.iterations == 0
    assert np.allclose(sol.v_mag, 1.0) and np.allclose(sol.v_ang, 0.0)


def test_case9_nominal_vs_gauss_seidel_oracle():
    case = grid.load_bundled_case("case9")
    inp = nominal_input(case)
    sol = solve_ac(case, inp, tol=1e-8)
    assert sol.converged
    assert sol.iterations <= 10
    assert sol.max_mismatch < 1e-8
    vm, va, ok = gauss_seidel_pf(case, inp)
    assert ok
    assert np.max(np.abs(sol.v_mag - vm)) < 1e-6
    assert np.max(np.abs(sol.v_ang - va)) < 1e-6


def test_case39_nominal_converges():
    case = grid.load_bundled_case("case39")
    sol = solve_ac(case, nominal_input(case), tol=1e-8)
    assert sol.converged and sol.iterations <= 10


def test_energy_balance_on_converged_solutions():
    """Generation minus load minus line losses balances to ~0."""
    for name in ("case9", "case39"):
        case = grid.load_bundled_case(name)
        inp = nominal_input(case)
        sol = solve_ac(case, inp)
        assert sol.converged
        V = sol.v_mag * np.exp(1j * sol.v_ang)
        S = V * np.conj(grid.build_ybus(case) @ V)
        # sum of net injections equals total network (loss + charging) power
        gen_p = sol.p_slack + sum(
            inp.p_injection[case.generators[g].bus]
            + case.buses[case.generators[g].bus].p_load
            for g in case.controllable_gens())
        load_p = sum(b.p_load for b in case.buses)
        assert gen_p - load_p == pytest.approx(float(S.real.sum()), abs=1e-8)


def test_newton_quadratic_tail():
    """Mismatch decreases monotonically over the final iterations."""
    case = grid.load_bundled_case("case9")
    inp = nominal_input(case)
    history = []
    for k in range(1, 6):
        history.append(solve_ac(case, inp, tol=1e-30, max_iter=k).max_mismatch)
    tail = [h for h in history if h > 1e-14][-3:]
    assert all(a > b for a, b in zip(tail, tail[1:]))


def test_divergence_flag_not_exception():
    case = grid.parse_case(two_bus_text(p_mw=5000.0))   # far beyond loadability
    sol = solve_ac(case, nominal_input(case), max_iter=15)
    assert not sol.converged
    with pytest.raises(PowerFlowError):
        extract_outputs(case, sol)


# ---------------------------------------------------------------------------
# DC power flow

def test_dc_two_bus_hand_solve(case2):
    p = np.array([0.0, -1.0])
    theta, flow, p_slack = solve_dc(case2, p)
    assert theta[1] == pytest.approx(-0.1)
    assert flow[0] == pytest.approx(1.0)
    assert p_slack == pytest.approx(1.0)


def test_dc_zero_injection(case2):
    theta, flow, p_slack = solve_dc(case2, np.zeros(2))
    assert np.allclose(theta, 0.0) and np.allclose(flow, 0.0)
    assert p_slack == 0.0


def test_dc_triangle_superposition():
    bus = [
        [1, 3, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
        [2, 1, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
        [3, 1, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
    ]
    gen = [[1, 0, 0, 300, -300, 1.0, 100, 1, 250, 10]]
    br = [[1, 2, 0, 0.1, 0, 0, 0, 0, 0, 0, 1],
          [2, 3, 0, 0.1, 0, 0, 0, 0, 0, 0, 1],
          [1, 3, 0, 0.1, 0, 0, 0, 0, 0, 0, 1]]
    cost = [[2, 0, 0, 3, 0.1, 5, 1]]
    case = grid.parse_case(make_case_text(bus, gen, br, cost))
    theta, flow, _ = solve_dc(case, np.array([0.0, -1.0, 0.0]))
    # direct path 1-2 carries 2/3, the detour via bus 3 carries 1/3
    assert flow[0] == pytest.approx(2.0 / 3.0)
    assert flow[1] == pytest.approx(-1.0 / 3.0)
    assert flow[2] == pytest.approx(1.0 / 3.0)


def test_dc_ac_angle_consistency():
    """DC angles track the AC solution closely on the nominal case9 point."""
    case = grid.load_bundled_case("case9")
    inp = nominal_input(case)
    sol = solve_ac(case, inp)
    assert sol.converged
    theta, _, _ = solve_dc(case, inp.p_injection)
    assert np.max(np.abs(sol.v_ang - theta)) < 0.02
    # and the two angle profiles are strongly correlated
    assert np.corrcoef(sol.v_ang, theta)[0, 1] > 0.99


# ---------------------------------------------------------------------------
# Output vector contract

def test_case9_output_length():
    case = grid.load_bundled_case("case9")
    assert output_dim(case) == 6 + 3 + 9 + 1 == 19
    names = output_names(case)
    assert len(names) == 19
    assert names[-1] == "pslack"


def test_case39_output_length():
    case = grid.load_bundled_case("case39")
    assert output_dim(case) == 29 + 10 + 46 + 1 == 86


def test_flat_state_outputs(case2):
    """No-load lossless flat state maps to [1.., 0.., 0.., 0]."""
    zero = PfInput(np.zeros(2), np.zeros(2), np.ones(2))
    sol = solve_ac(case2, zero)
    y = extract_outputs(case2, sol)
    assert y == pytest.approx(np.array([1.0, 0.0, 0.0, 0.0]), abs=1e-12)


def test_dc_outputs_convention(case2):
    p = np.array([0.0, -1.0])
    _, flow, p_slack = solve_dc(case2, p)
    y = dc_outputs(case2, flow, p_slack)
    assert y[0] == 1.0          # V slots pinned at 1.0
    assert y[1] == 0.0          # Q slots pinned at 0.0
    assert y[2] == pytest.approx(flow[0])
    assert y[3] == pytest.approx(p_slack)
