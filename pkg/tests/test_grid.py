"""Case parsing, validation, and admittance/susceptance assembly."""

import numpy as np
import pytest

from gpccopf import grid
from gpccopf.grid import BusKind, CaseError


def make_case_text(bus_rows, gen_rows, branch_rows, gencost_rows,
                   base=100.0) -> str:
    def table(name, rows):
        body = "\n".join("\t" + "\t".join(str(v) for v in r) + ";"
                         for r in rows)
        return f"mpc.{name} = [\n{body}\n];"
    return "\n".join([
        "function mpc = t", "mpc.version = '2';",
        f"mpc.baseMVA = {base};",
        table("bus", bus_rows), table("gen", gen_rows),
        table("branch", branch_rows), table("gencost", gencost_rows),
    ])


def two_bus_text(r=0.0, x=0.1, p_mw=10.0, q_mvar=0.0, rate=0.0):
    bus = [
        [1, 3, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
        [2, 1, p_mw, q_mvar, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
    ]
    gen = [[1, 0, 0, 300, -300, 1.0, 100, 1, 250, 10]]
    branch = [[1, 2, r, x, 0, rate, 0, 0, 0, 0, 1]]
    cost = [[2, 0, 0, 3, 0.1, 5, 1]]
    return make_case_text(bus, gen, branch, cost)


# ---------------------------------------------------------------------------
# Parsing

def test_case9_counts():
    case = grid.load_bundled_case("case9")
    assert case.n_bus == 9
    assert len(case.generators) == 3
    assert len(case.branches) == 9
    assert case.base_mva == 100.0


def test_case39_counts():
    case = grid.load_bundled_case("case39")
    assert case.n_bus == 39
    assert len(case.generators) == 10
    assert len(case.branches) == 46


def test_per_unit_conversion():
    case = grid.parse_case(two_bus_text(p_mw=10.0, q_mvar=5.0))
    assert case.buses[1].p_load == pytest.approx(0.1)
    assert case.buses[1].q_load == pytest.approx(0.05)
    g = case.generators[0]
    assert g.p_max == pytest.approx(2.5)
    # cost is rescaled to the pu basis: c2 * base^2, c1 * base
    assert g.cost == pytest.approx((0.1 * 100 ** 2, 5 * 100, 1))


def test_internal_renumbering_keeps_orig_ids():
    text = two_bus_text().replace("\t1\t3", "\t7\t3").replace(
        "\t2\t1", "\t8\t1").replace("\t1\t2", "\t7\t8").replace(
        "mpc.gen = [\n\t1", "mpc.gen = [\n\t7")
    case = grid.parse_case(text)
    assert [b.id for b in case.buses] == [0, 1]
    assert [b.orig_id for b in case.buses] == [7, 8]
    assert case.id_map == {7: 0, 8: 1}


def test_two_slack_buses_rejected():
    text = two_bus_text().replace("\t2\t1", "\t2\t3")
    with pytest.raises(CaseError, match="multiple slack"):
        grid.parse_case(text)


def test_missing_slack_rejected():
    text = two_bus_text().replace("\t1\t3", "\t1\t2")
    with pytest.raises(CaseError, match="missing slack"):
        grid.parse_case(text)


def test_dangling_branch_reference_rejected():
    text = two_bus_text().replace("\t1\t2\t0.0\t0.1", "\t1\t5\t0.0\t0.1")
    with pytest.raises(CaseError, match="unknown bus"):
        grid.parse_case(text)


def test_zero_reactance_branch_rejected():
    with pytest.raises(CaseError, match="zero reactance"):
        grid.parse_case(two_bus_text(x=0.0))


def test_duplicate_bus_id_rejected():
    text = two_bus_text().replace("\t2\t1", "\t1\t1")
    with pytest.raises(CaseError, match="duplicate"):
        grid.parse_case(text)


def test_with_uncertain_maps_orig_ids():
    case = grid.load_bundled_case("case9").with_uncertain([5, 9])
    assert case.uncertain_buses == (case.id_map[5], case.id_map[9])
    with pytest.raises(CaseError, match="unknown uncertain"):
        case.with_uncertain([99])


# ---------------------------------------------------------------------------
# Round-trip and hashing

def test_parse_serialize_round_trip():
    case = grid.load_bundled_case("case9")
    again = grid.parse_case(grid.serialize_case(case))
    assert grid.serialize_case(again) == grid.serialize_case(case)
    assert again.n_bus == case.n_bus
    assert again.branches == case.branches
    assert again.generators == case.generators


def test_case_hash_sensitive_to_uncertain_tags():
    case = grid.load_bundled_case("case9")
    h0 = grid.case_hash(case)
    h1 = grid.case_hash(case.with_uncertain([5, 9]))
    assert h0 != h1
    assert h1 == grid.case_hash(case.with_uncertain([9, 5]))   # order-free
    assert len(h0) == 16


# ---------------------------------------------------------------------------
# Admittance assembly

def test_ybus_two_bus_hand_value():
    case = grid.parse_case(two_bus_text(r=0.0, x=0.1))
    Y = grid.build_ybus(case)
    expect = np.array([[-10j, 10j], [10j, -10j]])
    assert np.allclose(Y, expect, atol=1e-12)


def test_ybus_symmetric_unit_taps():
    case = grid.load_bundled_case("case9")
    Y = grid.build_ybus(case)
    assert np.max(np.abs(Y - Y.T)) < 1e-12


def test_ybus_row_sums_are_shunt_only():
    """With b_charging zeroed, every Ybus row sums to zero (no bus shunts)."""
    case = grid.load_bundled_case("case9")
    stripped = grid.GridCase(
        case.base_mva, case.buses,
        [grid.Branch(b.from_bus, b.to_bus, b.r, b.x, 0.0, b.tap_ratio, b.s_max)
         for b in case.branches],
        case.generators, case.uncertain_buses, case.id_map)
    Y = grid.build_ybus(stripped)
    assert np.max(np.abs(Y.sum(axis=1))) < 1e-12


def test_dc_matrices_two_bus():
    case = grid.parse_case(two_bus_text(x=0.1))
    B, flow_map = grid.build_dc_matrices(case)
    keep = [i for i in range(2) if i != case.slack_bus]
    assert B[np.ix_(keep, keep)] == pytest.approx(np.array([[10.0]]))


def test_dc_matrices_triangle():
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
    B, _ = grid.build_dc_matrices(case)
    red = B[1:, 1:]
    assert red == pytest.approx(np.array([[20.0, -10.0], [-10.0, 20.0]]))


def test_reduced_dc_matrix_positive_definite():
    for name in ("case9", "case39"):
        case = grid.load_bundled_case(name)
        B, _ = grid.build_dc_matrices(case)
        keep = [i for i in range(case.n_bus) if i != case.slack_bus]
        np.linalg.cholesky(B[np.ix_(keep, keep)])   # raises if not PD


def test_islanded_case_rejected():
    bus = [
        [1, 3, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
        [2, 1, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
        [3, 1, 0, 0, 0, 0, 1, 1, 0, 345, 1, 1.1, 0.9],
    ]
    gen = [[1, 0, 0, 300, -300, 1.0, 100, 1, 250, 10]]
    br = [[1, 2, 0, 0.1, 0, 0, 0, 0, 0, 0, 1]]   # bus 3 unreachable
    cost = [[2, 0, 0, 3, 0.1, 5, 1]]
    case = grid.parse_case(make_case_text(bus, gen, br, cost))
    with pytest.raises(CaseError, match="not connected"):
        grid.build_dc_matrices(case)
