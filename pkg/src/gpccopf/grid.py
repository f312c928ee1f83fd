"""Grid case parsing and network matrix assembly.

Case files are a strict subset of the MATPOWER ``.m`` table format
(``mpc.baseMVA`` scalar plus ``mpc.bus``, ``mpc.gen``, ``mpc.branch`` and
``mpc.gencost`` matrices).  All MW/MVAr columns are converted to per-unit on
the system base at parse time, and buses are renumbered to contiguous
0-based internal indices; original ids are kept only for reporting.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

import numpy as np


class CaseError(Exception):
    """Raised for malformed or inconsistent case files."""


class BusKind(Enum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int                 # internal 0-based index
    orig_id: int            # id as written in the case file
    kind: BusKind
    p_load: float           # pu
    q_load: float           # pu
    v_min: float
    v_max: float
    v_setpoint: float       # pu, meaningful for Slack/PV buses
    base_kv: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_charging: float       # total line charging susceptance (pu)
    tap_ratio: float        # 1.0 for plain lines
    s_max: float            # apparent-power rating (pu)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost: tuple[float, float, float]   # (c2, c1, c0) on pu basis
    is_slack: bool
    p_nominal: float        # dispatch from the case file (pu), informational


@dataclass(frozen=True)
class GridCase:
    base_mva: float
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    uncertain_buses: tuple[int, ...] = ()   # internal indices
    id_map: dict[int, int] = field(default_factory=dict)  # orig -> internal

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def slack_bus(self) -> int:
        return next(b.id for b in self.buses if b.kind is BusKind.SLACK)

    @property
    def slack_gen(self) -> int:
        return next(i for i, g in enumerate(self.generators) if g.is_slack)

    def pq_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind is BusKind.PQ]

    def pv_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind is BusKind.PV]

    def controllable_gens(self) -> list[int]:
        """Indices of non-slack generators, in case order."""
        return [i for i, g in enumerate(self.generators) if not g.is_slack]

    def with_uncertain(self, orig_bus_ids) -> "GridCase":
        """Return a copy with the given (original-id) buses marked uncertain."""
        internal = []
        for ob in orig_bus_ids:
            if ob not in self.id_map:
                raise CaseError(f"unknown uncertain bus id {ob}")
            internal.append(self.id_map[ob])
        return GridCase(self.base_mva, self.buses, self.branches,
                        self.generators, tuple(internal), self.id_map)


_MAT_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\];", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.baseMVA\s*=\s*([0-9eE+\-.]+)\s*;")


def _parse_matrix(name: str, body: str) -> list[list[float]]:
    rows = []
    for lineno, line in enumerate(body.splitlines(), start=1):
        line = line.split("%")[0].strip().rstrip(";").strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise CaseError(f"{name}: bad number on row {lineno}: {exc}") from exc
    return rows


def parse_case(text: str) -> GridCase:
    """Parse MATPOWER-style case text into a validated :class:`GridCase`."""
    m = _SCALAR_RE.search(text)
    if m is None:
        raise CaseError("missing mpc.baseMVA")
    base = float(m.group(1))

    tables = {name: _parse_matrix(name, body) for name, body in _MAT_RE.findall(text)}
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise CaseError(f"missing mpc.{required} table")

    id_map: dict[int, int] = {}
    buses: list[Bus] = []
    for i, row in enumerate(tables["bus"]):
        orig = int(row[0])
        if orig in id_map:
            raise CaseError(f"duplicate bus id {orig}")
        id_map[orig] = i
        kind = BusKind(int(row[1]))
        p_load, q_load = row[2] / base, row[3] / base
        if not (np.isfinite(p_load) and np.isfinite(q_load)):
            raise CaseError(f"bus {orig}: non-finite load")
        v_max, v_min = row[11], row[12]
        if not v_min < v_max:
            raise CaseError(f"bus {orig}: Vmin must be < Vmax")
        buses.append(Bus(i, orig, kind, p_load, q_load, v_min, v_max,
                         v_setpoint=1.0, base_kv=row[9]))

    slacks = [b for b in buses if b.kind is BusKind.SLACK]
    if len(slacks) == 0:
        raise CaseError("missing slack bus")
    if len(slacks) > 1:
        raise CaseError("multiple slack buses")
    slack_id = slacks[0].id

    gens: list[Generator] = []
    costs = tables["gencost"]
    if len(costs) != len(tables["gen"]):
        raise CaseError("gencost row count does not match gen table")
    for row, crow in zip(tables["gen"], costs):
        orig = int(row[0])
        if orig not in id_map:
            raise CaseError(f"generator references unknown bus {orig}")
        if int(row[7]) == 0:    # out-of-service unit
            continue
        if int(crow[0]) != 2 or int(crow[3]) != 3:
            raise CaseError("only polynomial (model 2, degree 2) gencost supported")
        # cost coefficients arrive on the MW basis; rescale to pu
        c2, c1, c0 = crow[4] * base * base, crow[5] * base, crow[6]
        if c2 < 0:
            raise CaseError(f"generator at bus {orig}: negative quadratic cost")
        bus = id_map[orig]
        gens.append(Generator(
            bus=bus,
            p_min=row[9] / base, p_max=row[8] / base,
            q_min=row[4] / base, q_max=row[3] / base,
            cost=(c2, c1, c0),
            is_slack=(bus == slack_id),
            p_nominal=row[1] / base,
        ))

    for g in gens:
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseError(f"generator at bus {buses[g.bus].orig_id}: inverted limits")

    # PV/slack setpoints come from the generator Vg column
    vg_rows = [row for row in tables["gen"] if int(row[7]) != 0]
    vset = {id_map[int(row[0])]: row[5] for row in vg_rows}
    buses = [
        Bus(b.id, b.orig_id, b.kind, b.p_load, b.q_load, b.v_min, b.v_max,
            v_setpoint=vset.get(b.id, 1.0), base_kv=b.base_kv)
        for b in buses
    ]
    for b in buses:
        if b.kind is not BusKind.PQ and b.id not in vset:
            raise CaseError(f"bus {b.orig_id} is {b.kind.name} but has no generator")

    branches: list[Branch] = []
    for row in tables["branch"]:
        if len(row) > 10 and int(row[10]) == 0:
            continue
        f_orig, t_orig = int(row[0]), int(row[1])
        for ob in (f_orig, t_orig):
            if ob not in id_map:
                raise CaseError(f"branch references unknown bus {ob}")
        if f_orig == t_orig:
            raise CaseError(f"branch {f_orig}-{t_orig} is a self-loop")
        if row[3] == 0.0:
            raise CaseError(f"branch {f_orig}-{t_orig} has zero reactance")
        rate = row[5]
        s_max = rate / base if rate > 0 else 100.0   # rateA = 0 means unlimited
        tap = row[8] if row[8] != 0.0 else 1.0
        branches.append(Branch(id_map[f_orig], id_map[t_orig],
                               row[2], row[3], row[4], tap, s_max))

    return GridCase(base, buses, branches, gens, (), id_map)


def serialize_case(case: GridCase) -> str:
    """Write a GridCase back out as MATPOWER-style text (round-trip safe)."""
    lines = ["function mpc = case", "mpc.version = '2';",
             f"mpc.baseMVA = {case.base_mva!r};", "mpc.bus = ["]
    base = case.base_mva
    for b in case.buses:
        lines.append(f"\t{b.orig_id}\t{b.kind.value}\t{b.p_load * base!r}"
                     f"\t{b.q_load * base!r}\t0\t0\t1\t1\t0\t{b.base_kv!r}\t1"
                     f"\t{b.v_max!r}\t{b.v_min!r};")
    lines.append("];")
    lines.append("mpc.gen = [")
    for g in case.generators:
        lines.append(f"\t{case.buses[g.bus].orig_id}\t{g.p_nominal * base!r}\t0"
                     f"\t{g.q_max * base!r}\t{g.q_min * base!r}"
                     f"\t{case.buses[g.bus].v_setpoint!r}\t100\t1"
                     f"\t{g.p_max * base!r}\t{g.p_min * base!r};")
    lines.append("];")
    lines.append("mpc.branch = [")
    for br in case.branches:
        tap = 0.0 if br.tap_ratio == 1.0 else br.tap_ratio
        lines.append(f"\t{case.buses[br.from_bus].orig_id}"
                     f"\t{case.buses[br.to_bus].orig_id}\t{br.r!r}\t{br.x!r}"
                     f"\t{br.b_charging!r}\t{br.s_max * base!r}\t0\t0\t{tap!r}\t0\t1;")
    lines.append("];")
    lines.append("mpc.gencost = [")
    for g in case.generators:
        c2, c1, c0 = g.cost
        lines.append(f"\t2\t0\t0\t3\t{c2 / base / base!r}\t{c1 / base!r}\t{c0!r};")
    lines.append("];")
    return "\n".join(lines) + "\n"


def case_hash(case: GridCase) -> str:
    """Stable content hash of the physical system plus uncertain-bus tags."""
    payload = serialize_case(case) + f"uncertain={sorted(case.uncertain_buses)}"
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_bundled_case(name: str) -> GridCase:
    """Load one of the shipped cases (``case9`` or ``case39``)."""
    text = resources.files("gpccopf.cases").joinpath(f"{name}.m").read_text()
    return parse_case(text)


def _check_connected(case: GridCase) -> None:
    seen = {0}
    frontier = [0]
    adj: dict[int, list[int]] = {i: [] for i in range(case.n_bus)}
    for br in case.branches:
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)
    while frontier:
        u = frontier.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                frontier.append(v)
    if len(seen) != case.n_bus:
        raise CaseError("grid is not connected (islanded buses present)")


def build_ybus(case: GridCase) -> np.ndarray:
    """Dense complex bus admittance matrix."""
    n = case.n_bus
    Y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        f, t = br.from_bus, br.to_bus
        y = 1.0 / complex(br.r, br.x)
        bsh = 0.5j * br.b_charging
        a = br.tap_ratio
        Y[f, f] += (y + bsh) / (a * a)
        Y[t, t] += y + bsh
        Y[f, t] -= y / a
        Y[t, f] -= y / a
    return Y


def build_dc_matrices(case: GridCase) -> tuple[np.ndarray, np.ndarray]:
    """Nodal susceptance matrix and branch flow map for the DC model.

    Returns ``(B, flow_map)`` where ``B`` is the full n-by-n susceptance
    matrix and ``flow_map @ theta`` gives per-branch DC flows (pu, oriented
    from -> to).  The reduced system (slack row/column removed) must be
    non-singular, otherwise the grid is islanded.
    """
    _check_connected(case)
    n = case.n_bus
    B = np.zeros((n, n))
    flow_map = np.zeros((len(case.branches), n))
    for k, br in enumerate(case.branches):
        b = 1.0 / (br.x * br.tap_ratio)
        f, t = br.from_bus, br.to_bus
        B[f, f] += b
        B[t, t] += b
        B[f, t] -= b
        B[t, f] -= b
        flow_map[k, f] = b
        flow_map[k, t] = -b
    return B, flow_map
