"""Training-data generation for the hybrid surrogate.

Inputs are the controllable (non-slack) generator setpoints followed by the
net stochastic injections at the uncertain buses.  Every sample is replayed
through both power-flow models with identical injections; the learning
target for the GP stage is the AC-minus-DC residual.  All randomness is
seed-derived per sample so parallel and serial generation agree bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .grid import GridCase, case_hash
from .powerflow import (PfInput, dc_outputs, extract_outputs, output_names,
                        solve_ac, solve_dc)


class DatasetError(Exception):
    pass


@dataclass(frozen=True)
class UncertaintySpec:
    """Zero-mean independent Gaussian injection uncertainty per tagged bus."""
    bus_ids: tuple[int, ...]        # internal bus indices
    sigma: tuple[float, ...]        # pu, per bus
    nominal: tuple[float, ...] = ()  # nominal extra injection, defaults to 0

    def __post_init__(self):
        if len(self.bus_ids) != len(self.sigma):
            raise DatasetError("sigma length must match bus_ids")
        if any(s < 0 for s in self.sigma):
            raise DatasetError("sigma must be non-negative")
        if not self.nominal:
            object.__setattr__(self, "nominal", (0.0,) * len(self.bus_ids))

    @property
    def sigma_arr(self) -> np.ndarray:
        return np.asarray(self.sigma)

    @property
    def nominal_arr(self) -> np.ndarray:
        return np.asarray(self.nominal)

    def total_variance(self) -> float:
        return float(np.sum(self.sigma_arr ** 2))


@dataclass
class Sample:
    x: np.ndarray
    y_ac: np.ndarray
    y_dc: np.ndarray
    r: np.ndarray
    limits_exceeded: bool   # any physical limit violated at the AC solution


def input_names(case: GridCase, spec: UncertaintySpec) -> list[str]:
    names = [f"pg:bus{case.buses[case.generators[g].bus].orig_id}"
             for g in case.controllable_gens()]
    names += [f"u:bus{case.buses[b].orig_id}" for b in spec.bus_ids]
    return names


def input_dim(case: GridCase, spec: UncertaintySpec) -> int:
    return len(case.controllable_gens()) + len(spec.bus_ids)


def make_pf_input(case: GridCase, spec: UncertaintySpec, x: np.ndarray) -> PfInput:
    """Map an input vector to bus-level injections for both PF models."""
    nc = len(case.controllable_gens())
    p = np.array([-b.p_load for b in case.buses])
    q = np.array([-b.q_load for b in case.buses])
    for j, gi in enumerate(case.controllable_gens()):
        p[case.generators[gi].bus] += x[j]
    for j, bus in enumerate(spec.bus_ids):
        p[bus] += x[nc + j]
    v = np.array([b.v_setpoint for b in case.buses])
    return PfInput(p, q, v)


def sample_inputs(case: GridCase, spec: UncertaintySpec, n: int, seed: int,
                  mode: str = "box", scale: float = 0.15) -> np.ndarray:
    """Draw input vectors; sample i uses derived seed ``seed + i``.

    ``box`` draws setpoints uniformly over the generator limits; in
    ``nominal_gaussian`` mode they are Gaussian around the case-file dispatch
    with std ``scale`` times the box width, clipped to the limits.
    """
    if n < 1:
        raise DatasetError("need at least one sample")
    ctrl = [case.generators[g] for g in case.controllable_gens()]
    lo = np.array([g.p_min for g in ctrl])
    hi = np.array([g.p_max for g in ctrl])
    nom = np.array([g.p_nominal for g in ctrl])
    X = np.empty((n, len(ctrl) + len(spec.bus_ids)))
    for i in range(n):
        rng = np.random.default_rng(seed + i)
        if mode == "box":
            pg = rng.uniform(lo, hi)
        elif mode == "nominal_gaussian":
            pg = np.clip(nom + rng.normal(0.0, scale * (hi - lo)), lo, hi)
        else:
            raise DatasetError(f"unknown sampling mode {mode!r}")
        u = spec.nominal_arr + rng.normal(0.0, spec.sigma_arr) \
            if spec.bus_ids else np.empty(0)
        X[i] = np.concatenate([pg, u])
    return X


def generate(case: GridCase, spec: UncertaintySpec, inputs: np.ndarray,
             tol: float = 1e-8, max_iter: int = 20) -> tuple[list[Sample], int]:
    """Run both power-flow models per input; returns (samples, n_diverged)."""
    samples: list[Sample] = []
    diverged = 0
    for x in inputs:
        pf_in = make_pf_input(case, spec, x)
        sol = solve_ac(case, pf_in, tol=tol, max_iter=max_iter)
        if not sol.converged:
            diverged += 1
            continue
        y_ac = extract_outputs(case, sol)
        _, p_flow, p_slack = solve_dc(case, pf_in.p_injection)
        y_dc = dc_outputs(case, p_flow, p_slack)
        samples.append(Sample(
            x=np.asarray(x, dtype=float),
            y_ac=y_ac, y_dc=y_dc, r=y_ac - y_dc,
            limits_exceeded=_limits_exceeded(case, sol),
        ))
    if diverged > 0.5 * len(inputs):
        raise DatasetError(
            f"AC power flow diverged on {diverged}/{len(inputs)} samples; "
            "the sampling region is unphysical for this grid")
    return samples, diverged


def _limits_exceeded(case, sol) -> bool:
    for i in case.pq_buses():
        b = case.buses[i]
        if not (b.v_min <= sol.v_mag[i] <= b.v_max):
            return True
    for g, q in zip(case.generators, sol.q_gen):
        if not (g.q_min <= q <= g.q_max):
            return True
    slack = case.generators[case.slack_gen]
    if not (slack.p_min <= sol.p_slack <= slack.p_max):
        return True
    return any(s > br.s_max for s, br in zip(sol.s_flow, case.branches))


# ---------------------------------------------------------------------------
# Standardization (population convention: divisor n, fixed for portable
# model files; constant columns are flagged and passed through unscaled).

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray   # bool mask of flagged constant columns

    @classmethod
    def fit(cls, M: np.ndarray) -> "Standardizer":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if M.shape[0] < 2:
            raise DatasetError("need at least 2 rows to standardize")
        mean = M.mean(axis=0)
        std = M.std(axis=0)       # population (divisor n)
        constant = std <= 0.0
        std = np.where(constant, 1.0, std)
        return cls(mean, std, constant)

    def apply(self, v: np.ndarray) -> np.ndarray:
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def invert(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "constant": self.constant.astype(int).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["std"]),
                   np.array(d["constant"], dtype=bool))


def split(samples: list[Sample], train_fraction: float,
          seed: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministic shuffled split; train size is floored."""
    if not 0 < train_fraction < 1:
        raise DatasetError("train_fraction must be in (0, 1)")
    if len(samples) < 2:
        raise DatasetError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(len(samples) * train_fraction)
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


def stack(samples: list[Sample]):
    """(X, Y_ac, Y_dc, R) row-stacked matrices."""
    X = np.array([s.x for s in samples])
    Yac = np.array([s.y_ac for s in samples])
    Ydc = np.array([s.y_dc for s in samples])
    R = np.array([s.r for s in samples])
    return X, Yac, Ydc, R


# ---------------------------------------------------------------------------
# Persistence: CSV of samples plus a JSON sidecar with provenance.

def dataset_to_csv(case: GridCase, spec: UncertaintySpec,
                   samples: list[Sample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    xn = input_names(case, spec)
    yn = output_names(case)
    w.writerow(xn + [f"ac:{n}" for n in yn] + [f"dc:{n}" for n in yn]
               + ["limits_exceeded"])
    for s in samples:
        w.writerow([repr(float(v)) for v in s.x]
                   + [repr(float(v)) for v in s.y_ac]
                   + [repr(float(v)) for v in s.y_dc]
                   + [int(s.limits_exceeded)])
    return buf.getvalue()


def dataset_from_csv(case: GridCase, spec: UncertaintySpec,
                     text: str) -> list[Sample]:
    rows = list(csv.reader(io.StringIO(text)))
    header, rows = rows[0], rows[1:]
    d_in = input_dim(case, spec)
    d_out = len(output_names(case))
    expected = (input_names(case, spec)
                + [f"ac:{n}" for n in output_names(case)]
                + [f"dc:{n}" for n in output_names(case)] + ["limits_exceeded"])
    if header != expected:
        raise DatasetError("CSV header does not match the case/spec column contract")
    samples = []
    for row in rows:
        vals = np.array([float(v) for v in row[:-1]])
        x = vals[:d_in]
        y_ac = vals[d_in:d_in + d_out]
        y_dc = vals[d_in + d_out:d_in + 2 * d_out]
        samples.append(Sample(x, y_ac, y_dc, y_ac - y_dc,
                              limits_exceeded=bool(int(row[-1]))))
    return samples


def dataset_metadata(case: GridCase, spec: UncertaintySpec, seed: int,
                     n_requested: int, n_diverged: int,
                     std_in: Standardizer, std_out: Standardizer) -> dict:
    return {
        "case_hash": case_hash(case),
        "spec": {"bus_ids": [case.buses[b].orig_id for b in spec.bus_ids],
                 "sigma": list(spec.sigma), "nominal": list(spec.nominal)},
        "seed": seed,
        "n_requested": n_requested,
        "n_diverged": n_diverged,
        "standardizer_inputs": std_in.to_dict(),
        "standardizer_ac_outputs": std_out.to_dict(),
        "standardization": "population divisor n",
    }
