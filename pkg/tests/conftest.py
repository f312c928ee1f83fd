"""Shared fixtures: the case9 pipeline trained once per session.

The fixture parameters deliberately mirror configs/ieee9.default.json so
unit tests and the acceptance suite exercise the shipped defaults.
"""

from __future__ import annotations

import json
import pathlib

import numpy as np
import pytest

from gpccopf import ccopf, dataset, grid, hybrid
from gpccopf.powerflow import output_names

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def cfg9() -> dict:
    with open(CONFIG_DIR / "ieee9.default.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def case9(cfg9):
    case = grid.load_bundled_case("case9")
    return case.with_uncertain(cfg9["uncertain"]["buses"])


@pytest.fixture(scope="session")
def spec9(case9, cfg9):
    by_orig = {b.orig_id: b.id for b in case9.buses}
    return dataset.UncertaintySpec(
        bus_ids=tuple(by_orig[ob] for ob in cfg9["uncertain"]["buses"]),
        sigma=tuple(cfg9["uncertain"]["sigma"]))


@pytest.fixture(scope="session")
def samples9(case9, spec9, cfg9):
    ds = cfg9["dataset"]
    X = dataset.sample_inputs(case9, spec9, ds["n"], ds["seed"],
                              mode=ds["sampling"], scale=ds["scale"])
    samples, n_div = dataset.generate(case9, spec9, X)
    assert n_div == 0
    return samples


@pytest.fixture(scope="session")
def split9(samples9, cfg9):
    ds = cfg9["dataset"]
    return dataset.split(samples9, ds["train_fraction"], ds["split_seed"])


@pytest.fixture(scope="session")
def model9(split9, case9, spec9, cfg9):
    train, _ = split9
    gp_cfg = cfg9["gp"]
    return hybrid.fit_hybrid(
        train, case9, grid.case_hash(case9),
        dataset.input_names(case9, spec9), output_names(case9),
        mode="exact", restarts=gp_cfg["restarts"], seed=gp_cfg["seed"],
        maxiter=gp_cfg["maxiter"])


@pytest.fixture(scope="session")
def cc_config9(cfg9) -> ccopf.CcConfig:
    cc = cfg9["ccopf"]
    return ccopf.CcConfig(epsilon=cc["epsilon"], kkt_tol=cc["kkt_tol"],
                          max_iter=cc["max_iter"], feas_tol=cc["feas_tol"])


@pytest.fixture(scope="session")
def det_solution9(case9, model9, spec9, cc_config9):
    sol = ccopf.solve(case9, model9, spec9, cc_config9, deterministic=True)
    assert sol.status == "optimal"
    return sol


@pytest.fixture(scope="session")
def cc_solution9(case9, model9, spec9, cc_config9, det_solution9):
    sol = ccopf.solve(case9, model9, spec9, cc_config9,
                      start=det_solution9.decision)
    assert sol.status == "optimal"
    return sol
