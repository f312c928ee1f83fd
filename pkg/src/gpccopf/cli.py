"""Config-driven command-line pipeline.

Commands mirror the pipeline order: ``case-info``, ``gen-data``, ``train``,
``solve``, ``validate``, ``compare``.  Every artifact embeds the config
snapshot and the SHA-256 hashes of its upstream artifacts, so the whole
provenance chain is verifiable offline; wall-time fields are recorded but
excluded from hashing.  All seeds are explicit in the config -- nothing
falls back to the wall clock.

Exit codes: 0 success, 2 config error, 3 solver infeasible, 4 artifact
hash mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import ccopf, dataset, grid, hybrid, validate
from .powerflow import output_names

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_HASH = 4


class ConfigError(Exception):
    pass


class HashMismatch(Exception):
    pass


class Infeasible(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration

@dataclass
class ExperimentConfig:
    case: str                       # bundled name or path to a .m file
    uncertain_buses: list[int]      # original bus ids
    sigma: list[float]
    nominal: list[float]
    dataset_n: int
    dataset_seed: int
    sampling: str                   # box | nominal_gaussian
    sampling_scale: float
    train_fraction: float
    split_seed: int
    gp_mode: str                    # exact | sparse
    gp_m: int
    gp_restarts: int
    gp_seed: int
    gp_maxiter: int
    epsilon: float
    kkt_tol: float
    max_iter: int
    feas_tol: float
    n_mc: int
    mc_seed: int
    scenario_counts: list[int]
    scenario_seed: int
    out_dir: str
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            unc = d["uncertain"]
            ds = d["dataset"]
            gp = d["gp"]
            cc = d["ccopf"]
            va = d["validate"]
            cfg = cls(
                case=d["case"],
                uncertain_buses=list(unc["buses"]),
                sigma=[float(s) for s in unc["sigma"]],
                nominal=[float(v) for v in
                         unc.get("nominal", [0.0] * len(unc["buses"]))],
                dataset_n=int(ds["n"]),
                dataset_seed=int(ds["seed"]),
                sampling=ds.get("sampling", "box"),
                sampling_scale=float(ds.get("scale", 0.15)),
                train_fraction=float(ds.get("train_fraction", 0.8)),
                split_seed=int(ds["split_seed"]),
                gp_mode=gp.get("mode", "exact"),
                gp_m=int(gp.get("m", 50)),
                gp_restarts=int(gp.get("restarts", 2)),
                gp_seed=int(gp["seed"]),
                gp_maxiter=int(gp.get("maxiter", 200)),
                epsilon=float(cc.get("epsilon", 0.025)),
                kkt_tol=float(cc.get("kkt_tol", 1e-9)),
                max_iter=int(cc.get("max_iter", 200)),
                feas_tol=float(cc.get("feas_tol", 1e-6)),
                n_mc=int(va["n_mc"]),
                mc_seed=int(va["seed"]),
                scenario_counts=[int(n) for n in
                                 va.get("scenario_counts", [])],
                scenario_seed=int(va.get("scenario_seed", 0)),
                out_dir=d.get("out_dir", "out"),
                raw=d,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc
        if len(cfg.sigma) != len(cfg.uncertain_buses):
            raise ConfigError("sigma length must match uncertain bus list")
        if cfg.sampling not in ("box", "nominal_gaussian"):
            raise ConfigError(f"unknown sampling mode {cfg.sampling!r}")
        if cfg.gp_mode not in ("exact", "sparse"):
            raise ConfigError(f"unknown gp mode {cfg.gp_mode!r}")
        return cfg

    def load_case(self) -> grid.GridCase:
        if self.case in ("case9", "case39"):
            case = grid.load_bundled_case(self.case)
        elif os.path.exists(self.case):
            with open(self.case) as fh:
                case = grid.parse_case(fh.read())
        else:
            raise ConfigError(f"case {self.case!r} is neither bundled "
                              "nor an existing file")
        return case.with_uncertain(self.uncertain_buses)

    def uncertainty(self, case: grid.GridCase) -> dataset.UncertaintySpec:
        by_orig = {b.orig_id: b.id for b in case.buses}
        try:
            ids = tuple(by_orig[ob] for ob in self.uncertain_buses)
        except KeyError as exc:
            raise ConfigError(f"uncertain bus {exc} not in case") from exc
        return dataset.UncertaintySpec(bus_ids=ids, sigma=tuple(self.sigma),
                                       nominal=tuple(self.nominal))

    def cc_config(self) -> ccopf.CcConfig:
        return ccopf.CcConfig(epsilon=self.epsilon, kkt_tol=self.kkt_tol,
                              max_iter=self.max_iter, feas_tol=self.feas_tol)


# ---------------------------------------------------------------------------
# Artifact helpers

def _strip_timings(obj):
    """Recursive copy with every 'timings' mapping removed (hash stability)."""
    if isinstance(obj, dict):
        return {k: _strip_timings(v) for k, v in obj.items()
                if k != "timings"}
    if isinstance(obj, list):
        return [_strip_timings(v) for v in obj]
    return obj


def artifact_hash(payload) -> str:
    """Content hash of a JSON-able artifact, wall times excluded."""
    if isinstance(payload, str):
        data = payload.encode()
    else:
        data = json.dumps(_strip_timings(payload), sort_keys=True).encode()
    return hashlib.sha256(data).hexdigest()[:16]


def _write_json(path: str, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _read_json(path: str, what: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {what} at {path}: {exc}") from exc


def _provenance(cfg: ExperimentConfig, case, **upstream) -> dict:
    # the output location is not part of the experiment's identity
    snapshot = {k: v for k, v in cfg.raw.items() if k != "out_dir"}
    return {"config_snapshot": snapshot, "case_hash": grid.case_hash(case),
            **upstream}


# ---------------------------------------------------------------------------
# Commands

def cmd_case_info(cfg: ExperimentConfig, out_dir: str) -> int:
    case = cfg.load_case()
    print(f"case: {cfg.case}")
    print(f"buses: {case.n_bus}  generators: {len(case.generators)}  "
          f"branches: {len(case.branches)}")
    print(f"base MVA: {case.base_mva}")
    print(f"slack bus: {case.buses[case.slack_bus].orig_id}")
    print("uncertain buses: "
          f"{sorted(case.buses[i].orig_id for i in case.uncertain_buses)}")
    print(f"case_hash: {grid.case_hash(case)}")
    return EXIT_OK


def cmd_gen_data(cfg: ExperimentConfig, out_dir: str) -> int:
    case = cfg.load_case()
    spec = cfg.uncertainty(case)
    X = dataset.sample_inputs(case, spec, cfg.dataset_n, cfg.dataset_seed,
                              mode=cfg.sampling, scale=cfg.sampling_scale)
    samples, n_div = dataset.generate(case, spec, X)
    csv_text = dataset.dataset_to_csv(case, spec, samples)
    with open(os.path.join(out_dir, "dataset.csv"), "w") as fh:
        fh.write(csv_text)
    meta = {
        "provenance": _provenance(cfg, case,
                                  dataset_hash=artifact_hash(csv_text)),
        "spec": {"buses": cfg.uncertain_buses, "sigma": cfg.sigma,
                 "nominal": cfg.nominal},
        "n_requested": cfg.dataset_n,
        "n_kept": len(samples),
        "n_diverged": n_div,
        "seed": cfg.dataset_seed,
        "sampling": cfg.sampling,
    }
    _write_json(os.path.join(out_dir, "dataset.meta.json"), meta)
    print(f"dataset: {len(samples)} samples ({n_div} diverged), "
          f"hash {meta['provenance']['dataset_hash']}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out_dir: str) -> int:
    case = cfg.load_case()
    spec = cfg.uncertainty(case)
    meta = _read_json(os.path.join(out_dir, "dataset.meta.json"),
                      "dataset metadata")
    if meta["provenance"]["case_hash"] != grid.case_hash(case):
        raise HashMismatch("dataset was generated for a different case")
    with open(os.path.join(out_dir, "dataset.csv")) as fh:
        csv_text = fh.read()
    if artifact_hash(csv_text) != meta["provenance"]["dataset_hash"]:
        raise HashMismatch("dataset.csv does not match its recorded hash")
    samples = dataset.dataset_from_csv(case, spec, csv_text)
    train, test = dataset.split(samples, cfg.train_fraction, cfg.split_seed)
    t0 = time.perf_counter()
    model = hybrid.fit_hybrid(
        train, case, grid.case_hash(case),
        dataset.input_names(case, spec), output_names(case),
        mode=cfg.gp_mode, m=cfg.gp_m, restarts=cfg.gp_restarts,
        seed=cfg.gp_seed, maxiter=cfg.gp_maxiter)
    train_time = time.perf_counter() - t0

    Xt, Yt, _, _ = dataset.stack(test)
    rmse = np.sqrt(((model.predict_mean_batch(Xt) - Yt) ** 2).mean(axis=0))
    table = ["held-out RMSE (physical units, "
             f"{len(test)} test samples)"]
    table += [f"{n:<12} {e:.3e}" for n, e in zip(model.output_names, rmse)]
    rmse_text = "\n".join(table) + "\n"
    with open(os.path.join(out_dir, f"rmse.{cfg.gp_mode}.txt"), "w") as fh:
        fh.write(rmse_text)

    payload = model.to_dict()
    payload["provenance"] = _provenance(
        cfg, case, dataset_hash=meta["provenance"]["dataset_hash"])
    payload["timings"] = {"train_time_s": train_time}
    path = os.path.join(out_dir, f"model.{cfg.gp_mode}.json")
    _write_json(path, payload)
    print(f"model ({cfg.gp_mode}): {path}, hash {artifact_hash(payload)}, "
          f"max held-out RMSE {rmse.max():.3e}")
    return EXIT_OK


def _load_model(cfg: ExperimentConfig, out_dir: str, case,
                mode: str) -> tuple[hybrid.HybridModel, str]:
    path = os.path.join(out_dir, f"model.{mode}.json")
    payload = _read_json(path, f"{mode} model")
    if payload.get("case_hash") != grid.case_hash(case):
        raise HashMismatch(f"model {path} was trained on a different case "
                           "(artifact hash mismatch)")
    return hybrid.HybridModel.from_dict(payload), artifact_hash(payload)


def cmd_solve(cfg: ExperimentConfig, out_dir: str) -> int:
    case = cfg.load_case()
    spec = cfg.uncertainty(case)
    model, model_hash = _load_model(cfg, out_dir, case, cfg.gp_mode)
    cc_cfg = cfg.cc_config()
    det = ccopf.solve(case, model, spec, cc_cfg, deterministic=True)
    cc = ccopf.solve(case, model, spec, cc_cfg, start=det.decision)
    payload = {
        "provenance": _provenance(cfg, case, model_hash=model_hash),
        "deterministic": det.to_dict(),
        "cc": cc.to_dict(),
    }
    _write_json(os.path.join(out_dir, "solution.json"), payload)
    print(f"deterministic: {det.status}, cost {det.expected_cost:.4f}")
    print(f"cc (eps={cfg.epsilon}): {cc.status}, cost {cc.expected_cost:.4f}")
    if cc.status == "infeasible":
        raise Infeasible("chance-constrained dispatch is infeasible")
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig, out_dir: str) -> int:
    case = cfg.load_case()
    spec = cfg.uncertainty(case)
    sol = _read_json(os.path.join(out_dir, "solution.json"), "solution")
    if sol["provenance"]["case_hash"] != grid.case_hash(case):
        raise HashMismatch("solution was produced for a different case")
    _, model_hash = _load_model(cfg, out_dir, case, cfg.gp_mode)
    if sol["provenance"]["model_hash"] != model_hash:
        raise HashMismatch("solution was produced from a different model")
    dec = ccopf.DispatchDecision(
        p_g=np.array(sol["cc"]["decision"]["p_g"]),
        alpha=np.array(sol["cc"]["decision"]["alpha"]))
    rep = validate.mc_validate(case, dec, spec, cfg.n_mc, cfg.mc_seed)
    payload = {
        "provenance": _provenance(cfg, case, model_hash=model_hash,
                                  solution_hash=artifact_hash(sol)),
        "mc": rep.to_dict(),
    }
    _write_json(os.path.join(out_dir, "mc_report.json"), payload)
    print(f"failure probability: {rep.failure_probability:.4f} "
          f"({rep.n_samples} samples, {rep.n_diverged} diverged)")
    return EXIT_OK


def cmd_compare(cfg: ExperimentConfig, out_dir: str) -> int:
    case = cfg.load_case()
    spec = cfg.uncertainty(case)
    models = {}
    hashes = {}
    for mode in ("exact", "sparse"):
        path = os.path.join(out_dir, f"model.{mode}.json")
        if os.path.exists(path):
            models[mode], hashes[mode] = _load_model(cfg, out_dir, case, mode)
    if "exact" not in models:
        raise ConfigError("compare needs a trained exact model "
                          "(run `train` with gp mode exact first)")
    rep = validate.compare(case, spec, models, cfg.cc_config(),
                           cfg.scenario_counts, cfg.n_mc, cfg.mc_seed,
                           scenario_seed=cfg.scenario_seed)
    with open(os.path.join(out_dir, "compare.csv"), "w") as fh:
        fh.write(rep.to_csv())
    with open(os.path.join(out_dir, "compare.txt"), "w") as fh:
        fh.write(rep.to_text())
    payload = {
        "provenance": _provenance(cfg, case, model_hashes=hashes),
        "report": rep.to_dict(),
    }
    _write_json(os.path.join(out_dir, "compare.json"), payload)
    print(rep.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "case-info": cmd_case_info,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "solve": cmd_solve,
    "validate": cmd_validate,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gpccopf",
        description="Hybrid GP surrogate chance-constrained dispatch pipeline")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", default=None,
                   help="output directory (default: config's out_dir)")
    p.add_argument("--seed-override", type=int, default=None,
                   help="replace the dataset seed (for sweep runs)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.load(args.config)
        if args.seed_override is not None:
            cfg.dataset_seed = args.seed_override
            cfg.raw = dict(cfg.raw)
            cfg.raw.setdefault("dataset", {})
            cfg.raw["dataset"] = dict(cfg.raw["dataset"],
                                      seed=args.seed_override)
        out_dir = args.out if args.out is not None else cfg.out_dir
        os.makedirs(out_dir, exist_ok=True)
        return COMMANDS[args.command](cfg, out_dir)
    except HashMismatch as exc:
        print(json.dumps({"error": "artifact hash mismatch",
                          "detail": str(exc)}), file=sys.stderr)
        return EXIT_HASH
    except Infeasible as exc:
        print(json.dumps({"error": "infeasible", "detail": str(exc)}),
              file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, grid.CaseError, dataset.DatasetError) as exc:
        print(json.dumps({"error": "config error", "detail": str(exc)}),
              file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
