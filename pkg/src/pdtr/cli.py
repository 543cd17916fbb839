"""Command-line surface: simulate, fit, evaluate, mc, winratio, irl, report.

Every command is deterministic given its flags (all randomness flows
from explicit seeds) and echoes its effective configuration into the
outputs it writes.  Flag values override config-file values, which
override defaults.

Exit codes: 0 success, 2 usage error, 3 data validation, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Optional

import numpy as np

from . import streams
from .data_model import Dataset, Standardization, load_csv, split_even, standardize_outcomes, write_csv
from .errors import DataValidationError, NumericalError
from .inference import aipw_value, confidence_ellipsoid, universal_lambda_set
from .irl import CompositeSpec, estimate_lambda, sphere_grid
from .prioritized import DissimilaritySpec, fit_prioritized
from .q_regression import FeatureBasis, QModelStack, backward_induce, make_engine
from .regime import regime_document, regime_from_document
from .sim_engine import GenerativeModel, MCConfig, fixed_regime_from_values, run_mc
from .win_ratio import WinRatioSpec, cyclic_triples, win_ratio

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _effective(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge defaults <- config file <- explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise DataValidationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def _parse_floats(text: str) -> list:
    return [float(v) for v in str(text).split(",")]


def _delta_from(cfg: dict, p_y: int) -> np.ndarray:
    if cfg.get("delta") is None:
        raise DataValidationError("--delta is required (comma-separated, one per outcome)")
    delta = np.asarray(_parse_floats(cfg["delta"]), dtype=float)
    if len(delta) != p_y:
        raise DataValidationError(f"delta length {len(delta)} != p_y {p_y}")
    return delta


def _dissim_from(cfg: dict, p_y: int, delta: np.ndarray) -> DissimilaritySpec:
    kinds = str(cfg.get("dissim", "absolute")).split(",")
    if len(kinds) == 1:
        kinds = kinds * p_y
    return DissimilaritySpec(kinds=tuple(kinds), delta=delta)


# -- subcommands ---------------------------------------------------------


def cmd_simulate(args) -> int:
    defaults = {"design": None, "n": 1000, "seed": 0, "out": None}
    cfg = _effective(args, defaults)
    if cfg["design"] is None or cfg["out"] is None:
        raise DataValidationError("--design and --out are required")
    if int(cfg["n"]) < 1:
        print("error: --n must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    model = GenerativeModel(cfg["design"])
    data = model.simulate(int(cfg["n"]), streams.substream(int(cfg["seed"]), streams.SIM, 0))
    write_csv(data, cfg["out"])
    _write_json(cfg["out"] + ".config.json", {"command": "simulate", "config": cfg})
    print(f"wrote {data.n} trajectories to {cfg['out']}")
    return 0


def _load_regime_doc(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_fit(args) -> int:
    defaults = {
        "data": None, "out": None, "delta": None, "dissim": "absolute",
        "n_lambda": 1000, "engine": "linear", "seed": 0, "split_seed": None,
        "trace": None, "feature_map": "standardized_outcomes", "poly_degree": 1,
    }
    cfg = _effective(args, defaults)
    if cfg["data"] is None or cfg["out"] is None:
        raise DataValidationError("--data and --out are required")
    data = load_csv(cfg["data"])
    delta = _delta_from(cfg, data.p_y)
    spec = _dissim_from(cfg, data.p_y, delta)

    eval_hashes = []
    if cfg["split_seed"] is not None:
        d_fit, d_eval = split_even(data, int(cfg["split_seed"]))
        eval_hashes = d_eval.row_hashes()
    else:
        d_fit = data

    basis = FeatureBasis(poly_degree=int(cfg["poly_degree"]))
    engine = make_engine(cfg["engine"], basis=basis, seed=int(cfg["seed"]))
    pfit = fit_prioritized(d_fit, spec, n_lambda=int(cfg["n_lambda"]), seed=int(cfg["seed"]),
                           engine=engine)

    if cfg["feature_map"] == "standardized_outcomes":
        lam_data = standardize_outcomes(d_fit)
        standardization = lam_data.standardization
    else:
        lam_data = d_fit
        standardization = Standardization(np.zeros(data.p_y), np.ones(data.p_y),
                                          np.zeros(data.p_y, dtype=bool))
    lam = estimate_lambda(lam_data, pfit.regime, engine, feature_map=cfg["feature_map"])
    aug_stack = backward_induce(d_fit, engine, downstream_rule=pfit.regime,
                                downstream_label="prioritized")

    if cfg["trace"]:
        pfit.write_trace_csv(cfg["trace"])

    doc = regime_document(pfit.regime, extra={
        "method": "prioritized",
        "config": cfg,
        "dissimilarity": spec.to_dict(),
        "lambda_hat": lam.to_dict(),
        "sup_regrets": pfit.sup_regrets.tolist(),
        "standardization": standardization.to_dict(),
        "augmentation_stack": aug_stack.to_doc(),
        "fit_row_hashes": d_fit.row_hashes(),
        "eval_row_hashes": eval_hashes,
    })
    _write_json(cfg["out"], doc)
    print(f"fitted prioritized regime on {d_fit.n} rows; lambda_hat = {lam.round4()}")
    return 0


def _select_eval_rows(data: Dataset, doc: dict) -> Dataset:
    hashes = data.row_hashes()
    fit_set = set(doc.get("fit_row_hashes", []))
    eval_set = set(doc.get("eval_row_hashes", []))
    if eval_set:
        idx = np.array([i for i, h in enumerate(hashes) if h in eval_set], dtype=int)
        if len(idx):
            return data.subset(idx)
    overlap = sum(1 for h in hashes if h in fit_set)
    if overlap:
        raise DataValidationError(
            f"{overlap} evaluation rows were used to fit the regime; refusing to evaluate"
        )
    return data


def cmd_evaluate(args) -> int:
    defaults = {
        "regime": None, "data": None, "out": None, "csv": None, "alpha": 0.05,
        "lambda_grid": 1000, "seed": 0, "fit_data": None, "engine": "linear",
    }
    cfg = _effective(args, defaults)
    if cfg["regime"] is None or cfg["data"] is None or cfg["out"] is None:
        raise DataValidationError("--regime, --data and --out are required")
    data = load_csv(cfg["data"])
    engine = make_engine(cfg["engine"], seed=int(cfg["seed"]))

    lam_hat: Optional[CompositeSpec] = None
    if str(cfg["regime"]).startswith("fixed:"):
        if cfg["fit_data"] is None:
            raise DataValidationError("inline fixed regimes need --fit-data for the augmentation fit")
        d_fit = load_csv(cfg["fit_data"])
        regime = fixed_regime_from_values(_parse_floats(cfg["regime"][len("fixed:"):]), d_fit)
        overlap = set(d_fit.row_hashes()) & set(data.row_hashes())
        if overlap:
            raise DataValidationError(f"{len(overlap)} rows shared between fit and eval data")
        stack = backward_induce(d_fit, engine, downstream_rule=regime, downstream_label="fixed")
        eval_data = data
        method = cfg["regime"]
        standardization = None
    else:
        doc = _load_regime_doc(cfg["regime"])
        regime = regime_from_document(doc)
        stack = QModelStack.from_doc(doc["augmentation_stack"])
        eval_data = _select_eval_rows(data, doc)
        method = doc.get("method", doc["regime"].get("kind", "regime"))
        lam_hat = CompositeSpec(np.asarray(doc["lambda_hat"]["lambda"]),
                                doc["lambda_hat"]["feature_map"])
        standardization = Standardization.from_dict(doc["standardization"])

    alpha = float(cfg["alpha"])
    est = aipw_value(eval_data, regime, stack, alpha=alpha)
    ell = confidence_ellipsoid(est, alpha)

    report = {
        "command": "evaluate", "config": cfg, "method": method,
        "m": est.m, "value": est.value.tolist(), "sigma": est.sigma.tolist(),
        "sigma_influence": est.sigma_influence.tolist(),
        "marginal_lo": est.lo.tolist(), "marginal_hi": est.hi.tolist(),
        "ellipsoid": ell.to_dict(),
    }
    if lam_hat is not None:
        if lam_hat.feature_map == "standardized_outcomes":
            lam_eval = Dataset(
                X=[x.copy() for x in eval_data.X], A=[a.copy() for a in eval_data.A],
                feas=[f.copy() for f in eval_data.feas], prop=[p.copy() for p in eval_data.prop],
                Y=standardization.apply(eval_data.Y),
                action_codes=eval_data.action_codes, action_values=eval_data.action_values,
                outcome_names=list(eval_data.outcome_names), standardization=standardization,
            )
        else:
            lam_eval = eval_data
        grid = sphere_grid(int(cfg["lambda_grid"]), eval_data.p_y, int(cfg["seed"]))
        lset = universal_lambda_set(lam_eval, lam_hat, regime, grid, alpha, engine)
        report["lambda_hat"] = lam_hat.to_dict()
        report["universal_lambda_set"] = lset.to_dict()

    _write_json(cfg["out"], report)
    if cfg["csv"]:
        with open(cfg["csv"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "outcome", "estimate", "lo", "hi", "se"])
            for ell_i in range(eval_data.p_y):
                se = float(np.sqrt(est.sigma_influence[ell_i, ell_i] / est.m))
                w.writerow([method, ell_i + 1, repr(float(est.value[ell_i])),
                            repr(float(est.lo[ell_i])), repr(float(est.hi[ell_i])), repr(se)])
    print(f"evaluated {method} on {est.m} rows; value = {np.round(est.value, 4).tolist()}")
    return 0


def cmd_mc(args) -> int:
    defaults = {
        "design": None, "reps": 100, "n": 1000, "test_size": 10000, "alpha": 0.05,
        "n_lambda": 1000, "engine": "linear", "workers": 1, "out": None,
        "methods": "prioritized,qlearn_per_outcome,composite_average,tuned_composite",
        "delta": None, "seed": None, "composite_features": "raw_outcomes",
    }
    cfg = _effective(args, defaults)
    if cfg["seed"] is None:
        print("error: mc requires an explicit --seed for reproducibility", file=sys.stderr)
        return EXIT_USAGE
    if cfg["design"] is None or cfg["out"] is None:
        raise DataValidationError("--design and --out are required")
    model = GenerativeModel(cfg["design"])
    delta = tuple(_parse_floats(cfg["delta"])) if cfg["delta"] is not None else None
    mc_cfg = MCConfig(
        n=int(cfg["n"]), reps=int(cfg["reps"]), test_size=int(cfg["test_size"]),
        methods=tuple(str(cfg["methods"]).split(",")), alpha=float(cfg["alpha"]),
        seed=int(cfg["seed"]), n_lambda=int(cfg["n_lambda"]), engine=cfg["engine"],
        delta=delta, workers=int(cfg["workers"]),
        composite_features=cfg["composite_features"],
    )
    result = run_mc(model, mc_cfg)
    result.write_csv(cfg["out"])
    _write_json(cfg["out"] + ".config.json", {
        "command": "mc", "config": cfg, "failures": result.failures,
        "excluded_replications": len(result.failures),
    })
    print(f"wrote {len(result.aggregate())} result rows to {cfg['out']} "
          f"({len(result.failures)} failed replication(s) excluded)")
    return 0


def _regime_from_spec(spec_text: str, model: GenerativeModel):
    if spec_text.startswith("fixed:"):
        ref = model.simulate(2, streams.substream(0, 99))
        return fixed_regime_from_values(_parse_floats(spec_text[len("fixed:"):]), ref)
    return regime_from_document(_load_regime_doc(spec_text))


def cmd_winratio(args) -> int:
    defaults = {
        "design": None, "pairs": 10000, "margins": None, "seed": 0, "out": None,
    }
    cfg = _effective(args, defaults)
    regimes = args.regime or []
    if cfg["design"] is None or len(regimes) < 2:
        raise DataValidationError("--design and at least two --regime specs are required")
    model = GenerativeModel(cfg["design"])
    margins = np.asarray(_parse_floats(cfg["margins"]), dtype=float) if cfg["margins"] is not None \
        else np.zeros(model.p_y)
    spec = WinRatioSpec(margins=margins, pairs=int(cfg["pairs"]), seed=int(cfg["seed"]))
    objs = [_regime_from_spec(s, model) for s in regimes]

    results = {}
    r = len(objs)
    beats = np.zeros((r, r), dtype=bool)
    for i in range(r):
        for j in range(r):
            if i == j:
                continue
            res = win_ratio(model, objs[i], objs[j], spec)
            results[f"{regimes[i]} vs {regimes[j]}"] = res.to_dict()
            beats[i, j] = res.win_a > res.win_b
    payload = {
        "command": "winratio", "config": dict(cfg, regimes=list(regimes)),
        "margins": margins.tolist(), "pairs": int(cfg["pairs"]), "seed": int(cfg["seed"]),
        "results": results,
    }
    if r > 2:
        payload["cyclic_triples"] = [list(t) for t in cyclic_triples(list(regimes), beats)]
    if cfg["out"]:
        _write_json(cfg["out"], payload)
    first = next(iter(results.values()))
    print(f"win_a={first['win_a']:.4f} win_b={first['win_b']:.4f} tie={first['tie']:.4f} "
          f"(sum_of_conditionals={first['wr_sum_of_conditionals']:.4f})")
    return 0


def cmd_irl(args) -> int:
    defaults = {
        "data": None, "regime": None, "out": None, "engine": "linear",
        "feature_map": "standardized_outcomes", "method": "auto",
        "grid_size": 10000, "seed": 0,
    }
    cfg = _effective(args, defaults)
    if cfg["data"] is None or cfg["regime"] is None:
        raise DataValidationError("--data and --regime are required")
    data = load_csv(cfg["data"])
    regime = regime_from_document(_load_regime_doc(cfg["regime"]))
    if cfg["feature_map"] == "standardized_outcomes":
        data = standardize_outcomes(data)
    engine = make_engine(cfg["engine"], seed=int(cfg["seed"]))
    lam = estimate_lambda(data, regime, engine, method=cfg["method"],
                          grid_size=int(cfg["grid_size"]), seed=int(cfg["seed"]),
                          feature_map=cfg["feature_map"])
    payload = {"command": "irl", "config": cfg, "lambda_hat": lam.to_dict()}
    if cfg["out"]:
        _write_json(cfg["out"], payload)
    print("lambda_hat =", lam.round4())
    return 0


def cmd_report(args) -> int:
    defaults = {"out": None}
    cfg = _effective(args, defaults)
    inputs = args.inputs or []
    if not inputs or cfg["out"] is None:
        raise DataValidationError("--inputs and --out are required")
    rows = []
    for path in inputs:
        if path.endswith(".json"):
            doc = _load_regime_doc(path)
            if doc.get("command") == "evaluate":
                for ell in range(len(doc["value"])):
                    rows.append({
                        "source": path, "design": "", "method": doc["method"],
                        "outcome": ell + 1, "value": doc["value"][ell],
                        "lo": doc["marginal_lo"][ell], "hi": doc["marginal_hi"][ell],
                        "mc_se": "", "coverage": "",
                    })
            else:
                raise DataValidationError(f"{path}: not an evaluation report")
        else:
            with open(path, newline="", encoding="utf-8") as fh:
                for rec in csv.DictReader(fh):
                    rows.append({
                        "source": path, "design": rec.get("design", ""),
                        "method": rec.get("method", ""), "outcome": rec.get("outcome", ""),
                        "value": rec.get("mean_value", rec.get("estimate", "")),
                        "lo": rec.get("lo", ""), "hi": rec.get("hi", ""),
                        "mc_se": rec.get("mc_se", ""), "coverage": rec.get("coverage", ""),
                    })
    cols = ["source", "design", "method", "outcome", "value", "lo", "hi", "mc_se", "coverage"]
    with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)
    widths = {c: max(len(c), *(len(str(r[c])) for r in rows)) if rows else len(c) for c in cols}
    print("  ".join(c.ljust(widths[c]) for c in cols))
    for r in rows:
        print("  ".join(str(r[c]).ljust(widths[c]) for c in cols))
    return 0


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pdtr",
                                description="Prioritized-outcome dynamic treatment regimes")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="JSON config file (flags override it)")

    sp = sub.add_parser("simulate", help="write a simulated trajectory CSV")
    add_common(sp)
    sp.add_argument("--design", choices=["s1", "s2", "s3", "s4"])
    sp.add_argument("--n", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit the prioritized regime on a CSV")
    add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.add_argument("--delta")
    sp.add_argument("--dissim")
    sp.add_argument("--n-lambda", dest="n_lambda", type=int)
    sp.add_argument("--engine", choices=["linear", "trees"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--split-seed", dest="split_seed", type=int)
    sp.add_argument("--trace")
    sp.add_argument("--feature-map", dest="feature_map",
                    choices=["standardized_outcomes", "raw_outcomes"])
    sp.add_argument("--poly-degree", dest="poly_degree", type=int)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("evaluate", help="doubly robust evaluation on held-out data")
    add_common(sp)
    sp.add_argument("--regime")
    sp.add_argument("--data")
    sp.add_argument("--fit-data", dest="fit_data")
    sp.add_argument("--out")
    sp.add_argument("--csv")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--lambda-grid", dest="lambda_grid", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--engine", choices=["linear", "trees"])
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("mc", help="Monte Carlo study over a simulated design")
    add_common(sp)
    sp.add_argument("--design", choices=["s1", "s2", "s3", "s4"])
    sp.add_argument("--reps", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--test-size", dest="test_size", type=int)
    sp.add_argument("--methods")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-lambda", dest="n_lambda", type=int)
    sp.add_argument("--engine", choices=["linear", "trees"])
    sp.add_argument("--delta")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--composite-features", dest="composite_features",
                    choices=["raw_outcomes", "standardized_outcomes"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mc)

    sp = sub.add_parser("winratio", help="generalized win ratio between regimes")
    add_common(sp)
    sp.add_argument("--design", choices=["s1", "s2", "s3", "s4"])
    sp.add_argument("--regime", action="append",
                    help="fixed:<a1>,<a2> or a regime document path (repeatable)")
    sp.add_argument("--pairs", type=int)
    sp.add_argument("--margins")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_winratio)

    sp = sub.add_parser("irl", help="composite weights a fitted regime maximizes")
    add_common(sp)
    sp.add_argument("--data")
    sp.add_argument("--regime")
    sp.add_argument("--out")
    sp.add_argument("--engine", choices=["linear", "trees"])
    sp.add_argument("--feature-map", dest="feature_map",
                    choices=["standardized_outcomes", "raw_outcomes"])
    sp.add_argument("--method", choices=["auto", "closed_form", "grid"])
    sp.add_argument("--grid-size", dest="grid_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_irl)

    sp = sub.add_parser("report", help="merge evaluation/mc outputs into one table")
    add_common(sp)
    sp.add_argument("--inputs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataValidationError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
