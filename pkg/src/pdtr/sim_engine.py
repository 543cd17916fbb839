"""Generative designs, conditional-value oracles, and the Monte Carlo harness.

Two collections of two-stage binary-treatment designs, three outcomes
each.  Treatments are uniform +/-1 unless a regime drives the draw; all
exogenous noise is drawn before any action is taken, so different
regimes evaluated under the same stream share their noise (common
random numbers).

Outcome definitions are table-driven linear maps of the latent Z
variables; the published "3Z/3"-style coefficients are evaluated
literally, and alternative readings are a table change away.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import streams
from .data_model import Dataset, Trajectory, default_action_values, split_even, standardize_outcomes
from .errors import DataValidationError, NumericalError
from .inference import aipw_value
from .irl import estimate_lambda, tuned_composite_regime
from .prioritized import DissimilaritySpec, fit_prioritized
from .q_regression import FeatureBasis, backward_induce, fit_greedy_qlearning, make_engine
from .regime import FixedRegime, Regime, sample_simplex

logger = logging.getLogger(__name__)

GAMMA_TABLE = np.array([
    [0.0, 0.5, -0.7, 0.75, 0.3, 0.5, 0.5],
    [0.0, 0.5, 0.7, 0.75, 0.3, 0.5, 0.5],
    [0.0, 0.5, 0.0, 0.75, 0.1, 0.5, 0.0],
])

# rows: outcomes, columns: latent Z components.  The published garbled
# coefficients ("3Z1/3", "4Z1/4", "4Z3/4") are resolved to the weights
# that reproduce the reference results; override the table to explore
# other readings.
OUTCOME_COEFS = {
    "s1": np.array([[1.0, 0.0, 0.0],
                    [0.0, 1.0, 0.0],
                    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]]),
    "s2": np.array([[0.8, 0.1, 0.1],
                    [0.0, 0.2, 0.8],
                    [0.5, 0.5, 1.0 / 3.0]]),
    "s3": np.array([[1.0, 0.0, 0.0],   # columns here are (Z4, Z5, Z6)
                    [0.0, 0.0, 1.0],
                    [0.0, 1.0, 0.0]]),
    "s4": np.array([[0.0, 1.0, 0.0],
                    [0.0, 0.0, 1.0],
                    [1.0, 0.0, 0.0]]),
}

DELTA_DEFAULTS = {
    "s1": (0.1, 0.1, 0.1),
    "s2": (0.25, 0.25, 0.25),
    "s3": (0.5, 0.5, 0.5),
    "s4": (0.5, 0.5, 0.5),
}

_CODES = [np.array([0, 1]), np.array([0, 1])]


@dataclass(frozen=True)
class GenerativeModel:
    """One of the four two-stage designs (binary +/-1 treatments, p_y = 3)."""

    design: str
    gamma: np.ndarray = field(default_factory=lambda: GAMMA_TABLE.copy())
    delta: Optional[np.ndarray] = None
    outcome_coefs: Optional[np.ndarray] = None
    seed: int = 0

    def __post_init__(self):
        if self.design not in ("s1", "s2", "s3", "s4"):
            raise DataValidationError(f"unknown design '{self.design}'")
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))
        if self.gamma.shape != (3, 7):
            raise DataValidationError("gamma table must be 3 x 7")
        d = DELTA_DEFAULTS[self.design] if self.delta is None else self.delta
        object.__setattr__(self, "delta", np.asarray(d, dtype=float))
        c = OUTCOME_COEFS[self.design] if self.outcome_coefs is None else self.outcome_coefs
        object.__setattr__(self, "outcome_coefs", np.asarray(c, dtype=float))

    @property
    def first_collection(self) -> bool:
        return self.design in ("s1", "s2")

    @property
    def p1(self) -> int:
        return 3 if self.first_collection else 4

    @property
    def p2(self) -> int:
        return 3 if self.first_collection else 4

    p_y = 3
    K = 2

    def dissimilarity_spec(self) -> DissimilaritySpec:
        return DissimilaritySpec.uniform(3, self.delta)

    # -- sampling ----------------------------------------------------------

    def _exogenous(self, n: int, rng: np.random.Generator) -> dict:
        # fixed draw order keeps noise identical across regimes
        return {
            "X1": rng.standard_normal((n, self.p1)),
            "upsilon": rng.standard_normal((n, self.p2)),
            "eps": rng.standard_normal((n, 3)),
            "u1": rng.uniform(size=n),
            "u2": rng.uniform(size=n),
        }

    def _stage2_covariates(self, X1: np.ndarray, a1: np.ndarray, upsilon: np.ndarray) -> np.ndarray:
        if self.first_collection:
            return 0.5 * X1 * a1[:, None] + upsilon
        X2 = np.empty_like(upsilon)
        X2[:, 0] = (1.25 * X1[:, 0] * a1 + upsilon[:, 0] > 0).astype(float)
        X2[:, 1] = (-1.75 * X1[:, 0] * a1 + upsilon[:, 1] > 0).astype(float)
        X2[:, 2] = 1.0 + 1.5 * X1[:, 2] * a1 + upsilon[:, 2]
        X2[:, 3] = 0.5 * X1[:, 2] * a1 + upsilon[:, 3]
        return X2

    def _latents(self, X1, a1, X2, a2, eps) -> np.ndarray:
        if self.first_collection:
            g = self.gamma
            Z = np.empty((len(a1), 3))
            for j in range(3):
                Z[:, j] = (g[j, 0] + g[j, 1] * X1[:, j] + g[j, 2] * a1
                           + g[j, 3] * X1[:, j] * a1 + g[j, 4] * a2
                           + g[j, 5] * X2[:, j] * a2 + g[j, 6] * a1 * a2 + eps[:, j])
            return Z
        base = 0.5 + X2[:, 2] + 0.5 * a1 + 0.5 * X2[:, 0] - 0.5 * X2[:, 1]
        z4 = 1.5 * a2 * base + eps[:, 0]
        z5 = -1.5 * a2 * base + eps[:, 1]
        z6 = 2.0 * a2 * (0.75 - X2[:, 2] + 0.75 * a1 - 0.75 * X2[:, 0] - 0.25 * X2[:, 1]) + eps[:, 2]
        return np.stack([z4, z5, z6], axis=1)

    def simulate(self, n: int, rng: np.random.Generator, regime: Optional[Regime] = None) -> Dataset:
        """n trajectories: uniform randomization (propensity 1/2) or, under
        `regime`, its actions with propensity 1."""
        if n < 1:
            raise DataValidationError("n must be >= 1")
        noise = self._exogenous(n, rng)
        X1 = noise["X1"]
        feas = np.ones((n, 2), dtype=bool)
        if regime is None:
            a1_pos = (noise["u1"] < 0.5).astype(np.int64)
            prop1 = np.full(n, 0.5)
        else:
            a1_pos = regime.stage_actions(0, [X1], [], feas)
            prop1 = np.ones(n)
        values = default_action_values(_CODES[0])
        a1 = values[a1_pos]
        X2 = self._stage2_covariates(X1, a1, noise["upsilon"])
        if regime is None:
            a2_pos = (noise["u2"] < 0.5).astype(np.int64)
            prop2 = np.full(n, 0.5)
        else:
            a2_pos = regime.stage_actions(1, [X1, X2], [a1_pos], feas)
            prop2 = np.ones(n)
        a2 = values[a2_pos]
        Z = self._latents(X1, a1, X2, a2, noise["eps"])
        Y = Z @ self.outcome_coefs.T
        return Dataset(
            X=[X1, X2], A=[a1_pos, a2_pos],
            feas=[feas, feas.copy()], prop=[prop1, prop2], Y=Y,
            action_codes=[c.copy() for c in _CODES],
            action_values=[values.copy(), values.copy()],
            outcome_names=["y_1", "y_2", "y_3"],
        )

    def draw_outcomes(self, regime: Optional[Regime], n: int, rng: np.random.Generator) -> np.ndarray:
        return self.simulate(n, rng, regime).Y


def draw_trajectory(model: GenerativeModel, regime: Optional[Regime],
                    rng: np.random.Generator) -> Trajectory:
    """Single trajectory under the regime (or uniform randomization)."""
    return model.simulate(1, rng, regime).trajectory(0)


@dataclass(frozen=True)
class OracleValue:
    """Test-set approximation of a regime's mean outcome vector."""

    value: np.ndarray
    se: np.ndarray
    n: int


def oracle_conditional_value(model: GenerativeModel, regime: Optional[Regime],
                             test_size: int, seed: int) -> OracleValue:
    """Mean outcome vector over `test_size` fresh draws under the regime."""
    rng = streams.substream(seed, streams.TESTSET)
    Y = model.draw_outcomes(regime, test_size, rng)
    se = Y.std(axis=0, ddof=1) / np.sqrt(test_size) if test_size > 1 else np.full(model.p_y, np.nan)
    return OracleValue(value=Y.mean(axis=0), se=se, n=test_size)


# -- Monte Carlo harness -------------------------------------------------------


@dataclass(frozen=True)
class MCConfig:
    """Protocol knobs for one Monte Carlo study."""

    n: int = 1000
    reps: int = 1000
    test_size: int = 10000
    methods: tuple = ("prioritized", "qlearn_per_outcome", "composite_average", "tuned_composite")
    alpha: float = 0.05
    seed: int = 0
    n_lambda: int = 1000
    engine: str = "linear"
    basis: FeatureBasis = field(default_factory=FeatureBasis)
    delta: Optional[tuple] = None
    workers: int = 1
    # the simulation designs score composites on the raw outcome scale
    composite_features: str = "raw_outcomes"

    def __post_init__(self):
        if min(self.n, self.reps, self.test_size, self.n_lambda) < 1:
            raise DataValidationError("all counts must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise DataValidationError("alpha must be in (0, 1)")
        for m in self.methods:
            parse_method(m)  # validates


def parse_method(spec: str) -> tuple:
    """Method string -> (kind, detail).  Accepted: prioritized,
    qlearn_per_outcome[:l], composite_average, tuned_composite,
    fixed:<a1>/<a2> (signed action values; "," also accepted where the
    string is not part of a comma-separated method list)."""
    if spec == "prioritized":
        return ("prioritized", None)
    if spec == "composite_average":
        return ("composite_average", None)
    if spec == "tuned_composite":
        return ("tuned_composite", None)
    if spec.startswith("qlearn_per_outcome"):
        rest = spec[len("qlearn_per_outcome"):]
        outcome = 1 if rest == "" else int(rest.lstrip(":"))
        if outcome < 1:
            raise DataValidationError(f"bad outcome index in '{spec}'")
        return ("qlearn", outcome)
    if spec.startswith("fixed:"):
        body = spec[len("fixed:"):].replace("/", ",")
        vals = [float(v) for v in body.split(",")]
        return ("fixed", vals)
    raise DataValidationError(f"unknown method '{spec}'")


def fixed_regime_from_values(values: Sequence[float], data_like) -> FixedRegime:
    """Fixed regime given signed action values (e.g. +1/-1)."""
    codes = []
    for k, v in enumerate(values):
        av = data_like.action_values[k]
        pos = int(np.argmin(np.abs(av - v)))
        if abs(av[pos] - v) > 1e-9:
            raise DataValidationError(f"no stage-{k + 1} action with value {v}")
        codes.append(int(data_like.action_codes[k][pos]))
    return FixedRegime(codes, data_like.action_codes)


def _fit_method(kind: str, detail, d1: Dataset, d1_std: Dataset, engine, spec,
                prior_fit, composite_features: str = "raw_outcomes") -> Regime:
    if kind == "prioritized":
        return prior_fit.regime
    if kind == "qlearn":
        if detail > d1.p_y:
            raise DataValidationError(f"outcome {detail} out of range")
        return fit_greedy_qlearning(d1, d1.Y[:, detail - 1], engine)
    if kind == "composite_average":
        return fit_greedy_qlearning(d1, d1.Y.mean(axis=1), engine)
    if kind == "tuned_composite":
        dset = d1 if composite_features == "raw_outcomes" else d1_std
        lam = estimate_lambda(dset, prior_fit.regime, engine, feature_map=composite_features)
        return tuned_composite_regime(dset, lam, engine)
    if kind == "fixed":
        return fixed_regime_from_values(detail, d1)
    raise DataValidationError(f"unknown method kind '{kind}'")


def run_replication(model: GenerativeModel, cfg: MCConfig, r: int) -> dict:
    """One replication: simulate, split, fit each method on half 1, oracle
    its conditional value, and run AIPW inference on half 2."""
    spec = DissimilaritySpec.uniform(model.p_y, cfg.delta if cfg.delta is not None else model.delta)
    engine = make_engine(cfg.engine, basis=cfg.basis, seed=streams.derive_seed(cfg.seed, 11, r))
    data = model.simulate(cfg.n, streams.substream(cfg.seed, streams.SIM, r))
    d1, d2 = split_even(data, streams.derive_seed(cfg.seed, streams.SPLIT, r))
    d1_std = standardize_outcomes(d1)

    parsed = [parse_method(m) for m in cfg.methods]
    prior_fit = None
    if any(k in ("prioritized", "tuned_composite") for k, _ in parsed):
        weights = sample_simplex(cfg.n_lambda, model.p_y, streams.derive_seed(cfg.seed, streams.SIMPLEX, r))
        prior_fit = fit_prioritized(d1, spec, weights=weights, engine=engine)

    rec: dict = {"rep": r, "methods": {}}
    for name, (kind, detail) in zip(cfg.methods, parsed):
        regime = _fit_method(kind, detail, d1, d1_std, engine, spec, prior_fit,
                             cfg.composite_features)
        oracle = oracle_conditional_value(model, regime, cfg.test_size,
                                          streams.derive_seed(cfg.seed, streams.TESTSET, r))
        stack = backward_induce(d1, engine, downstream_rule=regime, downstream_label=name)
        est = aipw_value(d2, regime, stack, alpha=cfg.alpha)
        rec["methods"][name] = {
            "oracle": oracle.value.tolist(),
            "oracle_se": oracle.se.tolist(),
            "aipw": est.value.tolist(),
            "lo": est.lo.tolist(),
            "hi": est.hi.tolist(),
            "covered": [bool(l <= v <= h) for l, v, h in zip(est.lo, oracle.value, est.hi)],
        }
    return rec


def _mc_worker(args) -> tuple:
    model, cfg, r = args
    try:
        return r, run_replication(model, cfg, r), None
    except Exception as exc:  # noqa: BLE001 - replication failures are data
        return r, None, f"{type(exc).__name__}: {exc}"


@dataclass
class MCResult:
    """All replication records plus the aggregated results table."""

    design: str
    config: MCConfig
    records: list
    failures: list

    def aggregate(self, reps: Optional[int] = None) -> list:
        """Rows (design, method, outcome, mean_value, mc_se, coverage, ...);
        `reps` restricts to the first so-many replications."""
        recs = self.records if reps is None else [r for r in self.records if r["rep"] < reps]
        rows = []
        for name in self.config.methods:
            vals = np.array([r["methods"][name]["oracle"] for r in recs])
            cov = np.array([r["methods"][name]["covered"] for r in recs], dtype=float)
            for ell in range(vals.shape[1]):
                v = vals[:, ell]
                rows.append({
                    "design": self.design,
                    "method": name,
                    "outcome": ell + 1,
                    "mean_value": float(v.mean()),
                    "mc_se": float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan"),
                    "coverage": float(cov[:, ell].mean()),
                    "reps": len(recs),
                    "n": self.config.n,
                    "seed": self.config.seed,
                })
        return rows

    def write_csv(self, path: str) -> None:
        rows = self.aggregate()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["design", "method", "outcome", "mean_value", "mc_se",
                        "coverage", "reps", "n", "seed"])
            for row in rows:
                w.writerow([row["design"], row["method"], row["outcome"],
                            repr(row["mean_value"]), repr(row["mc_se"]),
                            repr(row["coverage"]), row["reps"], row["n"], row["seed"]])


def run_mc(model: GenerativeModel, cfg: MCConfig) -> MCResult:
    """Full study: replications are pure functions of (seed, index), so the
    result is identical for any worker count.  Failed replications are
    excluded and reported; more than 5% failures aborts."""
    args = [(model, cfg, r) for r in range(cfg.reps)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            raw = list(pool.map(_mc_worker, args, chunksize=max(1, cfg.reps // (4 * cfg.workers))))
    else:
        raw = [_mc_worker(a) for a in args]
    raw.sort(key=lambda t: t[0])
    records = [rec for _, rec, err in raw if err is None]
    failures = [(r, err) for r, _, err in raw if err is not None]
    for r, err in failures:
        logger.warning("replication %d failed: %s", r, err)
    if failures and len(failures) > 0.05 * cfg.reps:
        raise NumericalError(f"{len(failures)}/{cfg.reps} replications failed; aborting")
    if failures:
        logger.warning("excluded %d failed replication(s)", len(failures))
    return MCResult(design=model.design, config=cfg, records=records, failures=failures)
