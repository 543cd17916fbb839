"""Composite-outcome weight recovery and the tuned-composite comparator.

Given a fitted regime, the weight vector under which it is most optimal
is the unit-norm maximizer of the plug-in value of the composite
lambda' * (standardized outcomes) when the regime is followed at every
stage.  With the least-squares engine the plug-in value is linear in
lambda, so the maximizer is the normalized vector of per-outcome plug-in
values; other engines search a sphere grid.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data_model import Dataset
from .errors import DataValidationError, NumericalError
from .q_regression import GreedyQRegime, LinearEngine, backward_induce, fit_greedy_qlearning
from .regime import Regime

logger = logging.getLogger(__name__)

_UNIT_TOL = 1e-10


FEATURE_MAPS = ("standardized_outcomes", "raw_outcomes")


@dataclass(frozen=True)
class CompositeSpec:
    """Composite outcome lambda' * rho(T) with unit-norm lambda.

    rho is the outcome vector, either standardized (the default, as used
    on real data where outcome scales are incommensurate) or raw (the
    simulation designs score composites directly on the outcome scale).
    """

    lam: np.ndarray
    feature_map: str = "standardized_outcomes"

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        object.__setattr__(self, "lam", lam)
        if abs(np.linalg.norm(lam) - 1.0) > _UNIT_TOL:
            raise DataValidationError(f"lambda must have unit norm, got ||lam||={np.linalg.norm(lam)}")
        if self.feature_map not in FEATURE_MAPS:
            raise DataValidationError(f"unknown feature map '{self.feature_map}'")

    def round4(self) -> list:
        return [round(float(v), 4) for v in self.lam]

    def to_dict(self) -> dict:
        return {"lambda": self.lam.tolist(), "lambda_4dp": self.round4(),
                "feature_map": self.feature_map}


def _require_standardized(data: Dataset) -> None:
    if data.standardization is None:
        raise DataValidationError("composite estimation needs standardized outcomes "
                                  "(run standardize_outcomes first)")


def _features(data: Dataset, feature_map: str) -> np.ndarray:
    if feature_map == "standardized_outcomes":
        _require_standardized(data)
        return data.Y
    return data.Y


def _stage1_actions(data: Dataset, regime: Regime) -> np.ndarray:
    return regime.stage_actions(0, [data.X[0]], [], data.feas[0])


def per_outcome_plugin_values(data: Dataset, regime: Regime, engine=None,
                              feature_map: str = "standardized_outcomes") -> np.ndarray:
    """v_l = empirical mean of the stage-1 fitted value of outcome l when the
    regime is played from stage 1 on."""
    Y = _features(data, feature_map)
    engine = engine or LinearEngine()
    stack = backward_induce(data, engine, downstream_rule=regime, targets=Y,
                            downstream_label="fitted regime")
    si1 = stack.inputs(data, 0)
    a1 = _stage1_actions(data, regime)
    return stack.predict(si1, a1).mean(axis=0)


def composite_value(data: Dataset, regime: Regime, lam: np.ndarray, engine=None,
                    feature_map: str = "standardized_outcomes") -> float:
    """Plug-in value of the scalar composite lambda' * rho(T) under `regime`,
    by a fresh scalar backward recursion (no linearity shortcut)."""
    Y = _features(data, feature_map)
    engine = engine or LinearEngine()
    C = Y @ np.asarray(lam, dtype=float)
    stack = backward_induce(data, engine, downstream_rule=regime, targets=C,
                            downstream_label="fitted regime")
    si1 = stack.inputs(data, 0)
    a1 = _stage1_actions(data, regime)
    return float(stack.predict(si1, a1).mean())


def fibonacci_sphere(n: int) -> np.ndarray:
    """n near-uniform unit vectors on the 2-sphere (golden-angle spiral)."""
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = np.pi * (1.0 + np.sqrt(5.0)) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def sphere_grid(n: int, dim: int, seed: int = 0) -> np.ndarray:
    """Unit-vector grid: Fibonacci spiral in 3-d, normalized Gaussians otherwise."""
    if dim == 3:
        return fibonacci_sphere(n)
    g = np.random.default_rng(seed).standard_normal((n, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def estimate_lambda(data: Dataset, regime: Regime, engine=None, method: str = "auto",
                    grid_size: int = 10000, seed: int = 0,
                    feature_map: str = "standardized_outcomes") -> CompositeSpec:
    """Unit-norm weights under which `regime` is most optimal.

    The least-squares engine admits a closed form (value linear in the
    weights): normalize the per-outcome plug-in value vector.  Other
    engines, or method="grid", search `grid_size` unit vectors with one
    scalar recursion per grid point.
    """
    engine = engine or LinearEngine()
    _features(data, feature_map)  # validates the standardization precondition
    use_closed = method == "closed_form" or (method == "auto" and isinstance(engine, LinearEngine))
    if method not in ("auto", "closed_form", "grid"):
        raise DataValidationError(f"unknown method '{method}'")
    if use_closed:
        v = per_outcome_plugin_values(data, regime, engine, feature_map)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise NumericalError("composite direction undefined: all plug-in values are zero")
        return CompositeSpec(v / norm, feature_map)
    grid = sphere_grid(grid_size, data.p_y, seed)
    vals = np.array([composite_value(data, regime, lam, engine, feature_map) for lam in grid])
    return CompositeSpec(grid[int(np.argmax(vals))], feature_map)


def tuned_composite_regime(data: Dataset, composite: CompositeSpec, engine=None) -> GreedyQRegime:
    """Greedy scalar Q-learning regime for the composite lambda' * rho(T)."""
    C = _features(data, composite.feature_map) @ composite.lam
    return fit_greedy_qlearning(data, C, engine or LinearEngine())
