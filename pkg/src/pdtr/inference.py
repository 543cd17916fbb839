"""Doubly robust value inference on a held-out half.

The augmented inverse probability weighted estimator combines the
propensity-weighted outcome of trajectories that followed the regime
with stagewise regression corrections, giving a vector estimate (one
entry per outcome) whose covariance supports marginal Wald intervals
and a joint chi-square ellipsoid.  A sample-splitting ratio criterion
yields a finite-sample confidence set for the composite weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import chi2, norm

from .data_model import Dataset
from .errors import DataValidationError, NumericalError
from .irl import CompositeSpec
from .q_regression import LinearEngine, QModelStack
from .regime import Regime

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoarseningWeights:
    """Stagewise regime-consistency indicators and propensity products.

    zeta[:, k] is 1 while the first k+1 observed actions match the
    regime; cum_prop[:, k] is the product of the observed propensities
    through stage k+1.  zeta is nonincreasing along stages by
    construction.
    """

    zeta: np.ndarray      # (n, K) in {0, 1}
    cum_prop: np.ndarray  # (n, K), strictly positive

    @property
    def terminal(self) -> np.ndarray:
        return self.zeta[:, -1]


def coarsening(eval_data: Dataset, regime: Regime) -> CoarseningWeights:
    n, K = eval_data.n, eval_data.K
    zeta = np.ones((n, K))
    cum = np.ones((n, K))
    running_match = np.ones(n, dtype=bool)
    running_prop = np.ones(n)
    for k in range(K):
        pi_a = regime.stage_actions(
            k, [eval_data.X[j] for j in range(k + 1)],
            [eval_data.A[j] for j in range(k)], eval_data.feas[k],
        )
        running_match &= pi_a == eval_data.A[k]
        p = eval_data.prop[k]
        if np.any(p <= 0):
            i = int(np.flatnonzero(p <= 0)[0])
            raise DataValidationError(f"row {i}: zero propensity on observed stage-{k + 1} action")
        running_prop = running_prop * p
        zeta[:, k] = running_match
        cum[:, k] = running_prop
    return CoarseningWeights(zeta=zeta, cum_prop=cum)


def ipw_vectors(eval_data: Dataset, regime: Regime,
                cw: Optional[CoarseningWeights] = None) -> np.ndarray:
    """Per-trajectory inverse-probability-weighted outcome vectors."""
    cw = cw or coarsening(eval_data, regime)
    return eval_data.Y * (cw.terminal / cw.cum_prop[:, -1])[:, None]


@dataclass
class ValueEstimate:
    """AIPW value of a regime with covariance and confidence summaries.

    `sigma` is the plug-in covariance of the centered inverse-probability
    weighted vectors (the plug-in covariance estimator; it drives the joint
    ellipsoid).  The marginal intervals `lo`/`hi` use `sigma_influence`,
    the covariance of the full per-trajectory contributions including the
    augmentation terms: with well-fit outcome models the augmentation is
    a strong control variate and the IPW-only covariance badly overstates
    the estimator's spread (see the variance-ratio check in the tests).
    """

    value: np.ndarray            # (p_y,)
    sigma: np.ndarray            # (p_y, p_y), population-normalized, IPW vectors
    sigma_influence: np.ndarray  # (p_y, p_y), full augmented contributions
    m: int
    alpha: float
    lo: np.ndarray
    hi: np.ndarray
    chi2_radius: float

    def __post_init__(self):
        if not (np.all(self.lo <= self.value + 1e-12) and np.all(self.value <= self.hi + 1e-12)):
            raise NumericalError("interval does not contain the point estimate")

    def to_dict(self) -> dict:
        return {
            "value": self.value.tolist(),
            "sigma": self.sigma.tolist(),
            "sigma_influence": self.sigma_influence.tolist(),
            "m": self.m,
            "alpha": self.alpha,
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "chi2_radius": self.chi2_radius,
        }


def sigma_hat(eval_data: Dataset, regime: Regime) -> np.ndarray:
    """Population-normalized outer-product covariance of the centered IPW
    vectors (the plug-in estimator of the asymptotic covariance)."""
    if eval_data.n < 2:
        raise DataValidationError("need at least 2 evaluation rows for sigma_hat")
    W = ipw_vectors(eval_data, regime)
    D = W - W.mean(axis=0)
    return (D.T @ D) / eval_data.n


def _marginals(value: np.ndarray, sigma: np.ndarray, m: int, alpha: float):
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * np.sqrt(np.clip(np.diag(sigma), 0.0, None) / m)
    return value - half, value + half


def aipw_value(eval_data: Dataset, regime: Regime, stack: QModelStack,
               alpha: float = 0.05) -> ValueEstimate:
    """Sample-splitting AIPW estimate of the outcome-vector value.

    `stack` must be the backward-induction fit under `regime` on the
    other half; it supplies the stagewise augmentation terms.  The
    estimator is the propensity-weighted terminal outcome plus, for each
    stage, the fitted value at the regime's action weighted by the
    difference of adjacent coarsening ratios.
    """
    if not 0.0 < alpha < 1.0:
        raise DataValidationError("alpha must be in (0, 1)")
    if stack.n_targets != eval_data.p_y:
        raise DataValidationError("stack target count does not match outcomes")
    cw = coarsening(eval_data, regime)
    W = ipw_vectors(eval_data, regime, cw)

    total = W.copy()
    prev_ratio = np.ones(eval_data.n)
    for k in range(eval_data.K):
        ratio = cw.zeta[:, k] / cw.cum_prop[:, k]
        a_k = regime.stage_actions(
            k, [eval_data.X[j] for j in range(k + 1)],
            [eval_data.A[j] for j in range(k)], eval_data.feas[k],
        )
        si = stack.inputs(eval_data, k)
        qk = stack.predict(si, a_k)
        total += (prev_ratio - ratio)[:, None] * qk
        prev_ratio = ratio

    value = total.mean(axis=0)
    centered = total - value
    sigma_influence = (centered.T @ centered) / eval_data.n
    sigma = sigma_hat(eval_data, regime)
    lo, hi = _marginals(value, sigma_influence, eval_data.n, alpha)
    return ValueEstimate(value=value, sigma=sigma, sigma_influence=sigma_influence,
                         m=eval_data.n, alpha=alpha, lo=lo, hi=hi,
                         chi2_radius=float(chi2.ppf(1.0 - alpha, eval_data.p_y)))


@dataclass
class EllipsoidReport:
    """Joint confidence region {nu : m (V - nu)' Sigma^-1 (V - nu) <= chi2}."""

    center: np.ndarray
    sigma_inv: np.ndarray
    m: int
    radius: float
    alpha: float
    lo: np.ndarray
    hi: np.ndarray
    used_pinv: bool

    def contains(self, nu) -> bool:
        d = np.asarray(nu, dtype=float) - self.center
        return bool(self.m * d @ self.sigma_inv @ d <= self.radius)

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "sigma_inv": self.sigma_inv.tolist(),
            "m": self.m,
            "chi2_radius": self.radius,
            "alpha": self.alpha,
            "marginal_lo": self.lo.tolist(),
            "marginal_hi": self.hi.tolist(),
            "used_pinv": self.used_pinv,
        }


def confidence_ellipsoid(est: ValueEstimate, alpha: float) -> EllipsoidReport:
    """Joint chi-square ellipsoid and refreshed marginal Wald intervals."""
    if not 0.0 < alpha < 1.0:
        raise DataValidationError("alpha must be in (0, 1)")
    p = len(est.value)
    used_pinv = False
    try:
        sigma_inv = np.linalg.inv(est.sigma)
    except np.linalg.LinAlgError:
        logger.warning("sigma_hat singular: using Moore-Penrose pseudo-inverse")
        sigma_inv = np.linalg.pinv(est.sigma)
        used_pinv = True
    if not np.isfinite(sigma_inv).all():
        logger.warning("sigma_hat inverse not finite: using pseudo-inverse")
        sigma_inv = np.linalg.pinv(est.sigma)
        used_pinv = True
    lo, hi = _marginals(est.value, est.sigma, est.m, alpha)
    return EllipsoidReport(center=est.value, sigma_inv=sigma_inv, m=est.m,
                           radius=float(chi2.ppf(1.0 - alpha, p)), alpha=alpha,
                           lo=lo, hi=hi, used_pinv=used_pinv)


@dataclass
class LambdaSetReport:
    """Universal-inference confidence set for the composite weights.

    A grid weight is a member when its (shifted) plug-in value on the
    evaluation half is at most 1/alpha times the value of the weights
    estimated on the fitting half.
    """

    grid: np.ndarray
    member: np.ndarray
    fraction: float
    alpha: float
    shift: float
    reference_value: float
    _value_fn: Callable = field(repr=False)

    def contains(self, lam) -> bool:
        v = self._value_fn(np.asarray(lam, dtype=float))
        return bool((v + self.shift) / (self.reference_value + self.shift) <= 1.0 / self.alpha)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "shift": self.shift,
            "reference_value": self.reference_value,
            "fraction": self.fraction,
            "n_grid": int(len(self.grid)),
            "n_members": int(self.member.sum()),
        }


def universal_lambda_set(eval_data: Dataset, lambda_hat: CompositeSpec, regime: Regime,
                         grid: np.ndarray, alpha: float, engine=None,
                         min_shift_target: float = 0.1) -> LambdaSetReport:
    """Membership map of the split ratio criterion over a sphere grid.

    Composite values can be negative, which makes the raw ratio
    meaningless; all values are therefore shifted by one constant chosen
    so the smallest per-trajectory composite over the evaluation half is
    at least `min_shift_target` (the shift magnitude is logged).
    """
    if not 0.0 < alpha < 1.0:
        raise DataValidationError("alpha must be in (0, 1)")
    from .irl import _features

    Yfeat = _features(eval_data, lambda_hat.feature_map)
    engine = engine or LinearEngine()
    grid = np.asarray(grid, dtype=float)

    if isinstance(engine, LinearEngine):
        # plug-in composite value is linear in the weights: one vector fit
        from .irl import per_outcome_plugin_values

        v2 = per_outcome_plugin_values(eval_data, regime, engine, lambda_hat.feature_map)
        value_fn = lambda lam: float(v2 @ lam)
    else:
        from .irl import composite_value

        value_fn = lambda lam: composite_value(eval_data, regime, lam, engine,
                                               lambda_hat.feature_map)

    all_lams = np.concatenate([grid, lambda_hat.lam[None, :]], axis=0)
    per_traj = Yfeat @ all_lams.T
    low = float(per_traj.min())
    shift = max(0.0, min_shift_target - low)
    if shift > 0:
        logger.info("universal lambda set: applying positivity shift %.6g", shift)

    ref = value_fn(lambda_hat.lam)
    if ref + shift <= 0:
        raise NumericalError("nonpositive reference composite value after shift")
    vals = np.array([value_fn(lam) for lam in grid])
    member = (vals + shift) / (ref + shift) <= 1.0 / alpha
    return LambdaSetReport(grid=grid, member=member, fraction=float(member.mean()),
                           alpha=alpha, shift=shift, reference_value=ref,
                           _value_fn=value_fn)
