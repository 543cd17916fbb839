"""Prioritized regime selection: equivalence classes, tie-break depth,
regrets, utility, and the preference order.

For each baseline history the candidate rules are scored on every
outcome; the equivalence class for outcome l keeps the candidates whose
value is within the clinical threshold delta_l of the best achievable,
under the configured dissimilarity.  Intersecting the classes in
priority order until empty yields the depth j, the admissible set, and
the tie-break outcome tau (1 when optimality holds on all outcomes,
j + 1 otherwise); the regime plays the admissible candidate maximizing
the tau-th value, lowest candidate index on ties.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .data_model import Dataset, History
from .errors import DataValidationError, NumericalError
from .q_regression import (
    LinearEngine,
    QModelStack,
    StageInputs,
    design_matrix,
    fit_stage_K,
    GreedyQRegime,
)
from .regime import CandidateClass, Regime, WeightVector, register_regime_kind, sample_simplex

logger = logging.getLogger(__name__)

_SUP_REGRET_FLOOR = 1e-6


# -- dissimilarity ----------------------------------------------------------


@dataclass(frozen=True)
class DissimilaritySpec:
    """Per-outcome dissimilarity kind and clinical threshold delta >= 0."""

    kinds: tuple
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float))
        if len(self.kinds) != len(self.delta):
            raise DataValidationError("kinds and delta must have equal length")
        for kind in self.kinds:
            if kind not in ("absolute", "log_ratio"):
                raise DataValidationError(f"unknown dissimilarity kind '{kind}'")
        if np.any(self.delta < 0) or np.any(np.isnan(self.delta)):
            raise DataValidationError("thresholds must be >= 0")

    @property
    def p_y(self) -> int:
        return len(self.kinds)

    @staticmethod
    def uniform(p_y: int, delta, kind: str = "absolute") -> "DissimilaritySpec":
        d = np.broadcast_to(np.asarray(delta, dtype=float), (p_y,)).copy()
        return DissimilaritySpec(kinds=(kind,) * p_y, delta=d)

    def to_dict(self) -> dict:
        return {"kinds": list(self.kinds), "delta": self.delta.tolist()}

    @staticmethod
    def from_dict(d: dict) -> "DissimilaritySpec":
        return DissimilaritySpec(kinds=tuple(d["kinds"]), delta=np.asarray(d["delta"], dtype=float))


def dissimilarity(spec: DissimilaritySpec, outcome: int, u: float, v: float) -> float:
    """d_l(u, v): absolute difference or symmetric log ratio."""
    kind = spec.kinds[outcome]
    if kind == "absolute":
        return abs(u - v)
    if u <= 0 or v <= 0:
        raise NumericalError(f"log_ratio dissimilarity needs positive values, got ({u}, {v})")
    return abs(np.log(u / v))


def _membership(values: np.ndarray, best: float, kind: str, delta: float) -> np.ndarray:
    """Candidates within delta of `best` under the given kind (vectorized)."""
    if kind == "absolute":
        return np.abs(best - values) <= delta
    if best <= 0 or np.any(values[np.isfinite(values)] <= 0):
        raise NumericalError("log_ratio dissimilarity needs positive values")
    return np.abs(np.log(best) - np.log(values)) <= delta


def equivalence_class(values: np.ndarray, spec: DissimilaritySpec, outcome: int) -> np.ndarray:
    """Indices of candidates within delta of the best value on `outcome`."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DataValidationError("empty candidate class")
    best = values.max()
    return np.flatnonzero(_membership(values, best, spec.kinds[outcome], spec.delta[outcome]))


def regret(values: np.ndarray, candidate: int, spec: DissimilaritySpec, outcome: int) -> float:
    """Dissimilarity between the best achievable value and the candidate's."""
    values = np.asarray(values, dtype=float)
    return dissimilarity(spec, outcome, float(values.max()), float(values[candidate]))


# -- utility and preference ---------------------------------------------------


@dataclass(frozen=True)
class UtilityWeights:
    """Full weight vector (omega_0, omega_1, ..., omega_{p_y}, omega_{p_y+1})
    with both boundary entries fixed at 1 and strict descent in between."""

    omega: np.ndarray

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float)
        object.__setattr__(self, "omega", om)
        if om.ndim != 1 or len(om) < 3:
            raise DataValidationError("omega must be (omega_0, ..., omega_{p_y+1})")
        if om[0] != 1.0 or om[-1] != 1.0:
            raise DataValidationError("omega_0 and omega_{p_y+1} must equal 1")
        inner = om[1:-1]
        if np.any(np.diff(inner) >= 0) or inner[-1] <= 1.0:
            raise DataValidationError("need omega_1 > ... > omega_{p_y} > 1")

    @property
    def p_y(self) -> int:
        return len(self.omega) - 2

    @staticmethod
    def from_inner(inner) -> "UtilityWeights":
        return UtilityWeights(np.concatenate([[1.0], np.asarray(inner, dtype=float), [1.0]]))


def utility(regrets: np.ndarray, sup_regrets: np.ndarray, spec: DissimilaritySpec,
            weights: UtilityWeights) -> float:
    """Quasi-lexicographic utility of a regret profile.

    Conventions: the empty prefix product is 1 (standard empty product;
    the form degenerates otherwise), the terminal indicator B_{p_y+1} is
    0, and the terminal regret repeats the lowest-priority regret, so the
    last term applies a continuous residual-regret refinement.
    """
    R = np.asarray(regrets, dtype=float)
    sup = np.asarray(sup_regrets, dtype=float)
    p_y = spec.p_y
    if weights.p_y != p_y or len(R) != p_y or len(sup) != p_y:
        raise DataValidationError("inconsistent dimensions in utility inputs")
    if np.any(~np.isfinite(sup)) or np.any(sup <= 0):
        raise DataValidationError("sup_regrets must be finite and strictly positive")
    if np.any(R > sup * (1 + 1e-12)):
        raise DataValidationError("regret exceeds its sup normalizer")
    B = (R <= spec.delta).astype(float)
    B_ext = np.concatenate([B, [0.0]])          # B_{p_y+1} = 0
    R_ext = np.concatenate([R, [R[-1]]])        # R_{p_y+1} = R_{p_y}
    sup_ext = np.concatenate([sup, [sup[-1]]])
    om = weights.omega
    total = 0.0
    prefix = 1.0  # empty product
    for ell in range(1, p_y + 2):
        b = B_ext[ell - 1]
        term = om[ell] * b - om[ell - 1] * (R_ext[ell - 1] / sup_ext[ell - 1]) * (1.0 - b)
        total += term * prefix
        prefix *= b
    return float(total)


class Preference(Enum):
    FIRST = "first"
    SECOND = "second"
    EQUIVALENT = "equivalent"


def prefers(regrets_a: np.ndarray, regrets_b: np.ndarray, spec: DissimilaritySpec) -> Preference:
    """Quasi-lexicographic comparison of two regret profiles.

    Scans outcomes in priority order while both profiles are within
    threshold; the first outcome where the indicators differ decides
    (within-threshold wins), and a shared failure decides by the smaller
    regret.  Anything else is equivalent.
    """
    Ra = np.asarray(regrets_a, dtype=float)
    Rb = np.asarray(regrets_b, dtype=float)
    Ba = Ra <= spec.delta
    Bb = Rb <= spec.delta
    for kappa in range(spec.p_y):
        if Ba[kappa] and Bb[kappa]:
            continue
        if Ba[kappa] != Bb[kappa]:
            return Preference.FIRST if Ba[kappa] else Preference.SECOND
        if Ra[kappa] < Rb[kappa]:
            return Preference.FIRST
        if Rb[kappa] < Ra[kappa]:
            return Preference.SECOND
        return Preference.EQUIVALENT
    return Preference.EQUIVALENT


# -- selection over a candidate class ----------------------------------------


@dataclass
class SelectionBatch:
    """Vectorized selection results over a batch of baseline histories."""

    chosen: np.ndarray      # (n,) candidate indices
    a1_pos: np.ndarray      # (n,) first-stage alphabet positions
    lam_idx: np.ndarray     # (n,) weight indices
    depth: np.ndarray       # (n,) j-hat
    tau: np.ndarray         # (n,) tie-break outcome (1-based)
    xi_sizes: np.ndarray    # (n, p_y)
    admissible: np.ndarray  # (n, C) boolean


@dataclass
class PrioritizedSelection:
    """Full per-history record: candidate values, equivalence classes,
    depth, tie-break outcome, and the chosen (a1, lambda) candidate."""

    values: np.ndarray        # (C, p_y)
    xi: list                  # per outcome: candidate index arrays
    depth: int
    tau: int
    admissible: np.ndarray    # candidate index array
    chosen_index: int
    chosen_a1_code: int
    chosen_weight: WeightVector


def select_batch(values: np.ndarray, spec: DissimilaritySpec,
                 feasible: Optional[np.ndarray] = None) -> SelectionBatch:
    """Run the selection over values shaped (n, C, p_y).

    `feasible` masks candidates whose first-stage action is infeasible at
    a given history.  Ties break to the lowest candidate index.
    """
    V = np.asarray(values, dtype=float)
    n, C, p_y = V.shape
    if p_y != spec.p_y:
        raise DataValidationError("value array / spec dimension mismatch")
    mask = np.ones((n, C), dtype=bool) if feasible is None else np.asarray(feasible, dtype=bool)
    if not mask.any(axis=1).all():
        raise DataValidationError("empty candidate class at some history")

    all_feasible = bool(mask.all())
    inter = mask.copy()
    depth = np.zeros(n, dtype=np.int64)
    xi_sizes = np.zeros((n, p_y), dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    for ell in range(p_y):
        v = V[:, :, ell] if all_feasible else np.where(mask, V[:, :, ell], -np.inf)
        best = v.max(axis=1)
        kind, delta = spec.kinds[ell], spec.delta[ell]
        if kind == "absolute":
            member = (best[:, None] - v) <= delta
        else:
            if np.any(best <= 0) or np.any(v[mask] <= 0):
                raise NumericalError("log_ratio dissimilarity needs positive values")
            member = (np.log(best)[:, None] - np.log(np.where(mask, v, 1.0))) <= delta
        if not all_feasible:
            member &= mask
        xi_sizes[:, ell] = member.sum(axis=1)
        new_inter = inter & member
        now_alive = alive & new_inter.any(axis=1)
        inter[now_alive] = new_inter[now_alive]
        depth[now_alive] = ell + 1
        alive = now_alive

    tau = np.where(depth == p_y, 1, depth + 1)
    v_tau = np.take_along_axis(V, (tau - 1)[:, None, None], axis=2)[:, :, 0]
    v_tau = np.where(inter, v_tau, -np.inf)
    chosen = np.argmax(v_tau, axis=1).astype(np.int64)
    return SelectionBatch(
        chosen=chosen,
        a1_pos=chosen // 1,  # caller rescales via candidate class
        lam_idx=chosen % 1,
        depth=depth,
        tau=tau.astype(np.int64),
        xi_sizes=xi_sizes,
        admissible=inter,
    )


def _attach_candidate_split(batch: SelectionBatch, n_weights: int) -> SelectionBatch:
    batch.a1_pos = batch.chosen // n_weights
    batch.lam_idx = batch.chosen % n_weights
    return batch


# -- candidate bank: cached per-candidate Q-model stacks ----------------------


class CandidateBank:
    """Fitted stage models for every candidate (a1, lambda) rule.

    The last stage is one shared multi-outcome fit.  Earlier stages are
    per-weight: with the linear engine a single factorization of each
    stage's normal equations is solved against all candidates'
    pseudo-outcome targets at once; other engines fall back to a
    per-candidate recursion.
    """

    def __init__(self, candidates: CandidateClass, last_model, betas: Optional[dict],
                 stacks: Optional[list], engine, action_codes, action_values, K: int, p_y: int):
        self.candidates = candidates
        self.last_model = last_model
        self.betas = betas          # linear path: {k: (N_w, d_k, p_y)}
        self.stacks = stacks        # generic path: per-weight QModelStack
        self.engine = engine
        self.action_codes = action_codes
        self.action_values = action_values
        self.K = K
        self.p_y = p_y

    # ---- fitting ----

    @staticmethod
    def fit(data: Dataset, candidates: CandidateClass, engine=None) -> "CandidateBank":
        engine = engine or LinearEngine()
        last = fit_stage_K(data, engine)
        W = candidates.stage2_weights
        if data.K == 1:
            return CandidateBank(candidates, last, {}, None, engine,
                                 data.action_codes, data.action_values, 1, data.p_y)
        if isinstance(engine, LinearEngine):
            return CandidateBank._fit_linear(data, candidates, engine, last)
        return CandidateBank._fit_generic(data, candidates, engine, last)

    @staticmethod
    def _fit_linear(data: Dataset, candidates: CandidateClass, engine: LinearEngine, last) -> "CandidateBank":
        W = candidates.stage2_weights
        N_w, p_y = W.shape
        n = data.n
        betas: dict = {}
        pseudo = None  # (N_w, n, p_y)
        for k in range(data.K - 2, -1, -1):
            si_next = StageInputs.from_dataset(data, k + 1)
            q = si_next.q
            if k + 1 == data.K - 1:
                vals = last.predict_all(si_next)                      # (n, q, p_y)
                scores = np.einsum("nqp,wp->wnq", vals, W)
                scores = np.where(data.feas[k + 1][None, :, :], scores, -np.inf)
                a_choice = np.argmax(scores, axis=2)                  # (N_w, n)
                pseudo = vals[np.arange(n)[None, :], a_choice, :]     # (N_w, n, p_y)
            else:
                beta_next = betas[k + 1]                              # (N_w, d, p_y)
                vals_wa = np.empty((N_w, n, q, p_y))
                for a in range(q):
                    D = design_matrix(engine.basis, si_next, np.full(n, a, dtype=np.int64))
                    vals_wa[:, :, a, :] = np.einsum("nd,wdp->wnp", D, beta_next)
                scores = np.einsum("wnqp,wp->wnq", vals_wa, W)
                scores = np.where(data.feas[k + 1][None, :, :], scores, -np.inf)
                a_choice = np.argmax(scores, axis=2)
                pseudo = np.take_along_axis(
                    vals_wa, a_choice[:, :, None, None], axis=2
                )[:, :, 0, :]
            si_k = StageInputs.from_dataset(data, k)
            Phi, factor = engine.factorize(si_k, data.A[k])
            targets = pseudo.transpose(1, 0, 2).reshape(n, N_w * p_y)
            B = engine.solve(Phi, factor, targets)                    # (d, N_w * p_y)
            betas[k] = B.reshape(-1, N_w, p_y).transpose(1, 0, 2)
        return CandidateBank(candidates, last, betas, None, engine,
                             data.action_codes, data.action_values, data.K, p_y)

    @staticmethod
    def _fit_generic(data: Dataset, candidates: CandidateClass, engine, last) -> "CandidateBank":
        from .q_regression import QModelStack as _Stack

        W = candidates.stage2_weights
        stacks = []
        for w in range(W.shape[0]):
            models = [None] * data.K
            models[data.K - 1] = last
            for k in range(data.K - 2, -1, -1):
                si_next = StageInputs.from_dataset(data, k + 1)
                vals = models[k + 1].predict_all(si_next)             # (n, q, p_y)
                scores = vals @ W[w]
                scores = np.where(data.feas[k + 1], scores, -np.inf)
                a_choice = np.argmax(scores, axis=1)
                pseudo = vals[np.arange(data.n), a_choice, :]
                models[k] = engine.fit_stage(StageInputs.from_dataset(data, k), data.A[k], pseudo)
            stacks.append(_Stack(models, data.action_codes, data.action_values, data.p_y,
                                 downstream=f"lambda[{w}]"))
        return CandidateBank(candidates, last, None, stacks, engine,
                             data.action_codes, data.action_values, data.K, data.p_y)

    # ---- evaluation ----

    @property
    def n_weights(self) -> int:
        return self.candidates.n_weights

    def values_at(self, X1: np.ndarray) -> np.ndarray:
        """Candidate values (n, C, p_y) at fresh baseline histories, ordered
        a1-major to match `CandidateClass` indexing."""
        X1 = np.asarray(X1, dtype=float)
        n = X1.shape[0]
        q1 = len(self.action_codes[0])
        N_w = self.n_weights
        out = np.empty((n, q1 * N_w, self.p_y))
        si1 = StageInputs(k=0, Xs=[X1], A_pos=[], action_codes=self.action_codes,
                          action_values=self.action_values)
        if self.K == 1:
            vals = self.last_model.predict_all(si1)  # (n, q1, p_y)
            for a1 in range(q1):
                out[:, a1 * N_w:(a1 + 1) * N_w, :] = vals[:, a1, None, :]
            return out
        if self.betas is not None:
            beta0 = self.betas[0]  # (N_w, d, p_y)
            flat = beta0.transpose(1, 0, 2).reshape(beta0.shape[1], N_w * self.p_y)
            for a1 in range(q1):
                D = design_matrix(self.engine.basis, si1, np.full(n, a1, dtype=np.int64))
                out[:, a1 * N_w:(a1 + 1) * N_w, :] = (D @ flat).reshape(n, N_w, self.p_y)
            return out
        for w, stack in enumerate(self.stacks):
            vals = stack.predict_all(si1)  # (n, q1, p_y)
            for a1 in range(q1):
                out[:, a1 * N_w + w, :] = vals[:, a1, :]
        return out

    def stage_values(self, si: StageInputs, lam_rows: np.ndarray) -> np.ndarray:
        """(n, q, p_y) stage-k fitted values under each row's selected weight."""
        if si.k == self.K - 1:
            return self.last_model.predict_all(si)
        if self.betas is not None:
            beta_rows = self.betas[si.k][lam_rows]  # (n, d, p_y)
            out = np.empty((si.n, si.q, self.p_y))
            for a in range(si.q):
                D = design_matrix(self.engine.basis, si, np.full(si.n, a, dtype=np.int64))
                out[:, a, :] = np.einsum("nd,ndp->np", D, beta_rows)
            return out
        out = np.empty((si.n, si.q, self.p_y))
        for w in np.unique(lam_rows):
            rows = lam_rows == w
            sub = StageInputs(k=si.k, Xs=[x[rows] for x in si.Xs],
                              A_pos=[a[rows] for a in si.A_pos],
                              action_codes=si.action_codes, action_values=si.action_values)
            out[rows] = self.stacks[int(w)].predict_all(sub)
        return out

    def stack_for(self, lam_idx: int) -> QModelStack:
        """Materialize the QModelStack of one candidate weight."""
        if self.stacks is not None:
            return self.stacks[lam_idx]
        from .q_regression import LinearStageModel

        models = [None] * self.K
        models[self.K - 1] = self.last_model
        for k in range(self.K - 1):
            models[k] = LinearStageModel(self.engine.basis, k, self.betas[k][lam_idx])
        return QModelStack(models, self.action_codes, self.action_values, self.p_y,
                           downstream=f"lambda[{lam_idx}]")

    def to_doc(self) -> dict:
        if self.betas is None and self.K > 1:
            return {
                "path": "generic",
                "last": None,
                "stacks": [s.to_doc() for s in self.stacks],
                "weights": self.candidates.stage2_weights.tolist(),
                "stage1_codes": self.candidates.stage1_codes.tolist(),
            }
        return {
            "path": "linear",
            "last": self.last_model.to_doc(),
            "betas": {str(k): b.tolist() for k, b in (self.betas or {}).items()},
            "weights": self.candidates.stage2_weights.tolist(),
            "stage1_codes": self.candidates.stage1_codes.tolist(),
            "action_codes": [c.tolist() for c in self.action_codes],
            "action_values": [v.tolist() for v in self.action_values],
            "K": self.K,
            "p_y": self.p_y,
        }

    @staticmethod
    def from_doc(doc: dict) -> "CandidateBank":
        from .q_regression import FeatureBasis, LinearStageModel

        candidates = CandidateClass(np.asarray(doc["weights"], dtype=float),
                                    np.asarray(doc["stage1_codes"]))
        if doc["path"] == "generic":
            stacks = [QModelStack.from_doc(s) for s in doc["stacks"]]
            first = stacks[0]
            return CandidateBank(candidates, stacks[0].stage_models[-1], None, stacks, None,
                                 first.action_codes, first.action_values, first.K, first.n_targets)
        m = doc["last"]
        last = LinearStageModel(FeatureBasis.from_dict(m["basis"]), m["k"],
                                np.asarray(m["coef"], dtype=float))
        betas = {int(k): np.asarray(v, dtype=float) for k, v in doc["betas"].items()}
        return CandidateBank(
            candidates, last, betas, None, LinearEngine(FeatureBasis.from_dict(m["basis"])),
            [np.asarray(c, dtype=np.int64) for c in doc["action_codes"]],
            [np.asarray(v, dtype=float) for v in doc["action_values"]],
            doc["K"], doc["p_y"],
        )


# -- the estimated prioritized regime -----------------------------------------


class PrioritizedRegime(Regime):
    """Per-h1 tailored regime induced by prioritized selection.

    Stage 1 runs the selection at the presented history; later stages
    play the weight-indexed rule of the candidate selected at that row's
    baseline history.  Selection results are cached per batch content so
    the stage-1 and stage-2 passes over the same rows share one sweep.
    """

    kind = "prioritized"

    def __init__(self, bank: CandidateBank, spec: DissimilaritySpec):
        self.bank = bank
        self.spec = spec
        self.action_codes = bank.action_codes
        self._cache: dict = {}

    _CHUNK = 1024  # keeps the (rows x candidates x outcomes) sweep in cache

    def select_rows(self, X1: np.ndarray, feas1: Optional[np.ndarray] = None) -> SelectionBatch:
        X1 = np.asarray(X1, dtype=float)
        q1 = len(self.action_codes[0])
        if feas1 is None:
            feas1 = np.ones((X1.shape[0], q1), dtype=bool)
        key = hashlib.sha256(X1.tobytes() + feas1.tobytes()).digest()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        parts = []
        for lo in range(0, X1.shape[0], self._CHUNK):
            hi = min(lo + self._CHUNK, X1.shape[0])
            values = self.bank.values_at(X1[lo:hi])
            cand_mask = np.repeat(feas1[lo:hi], self.bank.n_weights, axis=1)
            parts.append(select_batch(values, self.spec, cand_mask))
        batch = _attach_candidate_split(
            SelectionBatch(
                chosen=np.concatenate([p.chosen for p in parts]),
                a1_pos=np.concatenate([p.a1_pos for p in parts]),
                lam_idx=np.concatenate([p.lam_idx for p in parts]),
                depth=np.concatenate([p.depth for p in parts]),
                tau=np.concatenate([p.tau for p in parts]),
                xi_sizes=np.concatenate([p.xi_sizes for p in parts]),
                admissible=np.concatenate([p.admissible for p in parts]),
            ),
            self.bank.n_weights,
        )
        if len(self._cache) >= 4:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = batch
        return batch

    def stage_actions(self, k, X, A, feas):
        if k == 0:
            batch = self.select_rows(np.asarray(X[0], dtype=float), feas)
            return batch.a1_pos.astype(np.int64)
        # later stages need the weight selected at this row's baseline history;
        # a cache hit reuses the mask seen at stage 1, otherwise feasibility at
        # stage 1 is taken as unrestricted.
        batch = self.select_rows(np.asarray(X[0], dtype=float))
        si = StageInputs(k=k, Xs=list(X[: k + 1]), A_pos=list(A[:k]),
                         action_codes=self.bank.action_codes,
                         action_values=self.bank.action_values)
        vals = self.bank.stage_values(si, batch.lam_idx)
        W = self.bank.candidates.stage2_weights[batch.lam_idx]
        scores = np.einsum("nqp,np->nq", vals, W)
        scores = np.where(feas, scores, -np.inf)
        return np.argmax(scores, axis=1).astype(np.int64)

    def to_doc(self):
        return {"kind": self.kind, "bank": self.bank.to_doc(), "dissimilarity": self.spec.to_dict()}


register_regime_kind(
    "prioritized",
    lambda doc: PrioritizedRegime(CandidateBank.from_doc(doc["bank"]),
                                  DissimilaritySpec.from_dict(doc["dissimilarity"])),
)


def select_regime(h1: History, candidates: CandidateClass, bank: CandidateBank,
                  spec: DissimilaritySpec, feasible: Optional[np.ndarray] = None) -> PrioritizedSelection:
    """Full selection record at a single baseline history."""
    X1 = np.asarray(h1.covariates[0], dtype=float)[None, :]
    values = bank.values_at(X1)[0]  # (C, p_y)
    C = values.shape[0]
    q1 = len(bank.action_codes[0])
    mask = np.ones(C, dtype=bool)
    if feasible is not None:
        mask = np.repeat(np.asarray(feasible, dtype=bool), bank.n_weights)
    batch = _attach_candidate_split(
        select_batch(values[None, :, :], spec, mask[None, :]), bank.n_weights
    )
    xi = []
    for ell in range(spec.p_y):
        masked = np.where(mask, values[:, ell], -np.inf)
        member = _membership(masked, masked.max(), spec.kinds[ell], spec.delta[ell]) & mask
        xi.append(np.flatnonzero(member))
    chosen = int(batch.chosen[0])
    a1_pos, lam_idx = candidates.split_index(chosen)
    return PrioritizedSelection(
        values=values,
        xi=xi,
        depth=int(batch.depth[0]),
        tau=int(batch.tau[0]),
        admissible=np.flatnonzero(batch.admissible[0]),
        chosen_index=chosen,
        chosen_a1_code=int(candidates.stage1_codes[a1_pos]),
        chosen_weight=WeightVector(candidates.stage2_weights[lam_idx]),
    )


# -- fitting entry point -------------------------------------------------------


@dataclass
class PrioritizedFit:
    """Fitted regime plus the training-sweep audit trail."""

    regime: PrioritizedRegime
    candidates: CandidateClass
    bank: CandidateBank
    selection: SelectionBatch
    sup_regrets: np.ndarray
    values: np.ndarray  # (n, C, p_y) training-history candidate values

    def write_trace_csv(self, path: str) -> None:
        """Per-history audit: equivalence class sizes, depth, tie-break, choice."""
        p_y = self.sup_regrets.shape[0]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["h1_index"] + [f"xi_size_{ell + 1}" for ell in range(p_y)]
                + ["j_hat", "tau_hat", "candidate", "a1_code"]
                + [f"lambda_{ell + 1}" for ell in range(p_y)]
            )
            for i in range(len(self.selection.chosen)):
                lam = self.candidates.stage2_weights[self.selection.lam_idx[i]]
                w.writerow(
                    [i] + self.selection.xi_sizes[i].tolist()
                    + [int(self.selection.depth[i]), int(self.selection.tau[i]),
                       int(self.selection.chosen[i]),
                       int(self.candidates.stage1_codes[self.selection.a1_pos[i]])]
                    + [repr(float(v)) for v in lam]
                )


def fit_prioritized(data: Dataset, spec: DissimilaritySpec, n_lambda: int = 1000,
                    seed: int = 0, engine=None,
                    weights: Optional[Sequence[WeightVector]] = None) -> PrioritizedFit:
    """Fit the prioritized regime on `data` over the sampled candidate class."""
    if weights is None:
        weights = sample_simplex(n_lambda, data.p_y, seed)
    candidates = CandidateClass.from_weights(weights, data.action_codes[0])
    bank = CandidateBank.fit(data, candidates, engine)
    values = bank.values_at(data.X[0])
    cand_mask = np.repeat(data.feas[0], bank.n_weights, axis=1)
    selection = _attach_candidate_split(select_batch(values, spec, cand_mask), bank.n_weights)

    sup_regrets = np.empty(data.p_y)
    for ell in range(data.p_y):
        v = np.where(cand_mask, values[:, :, ell], np.nan)
        best = np.nanmax(v, axis=1)
        if spec.kinds[ell] == "absolute":
            reg = best[:, None] - v
        else:
            if np.any(best <= 0) or np.any(v[cand_mask] <= 0):
                raise NumericalError("log_ratio dissimilarity needs positive values")
            reg = np.log(best)[:, None] - np.log(v)
        sup_regrets[ell] = max(float(np.nanmax(reg)), _SUP_REGRET_FLOOR)

    regime = PrioritizedRegime(bank, spec)
    return PrioritizedFit(regime=regime, candidates=candidates, bank=bank,
                          selection=selection, sup_regrets=sup_regrets, values=values)
