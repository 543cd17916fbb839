"""Regression engine and backward induction for stagewise outcome models.

The default engine is least squares on an expanded design (history main
effects, action encoding, action-by-history interactions, optional past
action interactions and covariate squares), solved through a single
Cholesky factorization of the normal equations per stage and reused
across all outcomes and pseudo-outcome targets.  A bagged depth-limited
tree engine is available behind the same interface for nonparametric
fits, and a saturated cell-mean engine for discrete instances.

Backward induction fits the last stage against raw outcomes, then each
earlier stage against the next stage's model evaluated at the action a
given downstream rule would take.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data_model import Dataset, History
from .errors import DataValidationError, NumericalError
from .regime import Regime, register_regime_kind

logger = logging.getLogger(__name__)

_RIDGE = 1e-8
_COND_RIDGE_TRIGGER = 1e10
_COND_FATAL = 1e14


@dataclass(frozen=True)
class FeatureBasis:
    """Design specification shared by all stages.

    kind "linear" expands histories as described in the module docstring;
    "saturated" requests exact cell means (discrete instances only).
    poly_degree 2 adds squared covariate columns.
    """

    kind: str = "linear"
    action_interactions: bool = True
    past_interactions: bool = True
    poly_degree: int = 1

    def __post_init__(self):
        if self.kind not in ("linear", "saturated"):
            raise DataValidationError(f"unknown basis kind '{self.kind}'")
        if self.poly_degree not in (1, 2):
            raise DataValidationError("poly_degree must be 1 or 2")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "action_interactions": self.action_interactions,
            "past_interactions": self.past_interactions,
            "poly_degree": self.poly_degree,
        }

    @staticmethod
    def from_dict(d: dict) -> "FeatureBasis":
        return FeatureBasis(**d)


@dataclass(frozen=True)
class StageInputs:
    """Bundle of what a stage-k fit or prediction needs (k is 0-based)."""

    k: int
    Xs: list            # covariate matrices for stages 0..k
    A_pos: list         # observed action positions for stages 0..k-1
    action_codes: list
    action_values: list

    @staticmethod
    def from_dataset(data: Dataset, k: int) -> "StageInputs":
        return StageInputs(
            k=k,
            Xs=[data.X[j] for j in range(k + 1)],
            A_pos=[data.A[j] for j in range(k)],
            action_codes=data.action_codes,
            action_values=data.action_values,
        )

    @property
    def n(self) -> int:
        return self.Xs[0].shape[0]

    @property
    def q(self) -> int:
        return len(self.action_codes[self.k])

    def signed(self, j: int) -> np.ndarray:
        return self.action_values[j][self.A_pos[j]]


def _history_matrix(basis: FeatureBasis, si: StageInputs) -> np.ndarray:
    blocks = [si.Xs[0]]
    cov_cols = [np.ones(si.Xs[0].shape[1], dtype=bool)]
    for j in range(1, si.k + 1):
        blocks.append(si.signed(j - 1)[:, None])
        cov_cols.append(np.zeros(1, dtype=bool))
        blocks.append(si.Xs[j])
        cov_cols.append(np.ones(si.Xs[j].shape[1], dtype=bool))
    H = np.concatenate(blocks, axis=1)
    is_cov = np.concatenate(cov_cols)
    extras = []
    if basis.poly_degree >= 2 and is_cov.any():
        extras.append(H[:, is_cov] ** 2)
    if basis.past_interactions:
        for j in range(si.k):
            aj = si.signed(j)[:, None]
            for i in range(j + 1):
                extras.append(aj * si.Xs[i])
    if extras:
        H = np.concatenate([H] + extras, axis=1)
    return H


def _action_encoding(si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
    """(n, m) numeric encoding of the current action: signed column for
    binary stages, q-1 indicator columns otherwise."""
    q = si.q
    if q == 2:
        return si.action_values[si.k][a_pos][:, None]
    D = np.zeros((len(a_pos), q - 1))
    hot = a_pos >= 1
    D[np.flatnonzero(hot), a_pos[hot] - 1] = 1.0
    return D


def design_matrix(basis: FeatureBasis, si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
    H = _history_matrix(basis, si)
    Acols = _action_encoding(si, np.asarray(a_pos))
    parts = [np.ones((si.n, 1)), H, Acols]
    if basis.action_interactions:
        # one interaction block per action column
        parts.extend(Acols[:, j][:, None] * H for j in range(Acols.shape[1]))
    return np.concatenate(parts, axis=1)


# -- engines ---------------------------------------------------------------


class LinearStageModel:
    """Least-squares fit at one stage; coefficients shaped (d, n_targets)."""

    def __init__(self, basis: FeatureBasis, k: int, coef: np.ndarray):
        self.basis = basis
        self.k = k
        self.coef = coef

    def predict(self, si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
        return design_matrix(self.basis, si, a_pos) @ self.coef

    def predict_all(self, si: StageInputs) -> np.ndarray:
        """(n, q, t) predictions at every action in the stage alphabet."""
        out = np.empty((si.n, si.q, self.coef.shape[1]))
        for a in range(si.q):
            out[:, a, :] = self.predict(si, np.full(si.n, a, dtype=np.int64))
        return out

    def to_doc(self) -> dict:
        return {"type": "linear", "basis": self.basis.to_dict(), "k": self.k,
                "coef": self.coef.tolist()}


class SaturatedStageModel:
    """Exact cell means over distinct (history, action) rows.

    Equivalent to least squares on a saturated indicator basis; rows at
    unseen cells fall back to the global mean (logged).
    """

    def __init__(self, k: int, cells: dict, global_mean: np.ndarray):
        self.k = k
        self.cells = cells
        self.global_mean = global_mean

    @staticmethod
    def _keys(si: StageInputs, a_pos: np.ndarray) -> list:
        mats = [np.asarray(x, dtype=float) for x in si.Xs]
        keys = []
        for i in range(si.n):
            parts = [m[i].tobytes() for m in mats]
            parts += [int(si.A_pos[j][i]).to_bytes(4, "little", signed=True) for j in range(si.k)]
            parts.append(int(a_pos[i]).to_bytes(4, "little", signed=True))
            keys.append(b"".join(parts))
        return keys

    def predict(self, si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
        keys = self._keys(si, np.asarray(a_pos))
        out = np.empty((si.n, len(self.global_mean)))
        misses = 0
        for i, key in enumerate(keys):
            hit = self.cells.get(key)
            if hit is None:
                misses += 1
                out[i] = self.global_mean
            else:
                out[i] = hit
        if misses:
            logger.warning("saturated model: %d rows at unseen cells, using global mean", misses)
        return out

    def predict_all(self, si: StageInputs) -> np.ndarray:
        out = np.empty((si.n, si.q, len(self.global_mean)))
        for a in range(si.q):
            out[:, a, :] = self.predict(si, np.full(si.n, a, dtype=np.int64))
        return out

    def to_doc(self) -> dict:
        raise NotImplementedError("saturated models are test scaffolding, not serialized")


class LinearEngine:
    """Normal-equation least squares with ridge fallback on near-singular designs."""

    name = "linear"

    def __init__(self, basis: Optional[FeatureBasis] = None):
        self.basis = basis or FeatureBasis()

    def factorize(self, si: StageInputs, a_pos: np.ndarray):
        """Cholesky factor of the stage's normal equations, reused per target set."""
        Phi = design_matrix(self.basis, si, a_pos)
        n, d = Phi.shape
        if n < d:
            raise NumericalError(f"stage {si.k + 1}: n={n} rows < {d} features")
        G = Phi.T @ Phi
        cond = np.linalg.cond(G)
        if cond > _COND_RIDGE_TRIGGER:
            G = G + _RIDGE * np.eye(d)
            cond = np.linalg.cond(G)
            if cond > _COND_FATAL:
                raise NumericalError(
                    f"stage {si.k + 1}: design rank-deficient even after ridge "
                    f"(condition number {cond:.3e})"
                )
        try:
            factor = cho_factor(G)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise NumericalError(
                f"stage {si.k + 1}: normal equations not positive definite "
                f"(condition number {cond:.3e})"
            ) from exc
        return Phi, factor

    def solve(self, Phi: np.ndarray, factor, targets: np.ndarray) -> np.ndarray:
        T = targets if targets.ndim == 2 else targets[:, None]
        return cho_solve(factor, Phi.T @ T)

    def fit_stage(self, si: StageInputs, a_pos: np.ndarray, targets: np.ndarray) -> LinearStageModel:
        Phi, factor = self.factorize(si, a_pos)
        return LinearStageModel(self.basis, si.k, self.solve(Phi, factor, np.asarray(targets, dtype=float)))


class SaturatedEngine:
    """Cell-mean engine for finite discrete instances."""

    name = "saturated"
    basis = FeatureBasis(kind="saturated")

    def fit_stage(self, si: StageInputs, a_pos: np.ndarray, targets: np.ndarray) -> SaturatedStageModel:
        T = np.asarray(targets, dtype=float)
        if T.ndim == 1:
            T = T[:, None]
        keys = SaturatedStageModel._keys(si, np.asarray(a_pos))
        sums: dict = {}
        counts: dict = {}
        for i, key in enumerate(keys):
            if key in sums:
                sums[key] += T[i]
                counts[key] += 1
            else:
                sums[key] = T[i].copy()
                counts[key] = 1
        cells = {k: sums[k] / counts[k] for k in sums}
        return SaturatedStageModel(si.k, cells, T.mean(axis=0))


class TreeStageModel:
    """Bagged depth-limited regression trees, one ensemble per target."""

    def __init__(self, k: int, ensembles: list):
        self.k = k
        self.ensembles = ensembles  # per target: list of fitted trees

    @staticmethod
    def _features(si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
        cols = [si.Xs[0]]
        for j in range(1, si.k + 1):
            cols.append(si.signed(j - 1)[:, None])
            cols.append(si.Xs[j])
        cols.append(si.action_values[si.k][np.asarray(a_pos)][:, None])
        return np.concatenate(cols, axis=1)

    def predict(self, si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
        F = self._features(si, a_pos)
        out = np.empty((F.shape[0], len(self.ensembles)))
        for t, trees in enumerate(self.ensembles):
            acc = np.zeros(F.shape[0])
            for tree in trees:
                acc += tree.predict(F)
            out[:, t] = acc / len(trees)
        return out

    def predict_all(self, si: StageInputs) -> np.ndarray:
        out = np.empty((si.n, si.q, len(self.ensembles)))
        for a in range(si.q):
            out[:, a, :] = self.predict(si, np.full(si.n, a, dtype=np.int64))
        return out

    def to_doc(self) -> dict:
        payload = []
        for trees in self.ensembles:
            payload.append([
                {
                    "children_left": t.tree_.children_left.tolist(),
                    "children_right": t.tree_.children_right.tolist(),
                    "feature": t.tree_.feature.tolist(),
                    "threshold": t.tree_.threshold.tolist(),
                    "value": t.tree_.value[:, :, 0].ravel().tolist(),
                }
                for t in trees
            ])
        return {"type": "trees", "k": self.k, "ensembles": payload}


class _FrozenTree:
    """Predict-only tree rebuilt from serialized node arrays."""

    def __init__(self, doc: dict):
        self.left = np.asarray(doc["children_left"])
        self.right = np.asarray(doc["children_right"])
        self.feature = np.asarray(doc["feature"])
        self.threshold = np.asarray(doc["threshold"])
        self.value = np.asarray(doc["value"])

    def predict(self, F: np.ndarray) -> np.ndarray:
        idx = np.zeros(F.shape[0], dtype=np.int64)
        active = self.left[idx] != -1
        while active.any():
            rows = np.flatnonzero(active)
            node = idx[rows]
            go_left = F[rows, self.feature[node]] <= self.threshold[node]
            idx[rows] = np.where(go_left, self.left[node], self.right[node])
            active = self.left[idx] != -1
        return self.value[idx]


class TreeEngine:
    """Bootstrap-aggregated depth-limited trees (deterministic given seed)."""

    name = "trees"
    basis = FeatureBasis()  # unused by trees; kept for interface parity

    def __init__(self, n_trees: int = 50, max_depth: int = 4, seed: int = 0):
        self.n_trees = n_trees
        self.max_depth = max_depth
        self.seed = seed

    def fit_stage(self, si: StageInputs, a_pos: np.ndarray, targets: np.ndarray) -> TreeStageModel:
        from sklearn.tree import DecisionTreeRegressor

        T = np.asarray(targets, dtype=float)
        if T.ndim == 1:
            T = T[:, None]
        F = TreeStageModel._features(si, np.asarray(a_pos))
        rng = np.random.default_rng((self.seed, si.k))
        ensembles = []
        for t in range(T.shape[1]):
            trees = []
            for b in range(self.n_trees):
                idx = rng.integers(0, si.n, size=si.n)
                tree = DecisionTreeRegressor(max_depth=self.max_depth, random_state=0)
                tree.fit(F[idx], T[idx, t])
                trees.append(tree)
            ensembles.append(trees)
        return TreeStageModel(si.k, ensembles)


def make_engine(name: str, basis: Optional[FeatureBasis] = None, seed: int = 0,
                n_trees: int = 50, max_depth: int = 4):
    if name == "linear":
        return LinearEngine(basis)
    if name == "trees":
        return TreeEngine(n_trees=n_trees, max_depth=max_depth, seed=seed)
    if name == "saturated":
        return SaturatedEngine()
    raise DataValidationError(f"unknown engine '{name}'")


# -- model stacks ------------------------------------------------------------


class _SingleOutcomeView:
    def __init__(self, model, outcome: int):
        self._model = model
        self._outcome = outcome

    def predict(self, si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
        return self._model.predict(si, a_pos)[:, self._outcome]


@dataclass
class QModelStack:
    """Fitted models per stage (k = 0..K-1), each multi-target.

    Stage K-1 was fit against raw targets; stage k < K-1 against the
    stage-(k+1) model's values at the downstream rule's action.
    """

    stage_models: list
    action_codes: list
    action_values: list
    n_targets: int
    downstream: str = ""

    @property
    def K(self) -> int:
        return len(self.stage_models)

    def inputs(self, data_like, k: int) -> StageInputs:
        return StageInputs(
            k=k,
            Xs=[data_like.X[j] for j in range(k + 1)],
            A_pos=[data_like.A[j] for j in range(k)],
            action_codes=self.action_codes,
            action_values=self.action_values,
        )

    def predict(self, si: StageInputs, a_pos: np.ndarray) -> np.ndarray:
        return self.stage_models[si.k].predict(si, a_pos)

    def predict_all(self, si: StageInputs) -> np.ndarray:
        return self.stage_models[si.k].predict_all(si)

    def model(self, k: int, outcome: int) -> _SingleOutcomeView:
        if not 0 <= outcome < self.n_targets:
            raise DataValidationError(f"outcome index {outcome} out of range")
        return _SingleOutcomeView(self.stage_models[k], outcome)

    def to_doc(self) -> dict:
        return {
            "stage_models": [m.to_doc() for m in self.stage_models],
            "action_codes": [c.tolist() for c in self.action_codes],
            "action_values": [v.tolist() for v in self.action_values],
            "n_targets": self.n_targets,
            "downstream": self.downstream,
        }

    @staticmethod
    def from_doc(doc: dict) -> "QModelStack":
        models = []
        for m in doc["stage_models"]:
            if m["type"] == "linear":
                models.append(LinearStageModel(FeatureBasis.from_dict(m["basis"]), m["k"],
                                               np.asarray(m["coef"], dtype=float)))
            elif m["type"] == "trees":
                models.append(TreeStageModel(m["k"], [[ _FrozenTree(t) for t in trees]
                                                      for trees in m["ensembles"]]))
            else:
                raise DataValidationError(f"unknown stage model type '{m['type']}'")
        return QModelStack(
            stage_models=models,
            action_codes=[np.asarray(c, dtype=np.int64) for c in doc["action_codes"]],
            action_values=[np.asarray(v, dtype=float) for v in doc["action_values"]],
            n_targets=doc["n_targets"],
            downstream=doc.get("downstream", ""),
        )


def fit_stage_K(data: Dataset, engine=None, targets: Optional[np.ndarray] = None):
    """Last-stage fit: per-target least squares of Y on features(H^K, A^K)."""
    engine = engine or LinearEngine()
    T = data.Y if targets is None else np.asarray(targets, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    si = StageInputs.from_dataset(data, data.K - 1)
    return engine.fit_stage(si, data.A[data.K - 1], T)


def backward_induce(data: Dataset, engine=None, downstream_rule: Optional[Regime] = None,
                    targets: Optional[np.ndarray] = None, downstream_label: str = "") -> QModelStack:
    """Backward recursion: fit stage K, then regress each stage's plug-in
    values (at the downstream rule's action) on the preceding stage.

    `downstream_rule` may be any Regime; it is queried at the observed
    stage-(k+1) histories of `data`.  It is not consulted when K = 1.
    """
    engine = engine or LinearEngine()
    T = data.Y if targets is None else np.asarray(targets, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    models = [None] * data.K
    models[data.K - 1] = fit_stage_K(data, engine, T)
    for k in range(data.K - 2, -1, -1):
        if downstream_rule is None:
            raise DataValidationError("downstream_rule required for K > 1")
        nxt = k + 1
        a_next = downstream_rule.stage_actions(
            nxt, [data.X[j] for j in range(nxt + 1)], [data.A[j] for j in range(nxt)],
            data.feas[nxt],
        )
        si_next = StageInputs.from_dataset(data, nxt)
        pseudo = models[nxt].predict(si_next, a_next)
        try:
            models[k] = engine.fit_stage(StageInputs.from_dataset(data, k), data.A[k], pseudo)
        except NumericalError as exc:
            raise NumericalError(f"backward induction failed at stage {k + 1}: {exc}") from exc
    return QModelStack(
        stage_models=models,
        action_codes=data.action_codes,
        action_values=data.action_values,
        n_targets=T.shape[1],
        downstream=downstream_label,
    )


def conditional_value(stack: QModelStack, h1: History, first_action: int, outcome: int) -> float:
    """Plug-in value of playing `first_action` at h1 and the stack's
    downstream rule afterwards: the stage-1 model at (h1, a1)."""
    if not 0 <= outcome < stack.n_targets:
        raise DataValidationError(f"outcome index {outcome} out of range")
    si = StageInputs(
        k=0,
        Xs=[np.asarray(h1.covariates[0], dtype=float)[None, :]],
        A_pos=[],
        action_codes=stack.action_codes,
        action_values=stack.action_values,
    )
    pos = int(np.searchsorted(stack.action_codes[0], first_action))
    if pos >= len(stack.action_codes[0]) or stack.action_codes[0][pos] != first_action:
        raise DataValidationError(f"unknown first-stage action code {first_action}")
    return float(stack.predict(si, np.array([pos]))[0, outcome])


class GreedyQRegime(Regime):
    """Weight-indexed rule: at each stage pick the feasible action maximizing
    the weighted combination of the stack's fitted values (lowest action
    code on ties)."""

    kind = "greedy_q"

    def __init__(self, stack: QModelStack, weights: Optional[np.ndarray] = None):
        self.stack = stack
        if weights is None:
            if stack.n_targets != 1:
                raise DataValidationError("weights required for multi-target stacks")
            weights = np.ones(1)
        self.weights = np.asarray(weights, dtype=float)
        self.action_codes = stack.action_codes

    def stage_actions(self, k, X, A, feas):
        si = StageInputs(k=k, Xs=list(X[: k + 1]), A_pos=list(A[:k]),
                         action_codes=self.stack.action_codes,
                         action_values=self.stack.action_values)
        score = self.stack.predict_all(si) @ self.weights  # (n, q)
        score = np.where(feas, score, -np.inf)
        return np.argmax(score, axis=1).astype(np.int64)

    def to_doc(self):
        return {"kind": self.kind, "weights": self.weights.tolist(), "stack": self.stack.to_doc()}


register_regime_kind(
    "greedy_q",
    lambda doc: GreedyQRegime(QModelStack.from_doc(doc["stack"]), np.asarray(doc["weights"], dtype=float)),
)


def fit_greedy_qlearning(data: Dataset, targets: np.ndarray, engine=None) -> GreedyQRegime:
    """Scalar Q-learning: backward induction where each earlier stage's
    pseudo-outcome is the next stage's fitted maximum over feasible actions."""
    engine = engine or LinearEngine()
    T = np.asarray(targets, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    if T.shape[1] != 1:
        raise DataValidationError("greedy Q-learning expects a scalar target")
    models = [None] * data.K
    models[data.K - 1] = fit_stage_K(data, engine, T)
    for k in range(data.K - 2, -1, -1):
        si_next = StageInputs.from_dataset(data, k + 1)
        vals = models[k + 1].predict_all(si_next)[:, :, 0]
        vals = np.where(data.feas[k + 1], vals, -np.inf)
        pseudo = vals.max(axis=1)[:, None]
        models[k] = engine.fit_stage(StageInputs.from_dataset(data, k), data.A[k], pseudo)
    stack = QModelStack(models, data.action_codes, data.action_values, 1, downstream="greedy")
    return GreedyQRegime(stack)
