"""Treatment regimes and the finite candidate class of stage rules.

A regime maps each stage's history to a feasible action.  The candidate
class pairs every feasible first-stage action with a convex weight
vector; the weight indexes a last-stage rule that maximizes the weighted
combination of fitted outcome regressions.  Sampling the probability
simplex (plus its vertices, so single-outcome-optimal rules are always
in class) gives the finite approximation used throughout.
"""
from __future__ import annotations

import hashlib
import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data_model import History
from .errors import DataValidationError

FORMAT_VERSION = 1

_SIMPLEX_TOL = 1e-10


@dataclass(frozen=True)
class WeightVector:
    """Point on the probability simplex: entries in [0,1] summing to 1."""

    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        object.__setattr__(self, "lam", lam)
        if lam.ndim != 1 or abs(lam.sum() - 1.0) > _SIMPLEX_TOL or np.any(lam < 0) or np.any(lam > 1):
            raise DataValidationError(f"not a simplex weight: {lam}")


def sample_simplex(n_samples: int, p_y: int, seed: int) -> list:
    """Uniform draws from the (p_y - 1)-simplex via sorted-uniform spacings.

    The p_y vertex weights e_1..e_{p_y} are appended afterwards and exact
    duplicates are dropped (relevant only for p_y = 1), so the returned
    weights are distinct.
    """
    if n_samples < 1:
        raise DataValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    if p_y == 1:
        draws = np.ones((n_samples, 1))
    else:
        u = np.sort(rng.uniform(size=(n_samples, p_y - 1)), axis=1)
        edges = np.concatenate([np.zeros((n_samples, 1)), u, np.ones((n_samples, 1))], axis=1)
        draws = np.diff(edges, axis=1)
    stacked = np.concatenate([draws, np.eye(p_y)], axis=0)
    seen = set()
    out = []
    for row in stacked:
        key = row.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(WeightVector(row.copy()))
    return out


def weights_matrix(weights: Sequence[WeightVector]) -> np.ndarray:
    return np.stack([w.lam for w in weights], axis=0)


@dataclass(frozen=True)
class CandidateClass:
    """Per-h1 candidate set {(a1, lambda)}: first-stage actions crossed with stage-2 weights.

    Candidate index c enumerates a1-major: c = a1_pos * N_lambda + lam_idx,
    which fixes the lowest-index tie-break order everywhere.
    """

    stage2_weights: np.ndarray  # (N_lambda, p_y)
    stage1_codes: np.ndarray    # raw codes of the first-stage alphabet, sorted

    def __post_init__(self):
        W = np.asarray(self.stage2_weights, dtype=float)
        object.__setattr__(self, "stage2_weights", W)
        object.__setattr__(self, "stage1_codes", np.asarray(self.stage1_codes, dtype=np.int64))
        if W.shape[0] < 1:
            raise DataValidationError("candidate class needs at least one weight")
        if len({row.tobytes() for row in W}) != W.shape[0]:
            raise DataValidationError("candidate weights must be distinct")

    @property
    def n_weights(self) -> int:
        return self.stage2_weights.shape[0]

    @property
    def n_candidates(self) -> int:
        return len(self.stage1_codes) * self.n_weights

    def split_index(self, c: int) -> tuple:
        """Candidate index -> (a1 position, lambda index)."""
        return c // self.n_weights, c % self.n_weights

    @staticmethod
    def from_weights(weights: Sequence[WeightVector], stage1_codes) -> "CandidateClass":
        return CandidateClass(weights_matrix(weights), np.asarray(stage1_codes))


class Regime(ABC):
    """Deterministic feasible regime: same history, same action."""

    kind = "abstract"

    @abstractmethod
    def stage_actions(self, k: int, X: list, A: list, feas: np.ndarray) -> np.ndarray:
        """Vector of stage-k action positions (0-based stage index k).

        X holds covariate matrices for stages 1..k+1 and A the chosen
        action positions for stages 1..k; `feas` is the (n, q_k) mask.
        """

    @abstractmethod
    def to_doc(self) -> dict:
        """JSON-serializable payload (inverse of `regime_from_doc`)."""


def _forced_or_fixed(fixed_pos: int, feas: np.ndarray) -> np.ndarray:
    """Fixed action where feasible; the forced action on singleton rows."""
    n, q = feas.shape
    out = np.full(n, fixed_pos, dtype=np.int64)
    bad = ~feas[np.arange(n), out]
    if bad.any():
        singleton = feas.sum(axis=1) == 1
        fixable = bad & singleton
        out[fixable] = np.argmax(feas[fixable], axis=1)
        if (bad & ~singleton).any():
            raise DataValidationError("fixed action infeasible on a row with multiple feasible actions")
    return out


class FixedRegime(Regime):
    """Constant action per stage (the trial's embedded regimes)."""

    kind = "fixed"

    def __init__(self, codes: Sequence[int], action_codes: Sequence[np.ndarray]):
        self.codes = [int(c) for c in codes]
        self.action_codes = [np.asarray(ac, dtype=np.int64) for ac in action_codes]
        self.positions = []
        for k, c in enumerate(self.codes):
            pos = int(np.searchsorted(self.action_codes[k], c))
            if pos >= len(self.action_codes[k]) or self.action_codes[k][pos] != c:
                raise DataValidationError(f"fixed action code {c} not in stage-{k + 1} alphabet")
            self.positions.append(pos)

    def stage_actions(self, k, X, A, feas):
        return _forced_or_fixed(self.positions[k], feas)

    def to_doc(self):
        return {
            "kind": self.kind,
            "codes": self.codes,
            "action_codes": [ac.tolist() for ac in self.action_codes],
        }


def history_key(covariates: Sequence[np.ndarray], action_codes: Sequence[int]) -> bytes:
    """Canonical byte key of a history (exact float64 content)."""
    h = hashlib.sha256()
    for j, x in enumerate(covariates):
        h.update(np.asarray(x, dtype=float).tobytes())
        if j < len(action_codes):
            h.update(int(action_codes[j]).to_bytes(4, "little", signed=True))
    return h.digest()


class TabulatedRegime(Regime):
    """Explicit map from history keys to action codes (per-h1 tailored rules)."""

    kind = "tabulated"

    def __init__(self, tables: Sequence[dict], action_codes: Sequence[np.ndarray]):
        # tables[k]: history key bytes -> raw action code
        self.tables = list(tables)
        self.action_codes = [np.asarray(ac, dtype=np.int64) for ac in action_codes]

    def stage_actions(self, k, X, A, feas):
        n = X[0].shape[0]
        out = np.empty(n, dtype=np.int64)
        for i in range(n):
            key = history_key(
                [X[j][i] for j in range(k + 1)],
                [int(self.action_codes[j][A[j][i]]) for j in range(k)],
            )
            if key not in self.tables[k]:
                raise DataValidationError(f"tabulated rule has no entry for row {i} at stage {k + 1}")
            code = self.tables[k][key]
            pos = int(np.searchsorted(self.action_codes[k], code))
            out[i] = pos
        if not feas[np.arange(n), out].all():
            raise DataValidationError("tabulated action infeasible")
        return out

    def to_doc(self):
        return {
            "kind": self.kind,
            "tables": [{k.hex(): int(v) for k, v in t.items()} for t in self.tables],
            "action_codes": [ac.tolist() for ac in self.action_codes],
        }


def apply_regime(regime: Regime, history: History, qmodels=None, feasible: Optional[np.ndarray] = None) -> int:
    """Action code recommended at a single history.

    `qmodels` is accepted for interface parity with weight-indexed rules
    (those regimes carry their fitted stack already); `feasible` defaults
    to the full alphabet.  Ties inside weight-indexed rules break to the
    lowest action code.
    """
    k = history.stage - 1
    X = [np.asarray(x, dtype=float)[None, :] for x in history.covariates]
    codes = getattr(regime, "action_codes")
    A = []
    for j, a in enumerate(history.actions):
        pos = int(np.searchsorted(codes[j], a))
        A.append(np.array([pos], dtype=np.int64))
    q_k = len(codes[k])
    feas = np.ones((1, q_k), dtype=bool) if feasible is None else np.asarray(feasible, dtype=bool)[None, :]
    pos = regime.stage_actions(k, X, A, feas)[0]
    return int(codes[k][pos])


# -- serialization registry ------------------------------------------------

_LOADERS: dict = {}


def register_regime_kind(kind: str, loader) -> None:
    _LOADERS[kind] = loader


def _load_fixed(doc: dict) -> FixedRegime:
    return FixedRegime(doc["codes"], [np.asarray(a) for a in doc["action_codes"]])


def _load_tabulated(doc: dict) -> TabulatedRegime:
    tables = [{bytes.fromhex(k): int(v) for k, v in t.items()} for t in doc["tables"]]
    return TabulatedRegime(tables, [np.asarray(a) for a in doc["action_codes"]])


register_regime_kind("fixed", _load_fixed)
register_regime_kind("tabulated", _load_tabulated)


def canonical_json(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def regime_document(regime: Regime, extra: Optional[dict] = None) -> dict:
    """Versioned, content-hashed JSON document for a regime."""
    payload = {"format_version": FORMAT_VERSION, "regime": regime.to_doc()}
    if extra:
        payload.update(extra)
    payload["content_hash"] = hashlib.sha256(canonical_json(payload).encode()).hexdigest()
    return payload


def regime_from_document(doc: dict) -> Regime:
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataValidationError(f"unsupported regime document version {doc.get('format_version')}")
    body = doc["regime"]
    kind = body.get("kind")
    if kind not in _LOADERS:
        raise DataValidationError(f"unknown regime kind '{kind}'")
    return _LOADERS[kind](body)
