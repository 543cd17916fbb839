"""Trajectory datasets: CSV ingestion, standardization, and even splitting.

A dataset holds n subject trajectories from a K-stage trial: per-stage
covariates, the assigned action, the set of feasible actions, the known
propensity of the observed action, and a vector of p_y outcomes ordered
by priority (higher values preferred).

Storage is columnar (one array per field per stage) for vectorized
estimation; `Trajectory` is the row-level view.  Datasets are immutable
after construction and safe to share across workers.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataValidationError

logger = logging.getLogger(__name__)

_PROP_TOL = 1e-9


@dataclass(frozen=True)
class Trajectory:
    """One subject's stage-wise covariates, actions, and outcome vector.

    Actions are raw integer codes (e.g. the +/-1 designs use codes 0/1
    after internal mapping); `feasible_masks[k]` is a boolean vector over
    the stage-k action alphabet and must contain the observed action.
    """

    stage_covariates: list  # list of K float vectors
    actions: list           # list of K raw integer codes
    outcomes: np.ndarray    # (p_y,) float vector
    feasible_masks: list    # list of K boolean vectors over the alphabet
    propensities: list      # list of K floats in (0, 1]


@dataclass(frozen=True)
class History:
    """Information set at stage k: concatenation of X^1, A^1, ..., X^k."""

    stage: int
    covariates: list  # X^1 .. X^k
    actions: list     # A^1 .. A^{k-1}, raw codes

    def vector(self, action_values: Sequence[np.ndarray], action_codes: Sequence[np.ndarray]) -> np.ndarray:
        """Flat numeric encoding: covariates interleaved with signed past actions."""
        parts = [np.asarray(self.covariates[0], dtype=float)]
        for j, a in enumerate(self.actions):
            idx = int(np.searchsorted(action_codes[j], a))
            parts.append(np.array([action_values[j][idx]]))
            parts.append(np.asarray(self.covariates[j + 1], dtype=float))
        return np.concatenate(parts)


@dataclass(frozen=True)
class Standardization:
    """Per-outcome affine transform y -> (y - mean) / scale, replayable on new data."""

    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray  # flags outcomes with zero sample variance (scale forced to 1)

    def apply(self, outcomes: np.ndarray) -> np.ndarray:
        return (np.asarray(outcomes, dtype=float) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "constant": self.constant.astype(int).tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Standardization":
        return Standardization(
            mean=np.asarray(d["mean"], dtype=float),
            scale=np.asarray(d["scale"], dtype=float),
            constant=np.asarray(d["constant"], dtype=bool),
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Columnar trajectory data for a K-stage trial.

    X[k], A[k], feas[k], prop[k] index stages k = 0..K-1; A holds
    positional indices into `action_codes[k]` (the sorted raw alphabet),
    and `action_values[k]` gives the numeric encoding used in regression
    features (signed +/-1 for binary stages).
    """

    X: list            # (n, p_k) float arrays
    A: list            # (n,) int arrays of alphabet positions
    feas: list         # (n, q_k) bool arrays
    prop: list         # (n,) float arrays in (0, 1]
    Y: np.ndarray      # (n, p_y)
    action_codes: list  # (q_k,) int arrays, sorted raw codes
    action_values: list  # (q_k,) float arrays
    outcome_names: list
    standardization: Optional[Standardization] = None

    def __post_init__(self):
        for k in range(self.K):
            _freeze(self.X[k])
            _freeze(self.A[k])
            _freeze(self.feas[k])
            _freeze(self.prop[k])
        _freeze(self.Y)
        self._validate()

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def K(self) -> int:
        return len(self.X)

    @property
    def p_y(self) -> int:
        return self.Y.shape[1]

    def _validate(self):
        n = self.n
        for k in range(self.K):
            q = len(self.action_codes[k])
            if self.X[k].shape[0] != n or self.A[k].shape[0] != n:
                raise DataValidationError(f"stage {k + 1}: inconsistent row counts")
            if self.feas[k].shape != (n, q):
                raise DataValidationError(f"stage {k + 1}: feasibility shape mismatch")
            if not self.feas[k].any(axis=1).all():
                i = int(np.flatnonzero(~self.feas[k].any(axis=1))[0])
                raise DataValidationError(f"row {i}: empty feasible set at stage {k + 1}")
            bad = ~self.feas[k][np.arange(n), self.A[k]]
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                code = int(self.action_codes[k][self.A[k][i]])
                raise DataValidationError(
                    f"row {i}: observed action {code} infeasible at stage {k + 1}"
                )
            p = self.prop[k]
            if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p > 1 + _PROP_TOL):
                i = int(np.flatnonzero(~((p > 0) & (p <= 1 + _PROP_TOL) & np.isfinite(p)))[0])
                raise DataValidationError(f"row {i}: propensity outside (0,1] at stage {k + 1}")
            singleton = self.feas[k].sum(axis=1) == 1
            off = singleton & (np.abs(p - 1.0) > _PROP_TOL)
            if off.any():
                i = int(np.flatnonzero(off)[0])
                raise DataValidationError(
                    f"row {i}: singleton feasible set at stage {k + 1} requires propensity 1"
                )
            if not np.isfinite(self.X[k]).all():
                raise DataValidationError(f"non-finite covariate at stage {k + 1}")
        if not np.isfinite(self.Y).all():
            i = int(np.flatnonzero(~np.isfinite(self.Y).all(axis=1))[0])
            raise DataValidationError(f"row {i}: non-finite outcome")
        if len(self.outcome_names) != self.p_y:
            raise DataValidationError("outcome_names length mismatch")
        if self.standardization is not None and np.any(self.standardization.scale <= 0):
            raise DataValidationError("standardization scale must be strictly positive")

    # -- row-level views -------------------------------------------------

    def trajectory(self, i: int) -> Trajectory:
        return Trajectory(
            stage_covariates=[self.X[k][i].copy() for k in range(self.K)],
            actions=[int(self.action_codes[k][self.A[k][i]]) for k in range(self.K)],
            outcomes=self.Y[i].copy(),
            feasible_masks=[self.feas[k][i].copy() for k in range(self.K)],
            propensities=[float(self.prop[k][i]) for k in range(self.K)],
        )

    def history(self, i: int, stage: int) -> History:
        """History at `stage` (1-based) for subject i."""
        return History(
            stage=stage,
            covariates=[self.X[k][i].copy() for k in range(stage)],
            actions=[int(self.action_codes[k][self.A[k][i]]) for k in range(stage - 1)],
        )

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            X=[self.X[k][idx].copy() for k in range(self.K)],
            A=[self.A[k][idx].copy() for k in range(self.K)],
            feas=[self.feas[k][idx].copy() for k in range(self.K)],
            prop=[self.prop[k][idx].copy() for k in range(self.K)],
            Y=self.Y[idx].copy(),
            action_codes=self.action_codes,
            action_values=self.action_values,
            outcome_names=list(self.outcome_names),
            standardization=self.standardization,
        )

    def signed_actions(self, k: int) -> np.ndarray:
        """Numeric encoding of the observed stage-k actions (0-based stage)."""
        return self.action_values[k][self.A[k]]

    def row_hashes(self) -> list:
        """Content hash per row; used to enforce fit/eval disjointness."""
        out = []
        for i in range(self.n):
            h = hashlib.sha256()
            for k in range(self.K):
                h.update(self.X[k][i].tobytes())
                h.update(int(self.A[k][i]).to_bytes(4, "little", signed=True))
                h.update(self.feas[k][i].tobytes())
                h.update(self.prop[k][i].tobytes())
            h.update(self.Y[i].tobytes())
            out.append(h.hexdigest())
        return out

    @staticmethod
    def from_trajectories(
        trajectories: Sequence[Trajectory],
        action_codes: list,
        outcome_names: Optional[list] = None,
        standardization: Optional[Standardization] = None,
    ) -> "Dataset":
        if not trajectories:
            raise DataValidationError("empty trajectory list")
        K = len(trajectories[0].stage_covariates)
        p_y = len(trajectories[0].outcomes)
        codes = [np.asarray(sorted(int(c) for c in action_codes[k])) for k in range(K)]
        X = [np.array([t.stage_covariates[k] for t in trajectories], dtype=float) for k in range(K)]
        A = []
        for k in range(K):
            raw = np.array([t.actions[k] for t in trajectories])
            pos = np.searchsorted(codes[k], raw)
            if np.any(pos >= len(codes[k])) or np.any(codes[k][np.clip(pos, 0, len(codes[k]) - 1)] != raw):
                raise DataValidationError(f"unknown action code at stage {k + 1}")
            A.append(pos.astype(np.int64))
        feas = [np.array([t.feasible_masks[k] for t in trajectories], dtype=bool) for k in range(K)]
        prop = [np.array([t.propensities[k] for t in trajectories], dtype=float) for k in range(K)]
        Y = np.array([t.outcomes for t in trajectories], dtype=float)
        return Dataset(
            X=X, A=A, feas=feas, prop=prop, Y=Y,
            action_codes=codes,
            action_values=[default_action_values(c) for c in codes],
            outcome_names=outcome_names or [f"y_{j + 1}" for j in range(p_y)],
            standardization=standardization,
        )


def default_action_values(codes: np.ndarray) -> np.ndarray:
    """Numeric feature encoding: signed -1/+1 for binary stages, raw codes otherwise."""
    codes = np.asarray(codes)
    if len(codes) == 2:
        return np.array([-1.0, 1.0])
    return codes.astype(float)


# -- CSV schema ----------------------------------------------------------
#
# Header: id, x1_1..x1_{p1}, a1, [feas1_<code>..], [prop1], x2_1.., a2,
# [feas2_..], [prop2], ..., y_1..y_{p_y}.  Feasibility columns are 0/1
# and name the stage's action alphabet; when absent every observed code
# is feasible.  When prop{k} is absent the propensity defaults to the
# uniform 1/|feasible set|.

_X_RE = re.compile(r"^x(\d+)_(\d+)$")
_A_RE = re.compile(r"^a(\d+)$")
_FEAS_RE = re.compile(r"^feas(\d+)_(-?\d+)$")
_PROP_RE = re.compile(r"^prop(\d+)$")
_Y_RE = re.compile(r"^y_(\d+)$")


def _parse_header(header: list) -> dict:
    if not header or header[0] != "id":
        raise DataValidationError("CSV header must start with 'id'")
    stages: dict = {}
    y_cols = []
    for pos, name in enumerate(header[1:], start=1):
        m = _X_RE.match(name)
        if m:
            k, j = int(m.group(1)), int(m.group(2))
            stages.setdefault(k, {"x": [], "a": None, "feas": [], "prop": None})
            stages[k]["x"].append((j, pos))
            continue
        m = _A_RE.match(name)
        if m:
            stages.setdefault(int(m.group(1)), {"x": [], "a": None, "feas": [], "prop": None})
            stages[int(m.group(1))]["a"] = pos
            continue
        m = _FEAS_RE.match(name)
        if m:
            k, code = int(m.group(1)), int(m.group(2))
            stages.setdefault(k, {"x": [], "a": None, "feas": [], "prop": None})
            stages[k]["feas"].append((code, pos))
            continue
        m = _PROP_RE.match(name)
        if m:
            stages.setdefault(int(m.group(1)), {"x": [], "a": None, "feas": [], "prop": None})
            stages[int(m.group(1))]["prop"] = pos
            continue
        m = _Y_RE.match(name)
        if m:
            y_cols.append((int(m.group(1)), pos))
            continue
        raise DataValidationError(f"unrecognized CSV column '{name}'")
    if not y_cols:
        raise DataValidationError("CSV has no outcome columns y_*")
    ks = sorted(stages)
    if ks != list(range(1, len(ks) + 1)):
        raise DataValidationError("stage indices in header must be 1..K without gaps")
    for k in ks:
        st = stages[k]
        if st["a"] is None:
            raise DataValidationError(f"missing action column a{k}")
        st["x"].sort()
        if [j for j, _ in st["x"]] != list(range(1, len(st["x"]) + 1)):
            raise DataValidationError(f"covariate columns x{k}_* must be numbered 1..p{k}")
        st["feas"].sort()
    y_cols.sort()
    if [j for j, _ in y_cols] != list(range(1, len(y_cols) + 1)):
        raise DataValidationError("outcome columns must be y_1..y_{p_y}")
    return {"stages": [stages[k] for k in ks], "y": [pos for _, pos in y_cols]}


def _parse_float(row: list, pos: int, irow: int, header: list) -> float:
    try:
        return float(row[pos])
    except (ValueError, IndexError) as exc:
        raise DataValidationError(f"row {irow}, column '{header[pos]}': malformed value") from exc


def load_csv(path: str) -> Dataset:
    """Read a trajectory CSV into a Dataset.

    Raises DataValidationError naming the row and column for malformed
    cells, infeasible observed actions, or non-finite outcomes.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError("empty CSV file") from None
        header = [h.strip() for h in header]
        layout = _parse_header(header)
        rows = [r for r in reader if r]

    if not rows:
        raise DataValidationError("CSV has a header but no data rows")
    n = len(rows)
    K = len(layout["stages"])
    p_y = len(layout["y"])

    X, A, feas, prop, codes_per_stage = [], [], [], [], []
    for k, st in enumerate(layout["stages"], start=1):
        p_k = len(st["x"])
        Xk = np.empty((n, p_k))
        for i, row in enumerate(rows):
            for j, (_, pos) in enumerate(st["x"]):
                Xk[i, j] = _parse_float(row, pos, i, header)
        a_raw = np.empty(n, dtype=np.int64)
        for i, row in enumerate(rows):
            v = _parse_float(row, st["a"], i, header)
            if v != int(v):
                raise DataValidationError(f"row {i}, column 'a{k}': non-integer action code")
            a_raw[i] = int(v)
        if st["feas"]:
            codes = np.array([c for c, _ in st["feas"]], dtype=np.int64)
            Fk = np.empty((n, len(codes)), dtype=bool)
            for i, row in enumerate(rows):
                for j, (_, pos) in enumerate(st["feas"]):
                    Fk[i, j] = _parse_float(row, pos, i, header) != 0.0
        else:
            codes = np.array(sorted(set(a_raw.tolist())), dtype=np.int64)
            Fk = np.ones((n, len(codes)), dtype=bool)
        order = np.argsort(codes)
        codes, Fk = codes[order], Fk[:, order]
        pos_idx = np.searchsorted(codes, a_raw)
        bad = (pos_idx >= len(codes)) | (codes[np.clip(pos_idx, 0, len(codes) - 1)] != a_raw)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DataValidationError(f"row {i}: action code {a_raw[i]} not in stage-{k} alphabet")
        if st["prop"] is not None:
            Pk = np.array([_parse_float(row, st["prop"], i, header) for i, row in enumerate(rows)])
        else:
            Pk = 1.0 / Fk.sum(axis=1)
        X.append(Xk)
        A.append(pos_idx.astype(np.int64))
        feas.append(Fk)
        prop.append(Pk)
        codes_per_stage.append(codes)

    Y = np.empty((n, p_y))
    for i, row in enumerate(rows):
        for j, pos in enumerate(layout["y"]):
            Y[i, j] = _parse_float(row, pos, i, header)

    return Dataset(
        X=X, A=A, feas=feas, prop=prop, Y=Y,
        action_codes=codes_per_stage,
        action_values=[default_action_values(c) for c in codes_per_stage],
        outcome_names=[f"y_{j + 1}" for j in range(p_y)],
    )


def write_csv(data: Dataset, path: str) -> None:
    """Write the full schema (feasibility and propensity columns included)."""
    header = ["id"]
    for k in range(data.K):
        header += [f"x{k + 1}_{j + 1}" for j in range(data.X[k].shape[1])]
        header.append(f"a{k + 1}")
        header += [f"feas{k + 1}_{int(c)}" for c in data.action_codes[k]]
        header.append(f"prop{k + 1}")
    header += [f"y_{j + 1}" for j in range(data.p_y)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(data.n):
            row = [i]
            for k in range(data.K):
                row += [repr(float(v)) for v in data.X[k][i]]
                row.append(int(data.action_codes[k][data.A[k][i]]))
                row += [int(b) for b in data.feas[k][i]]
                row.append(repr(float(data.prop[k][i])))
            row += [repr(float(v)) for v in data.Y[i]]
            w.writerow(row)


def split_even(data: Dataset, seed: int) -> tuple:
    """Uniformly random partition into two halves of size m = n // 2.

    Odd n drops one subject at random (logged).  n < 4 is an error: one
    half could not both fit and be evaluated.
    """
    if data.n < 4:
        raise DataValidationError(f"cannot split n={data.n} < 4 into usable halves")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.n)
    if data.n % 2:
        dropped = perm[-1]
        logger.warning("odd n=%d: dropping one subject (row %d) before splitting", data.n, dropped)
        perm = perm[:-1]
    m = len(perm) // 2
    return data.subset(np.sort(perm[:m])), data.subset(np.sort(perm[m:]))


def standardize_outcomes(data: Dataset) -> Dataset:
    """Center and scale each outcome to sample mean 0, variance 1.

    Constant outcomes keep scale 1 and are flagged rather than rejected.
    The transform is stored on the returned dataset so it can be replayed
    on new data (e.g. the evaluation half).
    """
    mean = data.Y.mean(axis=0)
    scale = data.Y.std(axis=0)  # ddof=0: two-point {0,2} maps to {-1,+1}
    constant = scale == 0.0
    if constant.any():
        logger.warning("constant outcome column(s) %s: scale forced to 1", np.flatnonzero(constant).tolist())
    scale = np.where(constant, 1.0, scale)
    std = Standardization(mean=mean, scale=scale, constant=constant)
    return Dataset(
        X=[x.copy() for x in data.X],
        A=[a.copy() for a in data.A],
        feas=[f.copy() for f in data.feas],
        prop=[p.copy() for p in data.prop],
        Y=std.apply(data.Y),
        action_codes=data.action_codes,
        action_values=data.action_values,
        outcome_names=list(data.outcome_names),
        standardization=std,
    )
