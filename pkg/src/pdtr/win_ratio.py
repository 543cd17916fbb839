"""Generalized win ratio between two regimes.

Independent outcome draws from the two regime-induced distributions are
paired; each pair is decided at the first outcome, in priority order,
whose dissimilarity exceeds the comparability margin (higher value
wins), and is a tie when no outcome is decisive.  The three proportions
partition the pairs exactly.  The sum-of-conditional-probabilities
variant is reported alongside for completeness; it is a sum of
conditional win probabilities rather than a single probability.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import streams
from .errors import DataValidationError, NumericalError
from .regime import Regime

_VALID_KINDS = ("absolute", "log_ratio")


@dataclass(frozen=True)
class WinRatioSpec:
    """Margins, pair count, seed, and dissimilarity kinds per outcome.

    `arm_keys` name the two noise substreams; `mirrored()` swaps them so
    that swapping the regime arguments with a mirrored spec reproduces
    the exact same pairs relabeled (win_a and win_b trade places, tie
    mass unchanged bit for bit).
    """

    margins: np.ndarray
    pairs: int = 10000
    seed: int = 0
    kinds: Optional[tuple] = None
    tie_policy: str = "separate"
    arm_keys: tuple = (0, 1)

    def __post_init__(self):
        m = np.asarray(self.margins, dtype=float)
        object.__setattr__(self, "margins", m)
        if np.any(m < 0) or np.any(np.isnan(m)):
            raise DataValidationError("margins must be >= 0")
        if self.pairs < 1:
            raise DataValidationError("pair count must be >= 1")
        if self.tie_policy != "separate":
            raise DataValidationError("only tie_policy='separate' is supported")
        kinds = self.kinds if self.kinds is not None else ("absolute",) * len(m)
        if len(kinds) != len(m) or any(k not in _VALID_KINDS for k in kinds):
            raise DataValidationError("bad dissimilarity kinds")
        object.__setattr__(self, "kinds", tuple(kinds))

    def mirrored(self) -> "WinRatioSpec":
        return replace(self, arm_keys=(self.arm_keys[1], self.arm_keys[0]))


@dataclass(frozen=True)
class WinRatioResult:
    win_a: float
    win_b: float
    tie: float
    wr_sum_of_conditionals: float
    pairs: int

    def to_dict(self) -> dict:
        return {
            "win_a": self.win_a,
            "win_b": self.win_b,
            "tie": self.tie,
            "wr_sum_of_conditionals": self.wr_sum_of_conditionals,
            "pairs": self.pairs,
        }


def win_ratio(model, regime_a: Optional[Regime], regime_b: Optional[Regime],
              spec: WinRatioSpec) -> WinRatioResult:
    """Monte Carlo win/loss/tie proportions of `regime_a` vs `regime_b`.

    `model` must expose draw_outcomes(regime, n, rng); each arm consumes
    its own substream so the two draws are independent.
    """
    Ya = model.draw_outcomes(regime_a, spec.pairs,
                             streams.substream(spec.seed, streams.PAIRS, spec.arm_keys[0]))
    Yb = model.draw_outcomes(regime_b, spec.pairs,
                             streams.substream(spec.seed, streams.PAIRS, spec.arm_keys[1]))
    p_y = Ya.shape[1]
    if len(spec.margins) != p_y:
        raise DataValidationError("margins length must match outcome count")

    undecided = np.ones(spec.pairs, dtype=bool)
    wins_a = np.zeros(spec.pairs, dtype=bool)
    wins_b = np.zeros(spec.pairs, dtype=bool)
    sum_conditionals = 0.0
    for ell in range(p_y):
        ya, yb = Ya[:, ell], Yb[:, ell]
        if spec.kinds[ell] == "absolute":
            d = np.abs(ya - yb)
        else:
            if np.any(ya <= 0) or np.any(yb <= 0):
                raise NumericalError("log_ratio margin comparison needs positive outcomes")
            d = np.abs(np.log(ya) - np.log(yb))
        decisive = undecided & (d > spec.margins[ell])
        if decisive.any():
            a_better = ya[decisive] >= yb[decisive]
            sum_conditionals += float(a_better.mean())
            rows = np.flatnonzero(decisive)
            wins_a[rows[a_better]] = True
            wins_b[rows[~a_better]] = True
            undecided &= ~decisive
    n = float(spec.pairs)
    win_a = float(wins_a.sum()) / n
    win_b = float(wins_b.sum()) / n
    # complement of the rounded sum keeps win_a + win_b + tie == 1.0 exactly
    tie = 1.0 - (win_a + win_b)
    return WinRatioResult(
        win_a=win_a,
        win_b=win_b,
        tie=tie,
        wr_sum_of_conditionals=sum_conditionals,
        pairs=spec.pairs,
    )


def cyclic_triples(names: list, beats: np.ndarray) -> list:
    """Intransitivity diagnostic: triples (i, j, k) with i>j>k>i pairwise.

    `beats[i, j]` is True when regime i beat regime j (win_i > win_j).
    """
    out = []
    r = len(names)
    for i in range(r):
        for j in range(r):
            for k in range(r):
                if i < j and i < k and j != k:
                    if beats[i, j] and beats[j, k] and beats[k, i]:
                        out.append((names[i], names[j], names[k]))
    return out
