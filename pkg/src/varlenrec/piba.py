"""Popularity-weighted information budget allocation.

Maps item popularity to a target semantic-ID length.  The continuous optimum
comes from balancing collaborative information against per-layer semantic
capacity; the practical assignment is a rank quantile mapping that is
monotone in popularity by construction.

All logarithms are natural.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PibaParams:
    alpha: float = 1.0
    theta: float = 100.0
    gamma: float = 8.0  # log2(256)
    I_req: float = 16.0
    beta: float = 1.0
    K: int = 10

    def __post_init__(self):
        for name in ("alpha", "theta", "gamma", "I_req", "beta"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be positive, got {v}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")


@dataclass(frozen=True)
class PopularityTable:
    """Normalized popularity with dense popularity ranks (0 = most popular)."""

    popularity: np.ndarray
    ranks: np.ndarray

    @classmethod
    def from_counts(cls, counts) -> "PopularityTable":
        counts = np.asarray(counts, dtype=np.float64)
        if counts.ndim != 1 or np.any(counts < 0) or counts.sum() <= 0:
            raise ValueError("counts must be a nonnegative 1-d array with positive sum")
        p = counts / counts.sum()
        return cls(p, popularity_ranks(p))

    @property
    def coldness(self) -> np.ndarray:
        n = len(self.ranks)
        if n < 2:
            raise ValueError("coldness needs at least two items")
        return self.ranks / (n - 1)

    def __len__(self) -> int:
        return len(self.ranks)


@dataclass(frozen=True)
class LengthAssignment:
    lengths: np.ndarray  # (N,) int in [1, K]
    masks: np.ndarray  # (N, K) {0, 1}
    ranks: np.ndarray

    @property
    def K(self) -> int:
        return self.masks.shape[1]


def popularity_ranks(p) -> np.ndarray:
    """Stable descending sort; ties go to the lower item index."""
    p = np.asarray(p, dtype=np.float64)
    order = np.argsort(-p, kind="stable")
    ranks = np.empty(len(p), dtype=np.int64)
    ranks[order] = np.arange(len(p))
    return ranks


def collab_info(p, params: PibaParams):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("popularity must lie in [0, 1]")
    return params.alpha * np.log1p(params.theta * p)


def semantic_info(L: int, gamma: float) -> float:
    """gamma * H_L with the exact harmonic sum."""
    if int(L) != L or L < 1:
        raise ValueError(f"length must be an integer >= 1, got {L}")
    return gamma * math.fsum(1.0 / k for k in range(1, int(L) + 1))


def info_gap(p, params: PibaParams):
    return params.I_req - collab_info(p, params)


def optimal_length_closed_form(p, params: PibaParams):
    """Continuous length solving gamma * ln L = gap, floored at 1.

    Negative gaps (very popular items) would give L < 1; those clamp to 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any(p <= 0):
        raise ValueError("popularity must be positive")
    L = np.exp(info_gap(p, params) / params.gamma)
    return np.maximum(L, 1.0)


def power_law_length(p, params: PibaParams):
    """Large-popularity approximation C * p**(-alpha/gamma)."""
    p = np.asarray(p, dtype=np.float64)
    C = math.exp((params.I_req - params.alpha * math.log(params.theta)) / params.gamma)
    return C * p ** (-params.alpha / params.gamma)


def minimal_length_search(p: float, params: PibaParams) -> int:
    """Smallest L in 1..K whose harmonic semantic info covers the gap (K if none)."""
    gap = float(info_gap(p, params))
    for L in range(1, params.K + 1):
        if semantic_info(L, params.gamma) >= gap:
            return L
    return params.K


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantile_lengths(ranks, K: int, beta: float) -> np.ndarray:
    ranks = np.asarray(ranks)
    n = len(ranks)
    if n < 2:
        raise ValueError("need at least two items")
    q = ranks / (n - 1)
    L = round_half_away(1 + (K - 1) * q**beta)
    return np.clip(L, 1, K).astype(np.int64)


def target_mask(L_hat: int, K: int) -> np.ndarray:
    if not 1 <= L_hat <= K:
        raise ValueError(f"length {L_hat} outside [1, {K}]")
    return (np.arange(1, K + 1) <= L_hat).astype(np.int8)


def target_masks(lengths, K: int) -> np.ndarray:
    lengths = np.asarray(lengths)
    if np.any(lengths < 1) or np.any(lengths > K):
        raise ValueError(f"lengths must lie in [1, {K}]")
    return (np.arange(1, K + 1)[None, :] <= lengths[:, None]).astype(np.int8)


def assign_lengths(table: PopularityTable, params: PibaParams) -> LengthAssignment:
    lengths = quantile_lengths(table.ranks, params.K, params.beta)
    return LengthAssignment(lengths, target_masks(lengths, params.K), np.asarray(table.ranks))


def format_assignment(table: PopularityTable, assignment: LengthAssignment, item_ids=None) -> str:
    """Tab-separated ``item, popularity, rank, length`` lines.

    The first line records K so that masks can be rebuilt on load.
    """
    ids = range(len(table)) if item_ids is None else item_ids
    lines = [f"# K={assignment.K}", "item\tpopularity\trank\tlength"]
    for i, p, r, L in zip(ids, table.popularity, table.ranks, assignment.lengths):
        lines.append(f"{i}\t{p:.17g}\t{r}\t{L}")
    return "\n".join(lines) + "\n"


def parse_assignment(text: str) -> tuple[list[str], PopularityTable, LengthAssignment, int]:
    head, _, *body = text.strip().splitlines()
    if not head.startswith("# K="):
        raise ValueError("missing '# K=' header")
    K = int(head[4:])
    rows = [ln.split("\t") for ln in body]
    ids = [r[0] for r in rows]
    p = np.array([float(r[1]) for r in rows])
    ranks = np.array([int(r[2]) for r in rows])
    lengths = np.array([int(r[3]) for r in rows])
    return ids, PopularityTable(p, ranks), LengthAssignment(lengths, target_masks(lengths, K), ranks), K
