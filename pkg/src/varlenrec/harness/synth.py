"""Synthetic catalogs with Zipf popularity and a hierarchical content tree."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import balanced_tree, tree_depths
from ..piba import PopularityTable, popularity_ranks


@dataclass(frozen=True)
class SyntheticCatalogSpec:
    N: int = 200
    s: float = 1.0  # Zipf exponent; 0 gives uniform popularity
    branching: int = 4
    depth: int = 3
    F: int = 64
    sigma: float = 0.45
    scale: float = 3.0  # norm of first-level node vectors
    decay: float = 0.6  # norm ratio between successive tree levels
    seed: int = 0

    def __post_init__(self):
        if self.N < 2 or self.s < 0 or self.branching < 2 or self.depth < 1 or self.sigma < 0:
            raise ValueError("need N >= 2, s >= 0, branching >= 2, depth >= 1, sigma >= 0")
        if self.F < 1 or self.scale <= 0 or not 0 < self.decay <= 1:
            raise ValueError("need F >= 1, scale > 0 and decay in (0, 1]")


@dataclass
class ItemCatalog:
    item_ids: list[str]
    features: np.ndarray  # (N, F)
    popularity: np.ndarray  # (N,), sums to 1
    leaves: np.ndarray  # (N,) content-tree node of each item, -1 if unknown
    tree: Optional[list[int]] = None  # parent array of the content tree
    lengths: Optional[np.ndarray] = None  # target lengths once assigned

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.popularity = np.asarray(self.popularity, dtype=np.float64)
        self.leaves = np.asarray(self.leaves, dtype=np.int64)
        n = len(self.item_ids)
        if self.features.shape[0] != n or len(self.popularity) != n or len(self.leaves) != n:
            raise ValueError("catalog columns have inconsistent lengths")
        if len(set(self.item_ids)) != n:
            raise ValueError("item ids must be unique")

    def __len__(self) -> int:
        return len(self.item_ids)

    @property
    def ranks(self) -> np.ndarray:
        return popularity_ranks(self.popularity)

    @property
    def table(self) -> PopularityTable:
        return PopularityTable(self.popularity, self.ranks)

    def parent_of(self, leaf: int) -> int:
        if self.tree is None or leaf < 0:
            return -1
        return self.tree[leaf]


def zipf_popularity(N: int, s: float) -> np.ndarray:
    w = np.arange(1, N + 1, dtype=np.float64) ** -s
    return w / w.sum()


def generate_catalog(spec: SyntheticCatalogSpec) -> ItemCatalog:
    """Item i has popularity rank i; its features follow a random leaf path plus noise."""
    rng = np.random.default_rng(spec.seed)
    parents = balanced_tree(spec.branching, spec.depth)
    depth = tree_depths(parents)
    node_vec = rng.standard_normal((len(parents), spec.F))
    node_vec /= np.linalg.norm(node_vec, axis=1, keepdims=True)
    node_vec *= spec.scale * spec.decay ** (depth[:, None] - 1.0)
    node_vec[0] = 0.0
    path_sum = np.zeros_like(node_vec)
    for v in np.argsort(depth, kind="stable")[1:]:
        path_sum[v] = path_sum[parents[v]] + node_vec[v]

    leaf_nodes = np.flatnonzero(depth == spec.depth)
    leaves = rng.choice(leaf_nodes, size=spec.N)
    features = path_sum[leaves] + spec.sigma * rng.standard_normal((spec.N, spec.F))
    return ItemCatalog([str(i) for i in range(spec.N)], features,
                       zipf_popularity(spec.N, spec.s), leaves, parents)


@dataclass(frozen=True)
class SessionSpec:
    n_sessions: int = 2000
    length: int = 5
    locality: float = 0.7  # chance the next item is a content-tree sibling of the previous one
    seed: int = 0

    def __post_init__(self):
        if self.n_sessions < 1 or self.length < 2 or not 0 <= self.locality <= 1:
            raise ValueError("need n_sessions >= 1, length >= 2 and locality in [0, 1]")


def generate_sessions(catalog: ItemCatalog, spec: SessionSpec) -> list[list[int]]:
    """Popularity-weighted item sessions with content-tree locality.

    Each step either moves to an item under the same tree parent as the
    previous item (weighted by popularity) or draws afresh from global
    popularity.  Items are returned as catalog indices.
    """
    rng = np.random.default_rng(spec.seed)
    p = catalog.popularity
    groups: dict[int, np.ndarray] = {}
    parent = np.array([catalog.parent_of(v) for v in catalog.leaves])
    for g in np.unique(parent):
        groups[g] = np.flatnonzero(parent == g)
    sessions = []
    for _ in range(spec.n_sessions):
        items = [int(rng.choice(len(p), p=p))]
        for _ in range(spec.length - 1):
            sib = groups[parent[items[-1]]]
            if parent[items[-1]] >= 0 and len(sib) > 1 and rng.random() < spec.locality:
                w = p[sib] / p[sib].sum()
                items.append(int(rng.choice(sib, p=w)))
            else:
                items.append(int(rng.choice(len(p), p=p)))
        sessions.append(items)
    return sessions


def popularity_from_sessions(sessions: list[list[int]], N: int) -> np.ndarray:
    counts = np.bincount([i for s in sessions for i in s], minlength=N).astype(np.float64)
    return counts / counts.sum()
