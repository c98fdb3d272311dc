"""Variable-length semantic IDs with EOS termination and collision resolution.

Token layout for a codebook of size ``M``: main tokens ``0..M-1``, auxiliary
(disambiguation) tokens ``M..2M-1``, and the end-of-sequence token ``2M``.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .harq import HARQModel, discretize_length, forward


class CapacityError(ValueError):
    """A collision group is larger than the auxiliary range can disambiguate."""

    def __init__(self, tokens: tuple, members: list[int], M: int):
        self.tokens = tokens
        self.members = members
        super().__init__(f"{len(members)} items share {tokens}, more than M={M} auxiliary "
                         "tokens; increase M or K")


def eos_token(M: int) -> int:
    return 2 * M


@dataclass(frozen=True)
class SemanticId:
    tokens: tuple[int, ...]
    M: int

    def __post_init__(self):
        t = tuple(int(v) for v in self.tokens)
        object.__setattr__(self, "tokens", t)
        M = self.M
        if len(t) < 2 or t[-1] != 2 * M:
            raise ValueError(f"{t} must hold at least one main token and end with EOS={2 * M}")
        body = t[:-1]
        if any(not 0 <= v < 2 * M for v in body):
            raise ValueError(f"token out of range in {t}")
        aux_at = [i for i, v in enumerate(body) if v >= M]
        if aux_at and aux_at != [len(body) - 1]:
            raise ValueError(f"auxiliary token only allowed right before EOS: {t}")
        if len(self.main) < 1:
            raise ValueError(f"{t} has no main tokens")

    @property
    def main(self) -> tuple[int, ...]:
        body = self.tokens[:-1]
        return body[:-1] if body and body[-1] >= self.M else body

    @property
    def aux(self) -> Optional[int]:
        v = self.tokens[-2]
        return v if v >= self.M else None

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class IdTable:
    ids: list[SemanticId]  # indexed by item index
    M: int
    K: int
    collisions_before: int = 0  # items whose raw sequence was shared
    item_names: Optional[list[str]] = None
    _lookup: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._lookup = {}
        for i, sid in enumerate(self.ids):
            if sid.M != self.M or len(sid.main) > self.K:
                raise ValueError(f"item {i}: id {sid.tokens} inconsistent with M={self.M}, K={self.K}")
            if sid.tokens in self._lookup:
                raise ValueError(f"items {self._lookup[sid.tokens]} and {i} share {sid.tokens}")
            self._lookup[sid.tokens] = i
        if self.item_names is not None and len(self.item_names) != len(self.ids):
            raise ValueError("item_names length differs from the table")

    def __len__(self) -> int:
        return len(self.ids)

    def item_of(self, tokens: Sequence[int]) -> int:
        try:
            return self._lookup[tuple(tokens)]
        except KeyError:
            raise KeyError(f"unregistered id {tuple(tokens)}") from None

    def name(self, item: int) -> str:
        return self.item_names[item] if self.item_names is not None else str(item)

    @property
    def eos(self) -> int:
        return 2 * self.M

    @property
    def lengths(self) -> np.ndarray:
        """Main-token count per item."""
        return np.array([len(s.main) for s in self.ids], dtype=np.int64)

    def length_histogram(self) -> dict[int, int]:
        counts = Counter(self.lengths.tolist())
        return {L: counts.get(L, 0) for L in range(1, self.K + 1)}

    def aux_count(self) -> int:
        return sum(s.aux is not None for s in self.ids)


def assign_raw_ids(features: np.ndarray, model: HARQModel, tau: float = 0.5,
                   batch_size: int = 1024) -> list[tuple[int, ...]]:
    """Main-token prefix of length ``discretize_length`` for each item."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    raw = []
    for start in range(0, len(features), batch_size):
        tr = forward(model, features[start:start + batch_size])
        lengths = discretize_length(tr.masks, tau)
        raw.extend(tuple(int(v) for v in row[:L]) for row, L in zip(tr.codes, lengths))
    return raw


def _groups(raw: Sequence[tuple]) -> dict[tuple, list[int]]:
    groups = defaultdict(list)
    for i, seq in enumerate(raw):
        groups[tuple(int(v) for v in seq)].append(i)
    return groups


def collision_rate(raw: Sequence[tuple]) -> float:
    """Fraction of items whose raw sequence is shared with at least one other item."""
    if len(raw) == 0:
        return 0.0
    shared = sum(len(m) for m in _groups(raw).values() if len(m) > 1)
    return shared / len(raw)


def pair_collision_rate(raw: Sequence[tuple]) -> float:
    """Alternative metric: fraction of item pairs with identical raw sequences."""
    n = len(raw)
    if n < 2:
        return 0.0
    pairs = sum(len(m) * (len(m) - 1) // 2 for m in _groups(raw).values())
    return pairs / (n * (n - 1) // 2)


def resolve_collisions(raw: Sequence[tuple], M: int, K: Optional[int] = None,
                       item_names: Optional[list[str]] = None) -> IdTable:
    """Append EOS, inserting auxiliary token ``M + k`` for the k-th member of a shared group."""
    if K is None:
        K = max((len(s) for s in raw), default=1)
    eos = 2 * M
    ids: list[Optional[SemanticId]] = [None] * len(raw)
    shared = 0
    for seq, members in sorted(_groups(raw).items()):
        if any(not 0 <= v < M for v in seq):
            raise ValueError(f"raw sequence {seq} has tokens outside [0, {M})")
        if len(members) == 1:
            ids[members[0]] = SemanticId(seq + (eos,), M)
            continue
        if len(members) > M:
            raise CapacityError(seq, members, M)
        shared += len(members)
        for k, item in enumerate(sorted(members)):
            ids[item] = SemanticId(seq + (M + k, eos), M)
    return IdTable(ids, M, K, shared, item_names)


def format_id_table(table: IdTable) -> str:
    lines = [f"# M={table.M} K={table.K} collisions_before={table.collisions_before}"]
    for i, sid in enumerate(table.ids):
        lines.append(f"{table.name(i)}\t{' '.join(map(str, sid.tokens))}")
    return "\n".join(lines) + "\n"


def parse_id_table(text: str) -> IdTable:
    head, *body = text.strip().splitlines()
    if not head.startswith("# "):
        raise ValueError("missing '# M=... K=...' header")
    meta = dict(kv.split("=") for kv in head[2:].split())
    M, K = int(meta["M"]), int(meta["K"])
    names, ids = [], []
    for ln in body:
        name, toks = ln.split("\t")
        names.append(name)
        ids.append(SemanticId(tuple(int(v) for v in toks.split()), M))
    return IdTable(ids, M, K, int(meta.get("collisions_before", 0)), names)
