"""Trie-constrained beam search and odds-ratio rescoring over registered IDs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .id_registry import IdTable, SemanticId

LOG_P_MAX = math.log1p(-1e-12)  # clamp for log-probabilities entering a logit


class Trie:
    """Prefix tree over token sequences; terminals hang off EOS edges."""

    def __init__(self, eos: int):
        self.eos = eos
        self.children: list[dict[int, int]] = [{}]
        self.count: list[int] = [0]
        self.item: list[int] = [-1]

    @classmethod
    def build(cls, table: IdTable) -> "Trie":
        trie = cls(table.eos)
        for i, sid in enumerate(table.ids):
            trie.insert(sid.tokens, i)
        return trie

    def insert(self, tokens: Sequence[int], item: int) -> None:
        tokens = tuple(tokens)
        if not tokens or tokens[-1] != self.eos or self.eos in tokens[:-1]:
            raise ValueError(f"{tokens} must contain EOS exactly once, at the end")
        if self.walk(tokens) is not None:
            raise ValueError(f"duplicate id {tokens}")
        node = 0
        self.count[0] += 1
        for tok in tokens:
            nxt = self.children[node].get(tok)
            if nxt is None:
                nxt = len(self.children)
                self.children[node][tok] = nxt
                self.children.append({})
                self.count.append(0)
                self.item.append(-1)
            node = nxt
            self.count[node] += 1
        self.item[node] = item

    def walk(self, tokens: Sequence[int], start: int = 0) -> Optional[int]:
        node = start
        for tok in tokens:
            node = self.children[node].get(int(tok))
            if node is None:
                return None
        return node

    def valid_next(self, node: int) -> list[int]:
        return sorted(self.children[node])

    def is_terminal(self, node: int) -> bool:
        return self.item[node] >= 0

    @property
    def n_terminals(self) -> int:
        return sum(i >= 0 for i in self.item)

    def __len__(self) -> int:
        return len(self.children)


class SequenceModel(Protocol):
    """Next-token scorer over the full vocabulary (main, auxiliary and EOS)."""

    vocab_size: int

    def next_distribution(self, history: Sequence[Sequence[int]], prefix: Sequence[int]) -> np.ndarray:
        ...


class MarkovModel:
    """First-order model over ``(position, previous token)`` with add-one smoothing.

    The first token of a new ID is conditioned on a token of the most recent
    history ID: its last non-EOS token (``carry="last"``) or its first, coarsest
    token (``carry="first"``), or on a start symbol without history.  Safe for
    concurrent use once fitted.
    """

    CARRY = ("last", "first")

    def __init__(self, M: int, max_len: int, carry: str = "last"):
        if carry not in self.CARRY:
            raise ValueError(f"carry must be one of {self.CARRY}")
        self.M = M
        self.carry = carry
        self.vocab_size = 2 * M + 1
        self.max_len = max_len  # longest full token sequence, EOS included
        self.start = self.vocab_size  # context index for "no previous token"
        self.counts = np.zeros((max_len, self.vocab_size + 1, self.vocab_size))

    @classmethod
    def fit(cls, sessions: Sequence[Sequence[Sequence[int]]], M: int, max_len: int,
            carry: str = "last") -> "MarkovModel":
        model = cls(M, max_len, carry)
        for session in sessions:
            for j, tokens in enumerate(session):
                model.observe(session[:j], tokens)
        return model

    @classmethod
    def random(cls, M: int, max_len: int, rng: np.random.Generator, scale: float = 5.0) -> "MarkovModel":
        model = cls(M, max_len)
        model.counts = rng.gamma(0.3, scale, size=model.counts.shape)
        return model

    def _context(self, history, prefix) -> tuple[int, int]:
        pos = len(prefix)
        if pos >= self.max_len:
            raise ValueError(f"prefix longer than max_len={self.max_len}")
        if prefix:
            return pos, int(prefix[-1])
        eos = 2 * self.M
        for seq in reversed(history):
            body = [t for t in seq if t != eos]
            if body:
                return pos, int(body[0] if self.carry == "first" else body[-1])
        return pos, self.start

    def observe(self, history, tokens) -> None:
        for k, tok in enumerate(tokens):
            self.counts[self._context(history, tokens[:k])][tok] += 1

    def next_distribution(self, history, prefix) -> np.ndarray:
        row = self.counts[self._context(history, prefix)] + 1.0
        return row / row.sum()


class TableModel:
    """Hand-specified next-token probabilities keyed by prefix.

    Unlisted mass is spread evenly over the tokens a prefix does not name.
    """

    def __init__(self, vocab_size: int, table: Mapping[tuple, Mapping[int, float]]):
        self.vocab_size = vocab_size
        self.table = {tuple(k): dict(v) for k, v in table.items()}
        for k, v in self.table.items():
            if sum(v.values()) > 1 + 1e-12 or min(v.values(), default=0) < 0:
                raise ValueError(f"bad probabilities for prefix {k}")

    def next_distribution(self, history, prefix) -> np.ndarray:
        spec = self.table.get(tuple(prefix), {})
        rest = 1.0 - sum(spec.values())
        free = self.vocab_size - len(spec)
        p = np.full(self.vocab_size, rest / free if free else 0.0)
        for tok, prob in spec.items():
            p[tok] = prob
        return p


def sequence_log_prob(history, model: SequenceModel, tokens: Sequence[int]) -> float:
    total = 0.0
    for k, tok in enumerate(tokens):
        p = model.next_distribution(history, tokens[:k])[tok]
        total += math.log(p) if p > 0 else -math.inf
    return total


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    node: int


@dataclass
class BeamResult:
    completed: list[Hypothesis]  # sorted by descending log-prob, then tokens
    explored: list[Hypothesis] = field(default_factory=list)  # partials that held a beam slot


def _rank_key(h: Hypothesis):
    return (-h.log_prob, h.tokens)


def constrained_beam_search(history, model: SequenceModel, trie: Trie, B: int) -> BeamResult:
    """Beam search whose expansions are restricted to the trie's children.

    Expansions of all live hypotheses are pooled and the best ``B`` kept
    (ties: lower token sequence first).  Kept hypotheses ending in EOS are
    completed and free their slot.
    """
    if B < 1:
        raise ValueError("beam width must be >= 1")
    if not trie.children[0]:
        return BeamResult([])
    beam = [Hypothesis((), 0.0, 0)]
    completed, explored = [], []
    while beam:
        pool = []
        for h in beam:
            dist = model.next_distribution(history, h.tokens)
            for tok in trie.valid_next(h.node):
                p = dist[tok]
                lp = h.log_prob + (math.log(p) if p > 0 else -math.inf)
                pool.append(Hypothesis(h.tokens + (tok,), lp, trie.children[h.node][tok]))
        pool.sort(key=_rank_key)
        beam = []
        for h in pool[:B]:
            if h.tokens[-1] == trie.eos:
                completed.append(h)
            else:
                beam.append(h)
                explored.append(h)
    completed.sort(key=_rank_key)
    return BeamResult(completed, explored)


def greedy_complete(history, model: SequenceModel, trie: Trie, h: Hypothesis,
                    memo: Optional[dict] = None) -> Hypothesis:
    """Extend a partial along its most probable trie-valid continuation.

    A trie node fixes its prefix, so ``memo`` may cache suffixes per node for
    one history.
    """
    memo = {} if memo is None else memo
    path = []
    node, tokens = h.node, h.tokens
    while node not in memo and not (tokens and tokens[-1] == trie.eos):
        dist = model.next_distribution(history, tokens)
        tok = max(trie.valid_next(node), key=lambda t: (dist[t], -t))
        p = dist[tok]
        path.append((node, tok, math.log(p) if p > 0 else -math.inf))
        node, tokens = trie.children[node][tok], tokens + (tok,)
    suffix, lp = memo.get(node, ((), 0.0))
    for n, tok, step in reversed(path):
        suffix, lp = (tok,) + suffix, step + lp
        memo[n] = (suffix, lp)
    full, tail_lp = memo.get(h.node, ((), 0.0))
    return Hypothesis(h.tokens + full, h.log_prob + tail_lp, trie.walk(full, h.node))


def marginal_prior(sid: SemanticId, table: IdTable, trie: Trie) -> float:
    """Smoothed corpus frequency of the ID's main-token prefix.

    Counts every registered ID whose path passes through the node reached by
    the main tokens, so IDs sitting under a crowded prefix get a larger prior.
    """
    table.item_of(sid.tokens)  # raises for unregistered ids
    node = trie.walk(sid.main)
    return (trie.count[node] + 1) / (len(table) + 2)


def _check_open(name: str, p: float) -> None:
    if not 0 < p < 1:
        raise ValueError(f"{name} must lie strictly inside (0, 1), got {p}")


def odds_ratio_score(p_cond: float, p_marg: float) -> float:
    _check_open("p_cond", p_cond)
    _check_open("p_marg", p_marg)
    return max(0.0, math.log((p_cond * (1 - p_marg)) / ((1 - p_cond) * p_marg)))


def log_odds_ratio_score(log_p_cond: float, p_marg: float) -> float:
    """Same score computed from a log-probability, safe against underflow."""
    if not log_p_cond < 0:
        raise ValueError(f"log_p_cond must be negative, got {log_p_cond}")
    _check_open("p_marg", p_marg)
    logit_cond = log_p_cond - math.log(-math.expm1(log_p_cond))
    logit_marg = math.log(p_marg) - math.log1p(-p_marg)
    return max(0.0, logit_cond - logit_marg)


@dataclass(frozen=True)
class RankedItem:
    item: int
    score: float
    log_prob: float
    tokens: tuple[int, ...]


def rescore_and_rank(history, model: SequenceModel, table: IdTable, trie: Trie,
                     result: BeamResult, topk: int) -> list[RankedItem]:
    """Odds-ratio ranking of completed and greedily completed candidates.

    Ties in score (common at the zero clamp) fall back to conditional
    log-probability, then item index.
    """
    cands = {h.tokens: h for h in result.completed}
    memo = {}
    for h in result.explored:
        full = greedy_complete(history, model, trie, h, memo)
        cands.setdefault(full.tokens, full)
    ranked = []
    for tokens, h in cands.items():
        item = table.item_of(tokens)
        prior = marginal_prior(table.ids[item], table, trie)
        lp = min(h.log_prob, LOG_P_MAX)
        score = log_odds_ratio_score(lp, prior) if lp > -math.inf else 0.0
        ranked.append(RankedItem(item, score, h.log_prob, tokens))
    ranked.sort(key=lambda r: (-r.score, -r.log_prob, r.item))
    return ranked[:topk]


def decode(history, model: SequenceModel, table: IdTable, trie: Trie, B: int = 30,
           topk: int = 10) -> list[RankedItem]:
    return rescore_and_rank(history, model, table, trie,
                            constrained_beam_search(history, model, trie, B), topk)
