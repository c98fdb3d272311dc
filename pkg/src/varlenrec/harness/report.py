"""Popularity-tier metrics: lengths, reconstruction error, decode hit-rate."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..decoder import RankedItem
from ..id_registry import IdTable, collision_rate, pair_collision_rate
from ..piba import popularity_ranks
from .synth import ItemCatalog

TIERS = ("head", "body", "tail")
HEAD_SHARE = TAIL_SHARE = 0.2


def tier_labels(popularity) -> np.ndarray:
    """Exact 20/60/20 split by popularity rank; equal popularity falls back to index order.

    Head and tail each hold round(0.2 N) items (at least one), body the rest.
    """
    n = len(popularity)
    if n < 2:
        raise ValueError("tiers need at least two items")
    n_head = max(1, int(np.floor(HEAD_SHARE * n + 0.5)))
    n_tail = max(1, int(np.floor(TAIL_SHARE * n + 0.5)))
    ranks = popularity_ranks(popularity)
    labels = np.full(n, "body", dtype=object)
    labels[ranks < n_head] = "head"
    labels[ranks >= n - n_tail] = "tail"
    return labels


@dataclass(frozen=True)
class DecodeOutcome:
    target: int
    ranked: tuple[int, ...]  # item indices, best first

    @classmethod
    def from_ranked(cls, target: int, ranked: Sequence[RankedItem]) -> "DecodeOutcome":
        return cls(target, tuple(r.item for r in ranked))


@dataclass
class TierStats:
    items: int
    mean_length: float
    recon_error: Optional[float]
    targets: int
    hits: int

    @property
    def hit_rate(self) -> Optional[float]:
        return self.hits / self.targets if self.targets else None


@dataclass
class ExperimentReport:
    n_items: int
    topk: int
    collision_pre: float
    pair_collision_pre: float
    collision_post: float
    length_histogram: dict[int, int]
    mean_length: float
    tiers: dict[str, TierStats]
    loss_history: list[list[float]] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def hit_rates(self) -> dict[str, Optional[float]]:
        return {t: s.hit_rate for t, s in self.tiers.items()}

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        d["length_histogram"] = {str(k): v for k, v in self.length_histogram.items()}
        for t, s in self.tiers.items():
            d["tiers"][t]["hit_rate"] = s.hit_rate
        if not timings:
            del d["timings"]
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Long format: ``metric, tier, value`` with ``all`` for catalog-wide rows."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "tier", "value"])
        num = lambda v: "" if v is None else f"{v:.17g}"
        w.writerow(["collision_pre", "all", num(self.collision_pre)])
        w.writerow(["pair_collision_pre", "all", num(self.pair_collision_pre)])
        w.writerow(["collision_post", "all", num(self.collision_post)])
        w.writerow(["mean_length", "all", num(self.mean_length)])
        for L, n in sorted(self.length_histogram.items()):
            w.writerow([f"items_length_{L}", "all", n])
        for t, s in self.tiers.items():
            w.writerow(["items", t, s.items])
            w.writerow(["mean_length", t, num(s.mean_length)])
            w.writerow(["recon_error", t, num(s.recon_error)])
            w.writerow(["targets", t, s.targets])
            w.writerow([f"hit@{self.topk}", t, num(s.hit_rate)])
        for stage, sec in self.timings.items():
            w.writerow([f"seconds_{stage}", "all", num(sec)])
        return buf.getvalue()

    def summary(self) -> str:
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        hist = ", ".join(f"L={L}: {n}" for L, n in sorted(self.length_histogram.items()))
        lines = [
            f"items               {self.n_items}",
            f"collisions (raw)    {fmt(self.collision_pre)} of items, "
            f"{fmt(self.pair_collision_pre)} of pairs",
            f"collisions (final)  {fmt(self.collision_post)}",
            f"mean length         {self.mean_length:.3f}  ({hist})",
            "",
            f"tier   items  mean_len  recon_err  targets  hit@{self.topk} (synthetic)",
        ]
        for t, s in self.tiers.items():
            lines.append(f"{t:<6} {s.items:>5}  {s.mean_length:>8.3f}  {fmt(s.recon_error):>9}"
                         f"  {s.targets:>7}  {fmt(s.hit_rate)}")
        if self.loss_history:
            lines.append("")
            lines.append(f"loss   epoch 1 {self.loss_history[0][-1]:.4f}  "
                         f"epoch {len(self.loss_history)} {self.loss_history[-1][-1]:.4f}")
        if self.timings:
            lines.append("")
            lines.extend(f"time   {k:<10} {v:.2f} s" for k, v in self.timings.items())
        return "\n".join(lines) + "\n"


def stratified_report(table: IdTable, catalog: ItemCatalog,
                      decode_results: Sequence[DecodeOutcome], topk: int = 10,
                      raw: Optional[Sequence[tuple]] = None,
                      recon_errors: Optional[np.ndarray] = None,
                      loss_history: Optional[list[list[float]]] = None,
                      timings: Optional[dict[str, float]] = None) -> ExperimentReport:
    """Per-tier metrics.  Hit@K counts a held-out target found among the top K decodes."""
    n = len(catalog)
    if len(table) != n:
        raise ValueError(f"table has {len(table)} ids for {n} items")
    labels = tier_labels(catalog.popularity)
    lengths = table.lengths
    raw = [sid.main for sid in table.ids] if raw is None else raw
    final = [sid.tokens for sid in table.ids]
    targets = np.array([d.target for d in decode_results], dtype=np.int64)
    hits = np.array([d.target in d.ranked[:topk] for d in decode_results], dtype=bool)
    tiers = {}
    for t in TIERS:
        sel = labels == t
        on = labels[targets] == t if len(targets) else np.zeros(0, dtype=bool)
        tiers[t] = TierStats(
            items=int(sel.sum()),
            mean_length=float(lengths[sel].mean()) if sel.any() else 0.0,
            recon_error=(float(recon_errors[sel].mean())
                         if recon_errors is not None and sel.any() else None),
            targets=int(on.sum()),
            hits=int(hits[on].sum()),
        )
    return ExperimentReport(
        n_items=n, topk=topk,
        collision_pre=collision_rate(raw), pair_collision_pre=pair_collision_rate(raw),
        collision_post=collision_rate(final),
        length_histogram={int(k): int(v) for k, v in table.length_histogram().items()},
        mean_length=float(lengths.mean()),
        tiers=tiers,
        loss_history=[list(map(float, r)) for r in (loss_history or [])],
        timings=dict(timings or {}),
    )
