"""Fixed-length ablation: per-tier hit rates as every ID is forced to one length."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from .pipeline import PipelineConfig, StageError, run_pipeline
from .report import TIERS


@dataclass
class AblationSeed:
    seed: int
    hit_rates: dict[int, dict[str, Optional[float]]]  # length -> tier -> hit rate
    targets: dict[str, int]
    failures: dict[int, str] = field(default_factory=dict)  # length -> stage error

    def best_length(self, tier: str, prefer: str) -> int:
        """Length with the highest hit rate; ties go to the ``prefer`` ("short"/"long") end."""
        sign = -1 if prefer == "short" else 1
        return max(self.hit_rates, key=lambda L: (self.hit_rates[L][tier] or 0.0, sign * L))

    @property
    def paradox(self) -> bool:
        """Head peaks at the shortest length and Tail at the longest."""
        lengths = sorted(self.hit_rates)
        if self.failures or not lengths:
            return False
        return (self.best_length("head", "long") == lengths[0]
                and self.best_length("tail", "short") == lengths[-1])


def ablation_config(base: PipelineConfig, seed: int, length: int) -> PipelineConfig:
    return replace(base, fixed_length=length,
                   catalog=replace(base.catalog, seed=seed),
                   sessions=replace(base.sessions, seed=seed),
                   train=replace(base.train, seed=seed))


def fixed_length_ablation(base: PipelineConfig, seeds: Sequence[int],
                          lengths: Sequence[int] = (2, 4, 6)) -> list[AblationSeed]:
    """Run the pipeline at each fixed length for each seed.

    Ties are broken against the expected outcome, so a flat profile never counts
    as a reproduction.  A run that fails (say, too many items on one code for
    the auxiliary range) is recorded and the seed counts as not reproducing.
    """
    out = []
    for seed in seeds:
        rates, targets, failures = {}, {}, {}
        for L in lengths:
            try:
                report = run_pipeline(ablation_config(base, seed, L)).report
            except StageError as err:
                failures[L] = str(err)
                continue
            rates[L] = report.hit_rates()
            targets = {t: report.tiers[t].targets for t in TIERS}
        out.append(AblationSeed(seed, rates, targets, failures))
    return out
