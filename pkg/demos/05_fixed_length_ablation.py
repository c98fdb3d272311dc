"""
Does one ID length suit every item?
===================================

Force every ID to the same length and compare next-item hit rates by
popularity tier.  Pass a seed count on the command line (default 2).
"""

import sys

from varlenrec.harness.ablation import fixed_length_ablation
from varlenrec.harness.pipeline import PipelineConfig, run_pipeline

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2
base = PipelineConfig.from_dict({"sessions": {"n_sessions": 5000}})

for run in fixed_length_ablation(base, range(n_seeds), lengths=(2, 4, 6)):
    print(f"seed {run.seed}  held-out targets {run.targets}")
    for L, rates in sorted(run.hit_rates.items()):
        print(f"  L={L}  " + "  ".join(f"{t} {v if v is not None else float('nan'):.3f}"
                                       for t, v in rates.items()))
    for L, err in run.failures.items():
        print(f"  L={L}  {err}")
    print(f"  head peaks at the shortest and tail at the longest: {run.paradox}")

# variable lengths in one model: popular items short, rare items long
print(run_pipeline(PipelineConfig()).report.summary())
