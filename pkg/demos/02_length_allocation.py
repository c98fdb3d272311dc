"""
Giving popular items short IDs
==============================

Popular items carry plenty of collaborative signal, so they need fewer
semantic tokens.  Target lengths come from popularity rank.
"""

import numpy as np

from varlenrec import piba
from varlenrec.harness.synth import zipf_popularity

K = 10
p = zipf_popularity(101, 1.0)
table = piba.PopularityTable(p, piba.popularity_ranks(p))

for beta in (0.5, 1.0, 2.0):
    a = piba.assign_lengths(table, piba.PibaParams(K=K, beta=beta))
    counts = np.bincount(a.lengths, minlength=K + 1)[1:]
    print(f"beta={beta}: items per length {counts.tolist()}")

# the middle item of 101 lands at length 6 when beta = 1
print("rank 50 of 101 ->", int(piba.quantile_lengths(np.arange(101), K, 1.0)[50]))

# the continuous view: length solving gamma * ln L = I_req - alpha * ln(1 + theta p)
params = piba.PibaParams()
for q in (1e-1, 1e-2, 1e-3, 1e-4):
    closed = float(piba.optimal_length_closed_form(q, params))
    search = piba.minimal_length_search(q, params)
    print(f"p={q:g}: closed form {closed:.2f}, harmonic search {search}")

# targets become cumulative masks the quantizer is trained against
print(piba.target_masks(np.array([1, 3, 6]), 6))
