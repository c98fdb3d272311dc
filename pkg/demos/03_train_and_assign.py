"""
Training the quantizer and reading off IDs
==========================================

A small synthetic catalog, hyperbolic residual quantization with
retention gates, and the collision-free ID table that comes out.
"""

import time

import numpy as np

from varlenrec import piba
from varlenrec.harq import discretize_length, forward
from varlenrec.harness.pipeline import PIPELINE_TRAIN_DEFAULTS
from varlenrec.harness.synth import SyntheticCatalogSpec, generate_catalog
from varlenrec.id_registry import assign_raw_ids, collision_rate, resolve_collisions
from varlenrec.training import TrainConfig, train

catalog = generate_catalog(SyntheticCatalogSpec(N=200, seed=0))
# the end-to-end settings: a firm length weight and clipped encoder outputs
cfg = TrainConfig(K=6, M=32, dim=16, epochs=50, **PIPELINE_TRAIN_DEFAULTS)
assignment = piba.assign_lengths(catalog.table, piba.PibaParams(K=cfg.K))

start = time.perf_counter()
result = train(catalog.features, assignment.masks, cfg)
print(f"trained in {time.perf_counter() - start:.1f} s")
for epoch in (1, 10, 20, 30, 40, 50):
    h = result.history[epoch - 1]
    print(f"epoch {epoch:>2}  total {h.total:8.3f}  recon {h.recon:7.3f}  len {h.len:.4f}")

# hard lengths from the gates against the popularity targets
lengths = discretize_length(forward(result.model, catalog.features).masks, cfg.tau)
print(f"lengths match targets for {np.mean(lengths == assignment.lengths):.1%} of items")

# codes that coincide get one auxiliary token so every ID is unique
raw = assign_raw_ids(catalog.features, result.model, cfg.tau)
table = resolve_collisions(raw, cfg.M, cfg.K, catalog.item_ids)
print(f"raw collision rate {collision_rate(raw):.3f}, after resolution "
      f"{collision_rate([s.tokens for s in table.ids]):.3f}")
for i in (0, 1, 100, 199):
    print(f"item {catalog.item_ids[i]:>3} (rank {i}): tokens {table.ids[i].tokens}")
