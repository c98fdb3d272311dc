"""
Decoding only IDs that exist
============================

Beam search walks a trie of registered IDs, so nothing it returns is
invented.  Candidates are then ranked by how much the history raises their
probability over a prior, which stops short IDs winning on length alone.
"""

import math

from varlenrec import decoder as dec
from varlenrec.id_registry import resolve_collisions

M = 8
EOS = 2 * M

# a short ID sharing its first token with a longer sibling, and one long loner
table = resolve_collisions([(1,), (1, 2), (3, 4, 5, 6, 7, 0)], M, 6, ["short", "sibling", "long"])
trie = dec.Trie.build(table)
probs = {(): {1: 0.55, 3: 0.45}, (1,): {EOS: 10 / 11, 2: 1 / 11}, (1, 2): {EOS: 1.0}}
long_tokens = table.ids[2].tokens
for k in range(1, len(long_tokens)):
    probs[long_tokens[:k]] = {long_tokens[k]: 1.0}
model = dec.TableModel(2 * M + 1, probs)

beam = dec.constrained_beam_search([], model, trie, B=5)
print("by raw log-probability:")
for h in beam.completed:
    print(f"  {table.item_names[table.item_of(h.tokens)]:<8} log p = {h.log_prob:.3f}")

print("after odds-ratio rescoring:")
for r in dec.rescore_and_rank([], model, table, trie, beam, topk=3):
    print(f"  {table.item_names[r.item]:<8} score = {r.score:.3f}")

# the score itself: log of the odds ratio, clamped at zero
print("score(0.9, 0.5) =", dec.odds_ratio_score(0.9, 0.5), "= ln 9 =", math.log(9))
print("score(0.1, 0.9) =", dec.odds_ratio_score(0.1, 0.9))
