"""Acceptance criteria 1-12, each checked against an independent oracle.

Every test records one PASS/FAIL line, printed in the pytest terminal summary
(and directly when this file is run as a script).  Criteria 3 and 12 do not
hold for this implementation; they are marked xfail with the reason and still
report FAIL.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from varlenrec import decoder as dec
from varlenrec import geometry as geo
from varlenrec import piba
from varlenrec.harness.ablation import fixed_length_ablation
from varlenrec.harness.pipeline import PipelineConfig
from varlenrec.harness.synth import SyntheticCatalogSpec, generate_catalog
from varlenrec.harq import HARQModel, clip_tangent, clip_tangent_vjp, discretize_length, forward
from varlenrec.id_registry import CapacityError, collision_rate, resolve_collisions
from varlenrec.piba import PibaParams
from varlenrec.testing import central_difference, inplace_difference, relative_error
from varlenrec.training import (Anchors, LossWeights, TrainConfig, backward, make_optimizer,
                                riemannian_adam_step, total_loss, train)

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # run as a script
    ACCEPTANCE_LINES = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def ball_points(rng, n, d, c=1.0, max_frac=0.9):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0, max_frac, size=(n, 1)) / math.sqrt(c)


def max_err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def arcosh_distance(x, y, c):
    """Closed-form distance written independently of the library's atanh form."""
    sq = np.sum((x - y) ** 2, axis=-1)
    den = (1 - c * np.sum(x * x, axis=-1)) * (1 - c * np.sum(y * y, axis=-1))
    return np.arccosh(1 + 2 * c * sq / den) / math.sqrt(c)


# --------------------------------------------------------------------------- 1

def test_criterion_01_geometry_identities():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    n, errs9, errs12 = 10_000, {}, {}
    for c in (0.5, 1.0, 2.0):
        x, y, z = (ball_points(rng, n, 5, c) for _ in range(3))
        v = rng.normal(size=(n, 5))
        errs9[f"exp(log x) c={c}"] = max_err(geo.exp_map_origin(geo.log_map_origin(x, c), c), x)
        errs9[f"log(exp v) c={c}"] = max_err(geo.log_map_origin(geo.exp_map_origin(v, c), c), v)
        errs9[f"-x+(x+y) c={c}"] = max_err(geo.mobius_add(-x, geo.mobius_add(x, y, c), c), y)
        errs9[f"x+0 c={c}"] = max_err(geo.mobius_add(x, np.zeros_like(x), c), x)
        errs9[f"x+(-x) c={c}"] = max_err(geo.mobius_add(x, geo.mobius_neg(x), c), 0.0)
        dxy = geo.hyp_distance(x, y, c)
        far = dxy > 0.1  # arcosh loses precision next to 1
        errs9[f"arcosh form c={c}"] = max_err(dxy[far], arcosh_distance(x, y, c)[far])
        errs12[f"symmetry c={c}"] = max_err(dxy, geo.hyp_distance(y, x, c))
        errs12[f"d(x,x) c={c}"] = float(np.max(geo.hyp_distance(x, x, c)))
        errs12[f"triangle c={c}"] = max(0.0, float(np.max(
            geo.hyp_distance(x, z, c) - dxy - geo.hyp_distance(y, z, c))))
        errs12[f"nonnegative c={c}"] = max(0.0, -float(dxy.min()))
    elapsed = time.perf_counter() - start
    w9, w12 = max(errs9, key=errs9.get), max(errs12, key=errs12.get)
    ok = errs9[w9] <= 1e-9 and errs12[w12] <= 1e-12 and elapsed < 10
    record(1, ok, f"worst 1e-9 check {w9} {errs9[w9]:.1e}; worst 1e-12 check {w12} "
                  f"{errs12[w12]:.1e}; {elapsed:.2f} s")
    assert ok


# --------------------------------------------------------------------------- 2

def vjp_error(f, vjp, args, rng):
    """Relative error of every input cotangent against central differences."""
    g = rng.normal(size=np.shape(f(*args)))
    analytic = vjp(*args, g)
    analytic = analytic if isinstance(analytic, tuple) else (analytic,)
    worst = 0.0
    for i, a in enumerate(args[: len(analytic)]):
        def scalar(v, i=i):
            full = list(args)
            full[i] = v
            return float(np.sum(g * f(*full)))
        worst = max(worst, relative_error(analytic[i], central_difference(scalar, a, 1e-6)))
    return worst


def full_loss_error(seed, pinned, rng):
    model = HARQModel.init(5, 4, 3, 3, seed=seed, enc_hidden=6, gate_hidden=5, dec_hidden=6,
                           gate_bias=0.3, pinned_gates=pinned)
    x = rng.normal(size=(4, 5))
    targets = np.array([[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 0]])
    weights = LossWeights(0.1, 0.5, 0.25)
    base = forward(model, x)
    anchors = Anchors.from_trace(base)
    grads = backward(model, base, targets, weights, anchors)

    def f():
        tr = forward(model, x, codes=base.codes, tangent_anchor=base.tangent_anchor)
        return total_loss(tr, targets, weights, model.c, anchors).total
    return max(relative_error(grads[k], inplace_difference(f, p))
               for k, p in model.parameters().items())


def test_criterion_02_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    errs = {}
    for c in (0.5, 1.0, 2.0):
        x, y = ball_points(rng, 3, 4, c, 0.8), ball_points(rng, 3, 4, c, 0.8)
        v = rng.normal(size=(3, 4))
        s = rng.uniform(0.1, 0.95, size=3)
        errs[f"mobius_add c={c}"] = vjp_error(lambda a, b: geo.mobius_add(a, b, c),
                                              lambda a, b, g: geo.mobius_add_vjp(a, b, g, c), (x, y), rng)
        errs[f"distance c={c}"] = vjp_error(lambda a, b: geo.hyp_distance(a, b, c),
                                            lambda a, b, g: geo.hyp_distance_vjp(a, b, g, c), (x, y), rng)
        errs[f"exp0 c={c}"] = vjp_error(lambda a: geo.exp_map_origin(a, c),
                                        lambda a, g: geo.exp_map_origin_vjp(a, g, c), (v,), rng)
        errs[f"log0 c={c}"] = vjp_error(lambda a: geo.log_map_origin(a, c),
                                        lambda a, g: geo.log_map_origin_vjp(a, g, c), (x,), rng)
        errs[f"scale c={c}"] = vjp_error(lambda r, a: geo.hyp_scale(r, a, c),
                                         lambda r, a, g: geo.hyp_scale_vjp(r, a, g, c), (s, x), rng)
        errs[f"project c={c}"] = vjp_error(lambda a: geo.project_to_safe_ball(a, c),
                                           lambda a, g: geo.project_to_safe_ball_vjp(a, g, c),
                                           (rng.normal(size=(3, 4)),), rng)
    errs["clip_tangent"] = vjp_error(lambda a: clip_tangent(a, 1.0),
                                     lambda a, g: clip_tangent_vjp(a, 1.0, g),
                                     (rng.normal(size=(3, 4)),), rng)
    for seed in range(3):
        for pinned in (False, True):
            errs[f"full loss seed={seed} pinned={pinned}"] = full_loss_error(seed, pinned, rng)
    elapsed = time.perf_counter() - start
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-3 and elapsed < 60
    record(2, ok, f"{len(errs)} gradients, worst {worst} rel err {errs[worst]:.1e}; {elapsed:.2f} s")
    assert ok


# --------------------------------------------------------------------------- 3

@pytest.mark.xfail(reason="the closed form inverts gamma*ln L while the oracle sums gamma*H_L; "
                          "H_L - ln L tends to 0.577, so the two drift apart by more than one "
                          "layer whenever the gap is large", strict=True)
def test_criterion_03_closed_form_vs_brute_force():
    rng = np.random.default_rng(3)
    within = worst = 0
    for _ in range(1000):
        params = PibaParams(alpha=rng.uniform(0.1, 5), theta=rng.uniform(1, 1000),
                            gamma=rng.uniform(1, 10), I_req=rng.uniform(1, 30), K=10)
        p = rng.uniform(1e-3, 1)
        gap = float(piba.info_gap(p, params))
        brute = next((L for L in range(1, params.K + 1)
                      if params.gamma * sum(1 / k for k in range(1, L + 1)) >= gap), params.K)
        closed = min(params.K, math.ceil(float(piba.optimal_length_closed_form(p, params)) - 1e-12))
        within += abs(closed - brute) <= 1
        worst = max(worst, abs(closed - brute))
    ok = within == 1000
    record(3, ok, f"{within}/1000 draws within one layer of the harmonic brute force "
                  f"(worst gap {worst} layers)")
    assert ok


# --------------------------------------------------------------------------- 4

def test_criterion_04_piba_endpoints():
    rng = np.random.default_rng(4)
    failures = []
    for n in (2, 3, 10, 101, 1000, 10_000):
        for beta in (0.5, 1.0, 2.0):
            for K in (1, 6, 10):
                p = rng.dirichlet(np.full(n, 0.5))
                a = piba.assign_lengths(piba.PopularityTable(p, piba.popularity_ranks(p)),
                                        PibaParams(K=K, beta=beta))
                by_rank = a.lengths[np.argsort(a.ranks)]
                if not (by_rank[0] == 1 and by_rank[-1] == K and np.all(np.diff(by_rank) >= 0)):
                    failures.append((n, beta, K))
    example = int(piba.quantile_lengths(np.arange(101), 10, 1.0)[50])
    ok = not failures and example == 6
    record(4, ok, f"{54 - len(failures)}/54 catalogs (N up to 10^4) monotone with endpoints 1 and K; "
                  f"N=101 beta=1 rank 50 -> {example}")
    assert ok


# --------------------------------------------------------------------------- 5

def test_criterion_05_capacity_slope():
    slopes = {}
    for d in (3, 5):
        rs = np.linspace(6, 10, 9)
        lib = [math.log(geo.hyp_ball_volume(r, d)) for r in rs]
        # independent volume: sphere area times the radial integral of sinh^(d-1)
        area = 2 * math.pi ** (d / 2) / math.gamma(d / 2)
        ref = [math.log(area * integrate.quad(lambda t: math.sinh(t) ** (d - 1), 0, r,
                                              epsabs=0, epsrel=1e-12)[0]) for r in rs]
        assert max_err(lib, ref) <= 1e-8
        slopes[d] = float(np.polyfit(rs, lib, 1)[0])
    ok = all(abs(s - (d - 1)) <= 0.05 * (d - 1) for d, s in slopes.items())
    record(5, ok, ", ".join(f"d={d} slope {s:.4f} vs {d - 1}" for d, s in slopes.items()))
    assert ok


# --------------------------------------------------------------------------- 6

def test_criterion_06_sarkar_embedding():
    c = 4.0
    radial, distortion = 0.0, {}
    for b in (2, 3):
        for depth in (1, 2, 3, 4):
            parents = geo.balanced_tree(b, depth)
            pts = geo.sarkar_embed_tree(parents, c=c, d=b + 1)
            levels = geo.tree_depths(parents)
            d0 = arcosh_distance(np.zeros_like(pts[1:]), pts[1:], c)
            radial = max(radial, max_err(d0, 2 * levels[1:]))
            distortion[(b, depth)] = geo.embedding_distortion(parents, pts, c)
    worst = max(distortion, key=distortion.get)
    ok = radial <= 1e-6 and distortion[worst] <= 1.1
    record(6, ok, f"radial law max err {radial:.1e}; worst distortion {distortion[worst]:.4f} "
                  f"(b={worst[0]}, depth {worst[1]}, c={c})")
    assert ok


# --------------------------------------------------------------------------- 7

def test_criterion_07_manifold_safety():
    rng = np.random.default_rng(7)
    worst = {}
    for c in (0.5, 1.0, 2.0):
        model = HARQModel.init(4, 3, 2, 8, c=c, seed=int(rng.integers(1 << 31)))
        params = {"codebook": model.codebook.vectors}
        state = make_optimizer(1.0)
        for _ in range(10_000):  # gradients toward the origin push every code outward
            noise = rng.normal(size=params["codebook"].shape)
            riemannian_adam_step(state, params, {"codebook": -1e3 * params["codebook"] + noise}, c)
        worst[c] = model.codebook.max_norm() - (1 / math.sqrt(c) - geo.SAFE_EPS)
    ok = all(v <= 1e-15 for v in worst.values())
    record(7, ok, "10^4 outward Adam steps at lr 1.0; max norm minus limit "
                  + ", ".join(f"c={c}: {v:.1e}" for c, v in worst.items()))
    assert ok


# --------------------------------------------------------------------------- 8

def test_criterion_08_collisions_and_hallucination():
    rng = np.random.default_rng(8)
    M, K = 8, 3
    n_decodes = returned = hallucinated = 0
    worst_collision = 0.0
    while n_decodes < 100_000:
        raw = [tuple(int(v) for v in rng.integers(0, M, size=rng.integers(1, K + 1)))
               for _ in range(rng.integers(5, 60))]
        try:
            table = resolve_collisions(raw, M, K)
        except CapacityError:
            continue
        worst_collision = max(worst_collision, collision_rate([s.tokens for s in table.ids]))
        registered = {s.tokens for s in table.ids}
        trie = dec.Trie.build(table)
        model = dec.MarkovModel.random(M, K + 2, rng)
        for _ in range(1000):
            hist = [table.ids[i].tokens for i in rng.integers(len(table), size=rng.integers(0, 4))]
            for r in dec.decode(hist, model, table, trie, B=int(rng.integers(1, 6)), topk=5):
                returned += 1
                hallucinated += r.tokens not in registered
            n_decodes += 1
    ok = worst_collision == 0.0 and hallucinated == 0
    record(8, ok, f"{n_decodes} decodes returned {returned} IDs, {hallucinated} unregistered; "
                  f"worst post-resolution collision rate {worst_collision}")
    assert ok


# --------------------------------------------------------------------------- 9

def test_criterion_09_beam_vs_exhaustive():
    rng = np.random.default_rng(9)
    M, K = 8, 3
    agree = 0
    for _ in range(100):
        while True:
            raw = [tuple(int(v) for v in rng.integers(0, M, size=rng.integers(1, K + 1)))
                   for _ in range(50)]
            try:
                table = resolve_collisions(raw, M, K)
                break
            except CapacityError:
                continue
        trie = dec.Trie.build(table)
        model = dec.MarkovModel.random(M, K + 2, rng)
        hist = [table.ids[rng.integers(50)].tokens]
        beam = dec.constrained_beam_search(hist, model, trie, B=len(table) + int(rng.integers(0, 5)))
        scores = [dec.sequence_log_prob(hist, model, s.tokens) for s in table.ids]
        agree += beam.completed[0].tokens == table.ids[int(np.argmax(scores))].tokens
    ok = agree == 100
    record(9, ok, f"{agree}/100 random models: beam top-1 equals exhaustive argmax on 50 items")
    assert ok


# --------------------------------------------------------------------------- 10

def test_criterion_10_rescoring():
    a = dec.odds_ratio_score(0.9, 0.5)
    b = dec.odds_ratio_score(0.1, 0.9)
    examples_ok = abs(a - math.log(9)) <= 1e-9 and abs(b) <= 1e-9

    # short S=(1) shares its prefix with X=(1,2); long L=(3..0) stands alone
    M = 8
    eos = 2 * M
    S, X, L = (1, eos), (1, 2, eos), (3, 4, 5, 6, 7, 0, eos)
    table = resolve_collisions([S[:-1], X[:-1], L[:-1]], M, 6)
    probs = {(): {1: 0.55, 3: 0.45}, (1,): {eos: 10 / 11, 2: 1 / 11}, (1, 2): {eos: 1.0}}
    for k in range(1, 7):
        probs[L[:k]] = {L[k]: 1.0}
    model = dec.TableModel(2 * M + 1, probs)
    trie = dec.Trie.build(table)
    beam = dec.constrained_beam_search([], model, trie, B=5)
    raw_first = table.item_of(beam.completed[0].tokens)
    ranked = dec.rescore_and_rank([], model, table, trie, beam, topk=3)
    p_short = 0.55 * 10 / 11
    scenario_ok = raw_first == 0 and ranked[0].item == 2 and 0.45 < p_short
    ok = examples_ok and scenario_ok
    record(10, ok, f"score(0.9, 0.5) - ln 9 = {a - math.log(9):.1e}, score(0.1, 0.9) = {b}; "
                   f"log-prob ranks item {raw_first} first, rescoring ranks item {ranked[0].item} "
                   f"(the 6-token ID) first")
    assert ok


# --------------------------------------------------------------------------- 11

def desk_run(lam_len: float, seed: int):
    catalog = generate_catalog(SyntheticCatalogSpec(N=200, seed=seed))
    cfg = TrainConfig(K=6, M=32, dim=16, epochs=50, lam_len=lam_len, seed=seed)
    assignment = piba.assign_lengths(catalog.table, PibaParams(K=cfg.K))
    start = time.perf_counter()
    result = train(catalog.features, assignment.masks, cfg)
    elapsed = time.perf_counter() - start
    lengths = discretize_length(forward(result.model, catalog.features).masks, cfg.tau)
    return result.history, float(np.mean(lengths == assignment.lengths)), elapsed


def test_criterion_11_desk_training():
    hist, _, t_default = desk_run(0.01, seed=0)
    decreased = hist[-1].total < hist[0].total
    _, match, t_len = desk_run(1e3, seed=0)
    ok = decreased and match >= 0.95 and max(t_default, t_len) < 300
    record(11, ok, f"total loss {hist[0].total:.3f} -> {hist[-1].total:.3f}; "
                   f"lengths match targets for {match:.1%} of items at lambda_len=1e3; "
                   f"runs took {t_default:.1f} s and {t_len:.1f} s")
    assert ok


# --------------------------------------------------------------------------- 12

@pytest.mark.xfail(reason="a first-order count model pays one more smoothed factor per token, so "
                          "longer IDs never help rare items; see the decisions log", strict=False)
def test_criterion_12_paradox_analogue():
    base = PipelineConfig.from_dict({"sessions": {"n_sessions": 5000}})
    runs = fixed_length_ablation(base, range(5), lengths=(2, 4, 6))
    wins = sum(r.paradox for r in runs)
    parts = []
    for r in runs:
        if r.failures:
            parts.append(f"seed {r.seed}: failed at L={sorted(r.failures)}")
        else:
            parts.append(f"seed {r.seed}: head best L={r.best_length('head', 'long')}, "
                         f"tail best L={r.best_length('tail', 'short')}")
    ok = wins >= 4
    record(12, ok, f"{wins}/5 seeds reproduce ({'; '.join(parts)})")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-rxX"]))
