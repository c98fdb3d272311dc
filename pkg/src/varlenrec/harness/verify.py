"""Self-check suite: module invariants and numeric oracles in one call."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .. import decoder as dec
from .. import geometry as geo
from .. import piba
from ..harq import Codebook, HARQModel, forward
from ..id_registry import collision_rate, resolve_collisions
from ..testing import central_difference, inplace_difference, relative_error
from ..training import Anchors, LossWeights, backward, make_optimizer, riemannian_adam_step, total_loss

N_SAMPLES = 10_000
GRAD_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


@dataclass
class VerifyReport:
    results: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def summary(self) -> str:
        lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.detail}  ({r.seconds:.2f} s)"
                 for r in self.results]
        n_ok = sum(r.passed for r in self.results)
        lines.append(f"{n_ok}/{len(self.results)} checks passed")
        return "\n".join(lines) + "\n"


def _ball_points(rng, n, d, c, max_frac=0.9):
    v = rng.normal(size=(n, d))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0, max_frac, size=(n, 1)) / math.sqrt(c)


def _max_err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# --------------------------------------------------------------------------- geometry

def _check_mobius(rng):
    x, y = _ball_points(rng, N_SAMPLES, 5, 1.0), _ball_points(rng, N_SAMPLES, 5, 1.0)
    err = max(_max_err(geo.mobius_add(-x, geo.mobius_add(x, y)), y),
              _max_err(geo.mobius_add(x, np.zeros_like(x)), x),
              _max_err(geo.mobius_add(x, -x), 0.0))
    return err <= 1e-9, f"left cancellation/identity/inverse max err {err:.1e}"


def _check_exp_log(rng):
    errs = []
    for c in (0.5, 1.0, 2.0):
        x = _ball_points(rng, N_SAMPLES, 5, c)
        v = rng.normal(size=(N_SAMPLES, 5))
        errs += [_max_err(geo.exp_map_origin(geo.log_map_origin(x, c), c), x),
                 _max_err(geo.log_map_origin(geo.exp_map_origin(v, c), c), v)]
    return max(errs) <= 1e-9, f"round trips max err {max(errs):.1e}"


def _check_metric_axioms(rng):
    x, y, z = (_ball_points(rng, N_SAMPLES, 4, 1.0) for _ in range(3))
    dxy, dyx = geo.hyp_distance(x, y), geo.hyp_distance(y, x)
    tri = geo.hyp_distance(x, z) - dxy - geo.hyp_distance(y, z)
    self_d = geo.hyp_distance(x, x)
    ok = (_max_err(dxy, dyx) <= 1e-12 and tri.max() <= 1e-12 and self_d.max() <= 1e-12
          and np.all(dxy >= 0))
    return ok, f"symmetry {_max_err(dxy, dyx):.1e}, triangle slack {tri.max():.1e}"


def _check_gyro_invariance(rng):
    a, x, y = (_ball_points(rng, N_SAMPLES, 4, 1.0, 0.7) for _ in range(3))
    err = _max_err(geo.hyp_distance(geo.mobius_add(a, x), geo.mobius_add(a, y)),
                   geo.hyp_distance(x, y))
    return err <= 1e-8, f"d(a+x, a+y) = d(x, y) max err {err:.1e}"


def _check_scale(rng):
    x = _ball_points(rng, N_SAMPLES, 4, 1.0)
    err = max(_max_err(geo.hyp_scale(1.0, x), x),
              _max_err(geo.hyp_scale(0.3, geo.hyp_scale(0.5, x)), geo.hyp_scale(0.15, x)))
    return err <= 1e-9, f"identity and composition max err {err:.1e}"


def _check_projection(rng):
    x = rng.normal(size=(N_SAMPLES, 4)) * 3
    norms = np.linalg.norm(geo.project_to_safe_ball(x), axis=1)
    limit = geo.ball_radius(1.0) - geo.SAFE_EPS
    return bool(norms.max() <= limit + 1e-15), f"max norm {norms.max():.8f} <= {limit:.8f}"


# --------------------------------------------------------------------------- gradients

def _grad_check(f, vjp, args, rng):
    """Compare a vjp against central differences of <g, f(args)>."""
    g = rng.normal(size=np.shape(f(*args)))
    analytic = vjp(*args, g)
    analytic = analytic if isinstance(analytic, tuple) else (analytic,)
    errs = []
    for i, a in enumerate(args):
        if i >= len(analytic):
            break

        def scalar(v, i=i):
            full = list(args)
            full[i] = v
            return float(np.sum(g * f(*full)))
        errs.append(relative_error(analytic[i], central_difference(scalar, a, 1e-6)))
    return max(errs)


def _check_grad_geometry(rng):
    x, y = _ball_points(rng, 3, 4, 1.0, 0.8), _ball_points(rng, 3, 4, 1.0, 0.8)
    v = rng.normal(size=(3, 4))
    errs = {
        "mobius_add": _grad_check(geo.mobius_add, geo.mobius_add_vjp, (x, y), rng),
        "exp0": _grad_check(geo.exp_map_origin, geo.exp_map_origin_vjp, (v,), rng),
        "log0": _grad_check(geo.log_map_origin, geo.log_map_origin_vjp, (x,), rng),
        "distance": _grad_check(geo.hyp_distance, geo.hyp_distance_vjp, (x, y), rng),
        "project": _grad_check(geo.project_to_safe_ball, geo.project_to_safe_ball_vjp,
                               (rng.normal(size=(3, 4)),), rng),
    }
    worst = max(errs, key=errs.get)
    return errs[worst] <= GRAD_TOL, f"worst {worst} rel err {errs[worst]:.1e}"


def _check_grad_loss(rng):
    model = HARQModel.init(5, 4, 2, 3, seed=3, enc_hidden=6, gate_hidden=5, dec_hidden=6,
                           gate_bias=0.3)
    x = rng.normal(size=(4, 5))
    targets = np.array([[1, 0], [1, 1], [1, 0], [1, 1]])
    weights = LossWeights(0.1, 0.5, 0.25)
    base = forward(model, x)
    anchors = Anchors.from_trace(base)
    grads = backward(model, base, targets, weights, anchors)

    def f():
        tr = forward(model, x, codes=base.codes, tangent_anchor=base.tangent_anchor)
        return total_loss(tr, targets, weights, model.c, anchors).total
    errs = {k: relative_error(grads[k], inplace_difference(f, p))
            for k, p in model.parameters().items()}
    worst = max(errs, key=errs.get)
    return errs[worst] <= GRAD_TOL, f"toy model, worst {worst} rel err {errs[worst]:.1e}"


# --------------------------------------------------------------------------- length allocation

def _check_piba_oracle(rng):
    bad = 0
    for _ in range(1000):
        params = piba.PibaParams(alpha=rng.uniform(0.5, 2), theta=rng.uniform(10, 1000),
                                 gamma=rng.uniform(2, 10), I_req=rng.uniform(5, 30), K=10)
        p = 10 ** rng.uniform(-6, 0)
        closed = float(piba.optimal_length_closed_form(p, params))
        # brute force on the same ln L capacity the closed form inverts
        gap = float(piba.info_gap(p, params))
        lo, hi = 1, 2
        while params.gamma * math.log(hi) < gap:
            hi *= 2
        while lo < hi:  # smallest integer L with gamma ln L >= gap
            mid = (lo + hi) // 2
            lo, hi = (mid + 1, hi) if params.gamma * math.log(mid) < gap else (lo, mid)
        bad += abs(max(math.ceil(closed - 1e-12), 1) - lo) > 1
    return bad == 0, f"{1000 - bad}/1000 draws within one layer of brute force"


def _check_piba_endpoints(rng):
    ok = True
    for n in (2, 10, 101, 10_000):
        p = rng.dirichlet(np.ones(n))
        a = piba.assign_lengths(piba.PopularityTable(p, piba.popularity_ranks(p)), piba.PibaParams(K=6))
        by_rank = a.lengths[np.argsort(a.ranks)]
        ok &= by_rank[0] == 1 and by_rank[-1] == 6 and bool(np.all(np.diff(by_rank) >= 0))
    example = piba.quantile_lengths(np.array([50] + list(range(50)) + list(range(51, 101))), 10, 1.0)[0]
    ok &= example == 6
    return bool(ok), f"endpoints/monotone up to N=10^4, rank 50 of 101 -> {example}"


# --------------------------------------------------------------------------- capacity and trees

def _check_capacity(rng):
    slopes = {}
    for d in (3, 5):
        rs = np.linspace(6, 10, 9)
        slopes[d] = np.polyfit(rs, [math.log(geo.hyp_ball_volume(r, d)) for r in rs], 1)[0]
    ok = all(abs(s - (d - 1)) <= 0.05 * (d - 1) for d, s in slopes.items())
    return ok, ", ".join(f"d={d} slope {s:.3f}" for d, s in slopes.items())


def _check_sarkar_radial(rng):
    err = 0.0
    for b in (2, 3):
        parents = geo.balanced_tree(b, 4)
        pts = geo.sarkar_embed_tree(parents, c=4.0, d=b + 1)
        radial = geo.hyp_distance(np.zeros_like(pts), pts, 4.0)
        err = max(err, _max_err(radial, 2 * geo.tree_depths(parents)))
    return err <= 1e-6, f"radial law max err {err:.1e}"


def _check_sarkar_distortion(rng):
    worst = max(geo.embedding_distortion(p, geo.sarkar_embed_tree(p, 4.0, b + 1), 4.0)
                for b in (2, 3) for p in [geo.balanced_tree(b, 4)])
    return worst <= 1.1, f"worst distortion {worst:.4f}"


# --------------------------------------------------------------------------- model and training

def _check_codebook_safety(rng, codebook: Optional[Codebook] = None):
    if codebook is None:
        model = HARQModel.init(4, 3, 2, 4, seed=int(rng.integers(1 << 31)))
        params = {"codebook": model.codebook.vectors}
        state = make_optimizer(0.5)
        for _ in range(200):  # gradients pointing at the origin drive every code outward
            noise = rng.normal(size=params["codebook"].shape)
            riemannian_adam_step(state, params, {"codebook": -1e3 * params["codebook"] + noise})
        codebook = model.codebook
    limit = geo.ball_radius(codebook.c) - geo.SAFE_EPS
    return codebook.is_safe(), f"max code norm {codebook.max_norm():.8f}, limit {limit:.8f}"


def _check_mask_monotone(rng):
    model = HARQModel.init(6, 4, 5, 4, seed=1)
    masks = forward(model, rng.normal(size=(200, 6))).masks
    return bool(np.all(np.diff(masks, axis=1) <= 0)), "cumulative masks nonincreasing"


def _check_residual_safe(rng):
    model = HARQModel.init(6, 4, 5, 4, seed=2)
    tr = forward(model, rng.normal(size=(200, 6)) * 10)
    limit = geo.ball_radius(1.0) - geo.SAFE_EPS
    n = np.linalg.norm(tr.residuals, axis=-1).max()
    return bool(n <= limit + 1e-15), f"max residual norm {n:.8f}"


# --------------------------------------------------------------------------- registry and decoding

def _random_table(rng, n, M=8, K=3):
    raw = [tuple(int(v) for v in rng.integers(0, M, size=rng.integers(1, K + 1))) for _ in range(n)]
    return raw, resolve_collisions(raw, M, K)


def _check_collisions(rng):
    worst = 0.0
    for _ in range(50):
        _, table = _random_table(rng, 80, M=16)
        worst = max(worst, collision_rate([s.tokens for s in table.ids]))
    return worst == 0.0, f"post-resolution collision rate {worst}"


def _check_no_hallucination(rng):
    raw, table = _random_table(rng, 40)
    trie = dec.Trie.build(table)
    registered = {s.tokens for s in table.ids}
    bad = n = 0
    for _ in range(100):
        model = dec.MarkovModel.random(8, 5, rng)
        for r in dec.decode([], model, table, trie, B=4, topk=10):
            n += 1
            bad += r.tokens not in registered
    return bad == 0, f"{bad} unregistered of {n} decodes"


def _check_beam_exhaustive(rng):
    wrong = 0
    for _ in range(20):
        _, table = _random_table(rng, 50)
        trie = dec.Trie.build(table)
        model = dec.MarkovModel.random(8, 5, rng)
        hist = [table.ids[rng.integers(50)].tokens]
        res = dec.constrained_beam_search(hist, model, trie, len(table))
        best = max(table.ids, key=lambda s: (dec.sequence_log_prob(hist, model, s.tokens),
                                             [-v for v in s.tokens]))
        wrong += res.completed[0].tokens != best.tokens
    return wrong == 0, f"{20 - wrong}/20 beam top-1 equal exhaustive argmax"


def _check_rescore_examples(rng):
    a = dec.odds_ratio_score(0.9, 0.5)
    b = dec.odds_ratio_score(0.1, 0.9)
    ok = abs(a - math.log(9)) <= 1e-9 and b == 0.0
    return ok, f"score(0.9, 0.5) = {a:.12f}, score(0.1, 0.9) = {b}"


def _check_rescore_monotone(rng):
    p = np.sort(rng.uniform(0.01, 0.99, size=200))
    up = [dec.odds_ratio_score(v, 0.05) for v in p]
    down = [dec.odds_ratio_score(0.95, v) for v in p]
    ok = bool(np.all(np.diff(up) >= 0) and np.all(np.diff(down) <= 0))
    return ok, "nondecreasing in p_cond, nonincreasing in p_marg"


def _check_log_score_agrees(rng):
    pc, pm = rng.uniform(0.01, 0.99, 500), rng.uniform(0.01, 0.99, 500)
    err = max(abs(dec.odds_ratio_score(a, b) - dec.log_odds_ratio_score(math.log(a), b))
              for a, b in zip(pc, pm))
    return err <= 1e-9, f"log-space score max err {err:.1e}"


CHECKS: list[tuple[str, Callable]] = [
    ("mobius_identities", _check_mobius),
    ("exp_log_inverse", _check_exp_log),
    ("metric_axioms", _check_metric_axioms),
    ("gyro_invariance", _check_gyro_invariance),
    ("scale_identities", _check_scale),
    ("safe_projection", _check_projection),
    ("grad_geometry", _check_grad_geometry),
    ("grad_full_loss", _check_grad_loss),
    ("piba_closed_form_oracle", _check_piba_oracle),
    ("piba_endpoints", _check_piba_endpoints),
    ("capacity_slope", _check_capacity),
    ("sarkar_radial_law", _check_sarkar_radial),
    ("sarkar_distortion", _check_sarkar_distortion),
    ("codebook_safety", _check_codebook_safety),
    ("mask_monotone", _check_mask_monotone),
    ("residuals_in_ball", _check_residual_safe),
    ("zero_collisions", _check_collisions),
    ("trie_no_hallucination", _check_no_hallucination),
    ("beam_vs_exhaustive", _check_beam_exhaustive),
    ("rescore_examples", _check_rescore_examples),
    ("rescore_monotone", _check_rescore_monotone),
    ("rescore_log_space", _check_log_score_agrees),
]


def verify_suite(seed: int = 0, codebook: Optional[Codebook] = None) -> VerifyReport:
    """Run every check; ``codebook`` replaces the stress-tested one in the safety check."""
    results = []
    for name, fn in CHECKS:
        rng = np.random.default_rng([seed, len(results)])
        start = time.perf_counter()
        try:
            if fn is _check_codebook_safety:
                ok, detail = fn(rng, codebook)
            else:
                ok, detail = fn(rng)
        except Exception as err:  # a crashing check is a failing check
            ok, detail = False, f"raised {type(err).__name__}: {err}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - start))
    return VerifyReport(results)
