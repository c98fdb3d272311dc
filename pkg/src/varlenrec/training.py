"""Four-part HARQ objective, hand-written backward pass and Riemannian Adam.

Per-item losses are summed over layers; batch losses are means over items.
The straight-through bridge and the stop-gradient operands are both modelled
with explicit frozen anchors, so the gradient returned by :func:`backward` is
the exact derivative of the loss with those anchors held fixed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2

from . import geometry as geo
from .harq import (ST_MODES, Codebook, ForwardTrace, HARQModel, clip_tangent, clip_tangent_vjp, encode,
                   forward)

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lam_cost: float = 0.1
    lam_len: float = 0.01
    beta_commit: float = 0.25

    def __post_init__(self):
        if self.lam_cost < 0 or self.lam_len < 0 or self.beta_commit <= 0:
            raise ValueError("loss weights must be nonnegative and beta_commit positive")


@dataclass(frozen=True)
class LossBreakdown:
    recon: float
    quant: float
    cost: float
    len: float
    total: float
    weights: LossWeights

    @classmethod
    def combine(cls, recon, quant, cost, length, weights: LossWeights) -> "LossBreakdown":
        total = recon + quant + weights.lam_cost * cost + weights.lam_len * length
        return cls(float(recon), float(quant), float(cost), float(length), float(total), weights)

    def as_row(self) -> list[float]:
        return [self.recon, self.quant, self.cost, self.len, self.total]


@dataclass
class Anchors:
    """Frozen values standing in for stop-gradient operands.

    ``residuals`` (B, K, d) replaces sg[r^(l-1)] and ``codes`` (B, K, d)
    replaces sg[e^(l)] in the quantization loss.
    """

    residuals: np.ndarray
    codes: np.ndarray

    @classmethod
    def from_trace(cls, trace: ForwardTrace) -> "Anchors":
        return cls(trace.residuals[:, :-1].copy(), trace.code_vectors.copy())


def loss_recon(x, x_hat) -> np.ndarray:
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat must have the same shape")
    return np.sum((x - x_hat) ** 2, axis=-1)


def loss_quant(trace: ForwardTrace, beta_commit: float, c: float = 1.0,
               anchors: Optional[Anchors] = None) -> np.ndarray:
    """Codebook term plus beta times commitment term, per item."""
    if beta_commit <= 0:
        raise ValueError("beta_commit must be positive")
    if anchors is None:
        anchors = Anchors.from_trace(trace)
    r, e = trace.residuals[:, :-1], trace.code_vectors
    codebook_term = geo.hyp_distance(anchors.residuals, e, c) ** 2
    commit_term = geo.hyp_distance(r, anchors.codes, c) ** 2
    return np.sum(codebook_term + beta_commit * commit_term, axis=-1)


def loss_cost(masks) -> np.ndarray:
    return np.sum(np.asarray(masks, dtype=np.float64), axis=-1)


def loss_len(masks, targets) -> np.ndarray:
    m = np.clip(np.asarray(masks, dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    t = np.asarray(targets, dtype=np.float64)
    if m.shape != t.shape:
        raise ValueError("mask and target shapes differ")
    return -np.sum(t * np.log(m) + (1 - t) * np.log1p(-m), axis=-1)


def item_losses(trace: ForwardTrace, targets, weights: LossWeights, c: float = 1.0,
                anchors: Optional[Anchors] = None) -> dict[str, np.ndarray]:
    return dict(recon=loss_recon(trace.x, trace.x_hat),
                quant=loss_quant(trace, weights.beta_commit, c, anchors),
                cost=loss_cost(trace.masks),
                len=loss_len(trace.masks, targets))


def total_loss(trace: ForwardTrace, targets, weights: LossWeights, c: float = 1.0,
               anchors: Optional[Anchors] = None) -> LossBreakdown:
    parts = item_losses(trace, targets, weights, c, anchors)
    return LossBreakdown.combine(*(parts[k].mean() for k in ("recon", "quant", "cost", "len")),
                                 weights)


def _cumprod_vjp(alphas: np.ndarray, g_m: np.ndarray) -> np.ndarray:
    """Gradient of m = cumprod(alpha) along the last axis, without division."""
    K = alphas.shape[-1]
    prefix = np.ones_like(alphas)
    prefix[..., 1:] = np.cumprod(alphas[..., :-1], axis=-1)
    suffix = np.empty_like(g_m)
    suffix[..., K - 1] = g_m[..., K - 1]
    for j in range(K - 2, -1, -1):
        suffix[..., j] = g_m[..., j] + alphas[..., j + 1] * suffix[..., j + 1]
    return prefix * suffix


def backward(model: HARQModel, trace: ForwardTrace, targets, weights: LossWeights,
             anchors: Optional[Anchors] = None) -> dict[str, np.ndarray]:
    """Gradients of the batch-mean total loss for every entry of ``model.parameters()``."""
    c = model.c
    ch = trace.cache
    B, K = trace.codes.shape
    d = model.codebook.dim
    if anchors is None:
        anchors = Anchors.from_trace(trace)
    targets = np.asarray(targets, dtype=np.float64)
    inv_b = 1.0 / B

    # decoder and accumulation
    g_xhat = 2.0 * (trace.x_hat - trace.x) * inv_b
    g_y, dec_gw, dec_gb = model.dec.backward(ch["dec"], g_xhat)
    acc, scaled, w = ch["acc"], ch["scaled"], ch["w"]
    g_acc = geo.log_map_origin_vjp(acc[:, K], g_y, c)
    g_scaled = np.empty((B, K, d))
    for l in range(K - 1, -1, -1):
        g_acc, g_scaled[:, l] = geo.mobius_add_vjp(acc[:, l], scaled[:, l], g_acc, c)
    g_w = geo.exp_map_origin_vjp(w, g_scaled, c)
    g_m = np.sum(g_w * ch["direction"], axis=-1)
    g_dir = trace.masks[..., None] * g_w
    g_ue = g_dir.copy()
    g_ur = np.zeros((B, K, d))
    if trace.straight_through == "residual":
        g_ur += g_dir
    elif trace.straight_through == "encoder":
        g_ur[:, 0] = g_dir[:, 0]

    # mask regularizers
    g_m = g_m + weights.lam_cost * inv_b
    m = trace.masks
    inside = (m > BCE_CLAMP) & (m < 1 - BCE_CLAMP)
    m_c = np.clip(m, BCE_CLAMP, 1 - BCE_CLAMP)
    g_m = g_m + weights.lam_len * inv_b * inside * (-(targets / m_c) + (1 - targets) / (1 - m_c))

    grads = {}
    gate_gw = [np.zeros_like(wt) for wt in model.gate.weights]
    gate_gb = [np.zeros_like(bs) for bs in model.gate.biases]
    if not model.pinned_gates:
        a = trace.alphas
        g_logit = _cumprod_vjp(a, g_m) * a * (1 - a)
        for l in range(K):
            g_feat, gw, gb = model.gate.backward(ch["gate"][l], g_logit[:, l:l + 1])
            for i in range(len(gw)):
                gate_gw[i] += gw[i]
                gate_gb[i] += gb[i]
            g_ur[:, l] += g_feat[:, :d]
            g_ue[:, l] += g_feat[:, d:]

    # quantization loss, respecting the frozen stop-gradient operands
    r_prev, e = trace.residuals[:, :-1], trace.code_vectors
    dist_cb = geo.hyp_distance(anchors.residuals, e, c)
    _, g_e = geo.hyp_distance_vjp(anchors.residuals, e, 2.0 * dist_cb * inv_b, c)
    dist_commit = geo.hyp_distance(r_prev, anchors.codes, c)
    g_r = np.zeros((B, K + 1, d))
    g_r[:, :K], _ = geo.hyp_distance_vjp(r_prev, anchors.codes,
                                         2.0 * weights.beta_commit * dist_commit * inv_b, c)

    g_e = g_e + geo.log_map_origin_vjp(e, g_ue, c)
    g_r[:, :K] += geo.log_map_origin_vjp(r_prev, g_ur, c)

    # residual chain, last layer first
    raw = ch["residual_raw"]
    for l in range(K - 1, -1, -1):
        g_raw = geo.project_to_safe_ball_vjp(raw[:, l], g_r[:, l + 1], c)
        g_neg_e, g_prev = geo.mobius_add_vjp(-e[:, l], r_prev[:, l], g_raw, c)
        g_e[:, l] -= g_neg_e
        g_r[:, l] += g_prev

    g_z0raw = geo.project_to_safe_ball_vjp(ch["z0_raw"], g_r[:, 0], c)
    h = ch["h"]
    g_h = clip_tangent_vjp(h, model.max_tangent,
                           geo.exp_map_origin_vjp(clip_tangent(h, model.max_tangent), g_z0raw, c))
    _, enc_gw, enc_gb = model.enc.backward(ch["enc"], g_h)

    g_codebook = np.zeros_like(model.codebook.vectors)
    layer_idx = np.broadcast_to(np.arange(K), (B, K))
    np.add.at(g_codebook, (layer_idx, trace.codes), g_e)

    for prefix, gw, gb in (("enc", enc_gw, enc_gb), ("gate", gate_gw, gate_gb),
                           ("dec", dec_gw, dec_gb)):
        for i in range(len(gw)):
            grads[f"{prefix}.W{i}"] = gw[i]
            grads[f"{prefix}.b{i}"] = gb[i]
    grads["codebook"] = g_codebook

    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient in {', '.join(bad)}")
    return grads


@dataclass
class OptimizerState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    manifold: frozenset
    step: int = 0
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)


def riemannian_adam_step(state: OptimizerState, params: dict[str, np.ndarray],
                         grads: dict[str, np.ndarray], c: float = 1.0) -> None:
    """One Adam step, updating ``params`` in place.

    Moments live in Euclidean coordinates.  For manifold parameters (rows are
    ball points) the normalized direction is rescaled by the inverse squared
    conformal factor and applied through the exponential map at the point,
    followed by the safe-ball projection.
    """
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1**t
    bc2 = 1 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m1:
            state.m1[name] = np.zeros_like(p)
            state.m2[name] = np.zeros_like(p)
        m1, m2 = state.m1[name], state.m2[name]
        m1 *= state.beta1
        m1 += (1 - state.beta1) * g
        m2 *= state.beta2
        m2 += (1 - state.beta2) * g * g
        direction = (m1 / bc1) / (np.sqrt(m2 / bc2) + state.eps)
        if name in state.manifold:
            scale = (1 - c * np.sum(p * p, axis=-1, keepdims=True)) ** 2 / 4
            p[...] = geo.project_to_safe_ball(geo.exp_map(p, -state.lr * scale * direction, c), c)
        else:
            p -= state.lr * direction


def make_optimizer(lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(lr, beta1, beta2, eps, frozenset({"codebook"}))


# --------------------------------------------------------------------------- training loop

@dataclass
class TrainConfig:
    dim: int = 16
    K: int = 6
    M: int = 32
    c: float = 1.0
    epochs: int = 50
    batch_size: int = 16
    lr: float = 5e-3
    lam_cost: float = 0.1
    lam_len: float = 0.01
    beta_commit: float = 0.25
    tau: float = 0.5
    gate_bias: float = 0.0
    pinned_gates: bool = False
    max_tangent: Optional[float] = None
    straight_through: str = "encoder"
    lr_schedule: str = "cosine"  # or "constant"
    kmeans_iters: int = 20
    reset_dead_codes: bool = True
    reset_until: float = 0.5  # fraction of epochs during which dead codes are re-seeded
    check_safety: bool = False
    seed: int = 0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lam_cost, self.lam_len, self.beta_commit)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        if min(self.dim, self.K, self.M, self.epochs, self.batch_size, self.kmeans_iters) < 1:
            raise ValueError("sizes, epochs and batch size must be positive")
        if not (self.c > 0 and self.lr > 0 and 0 < self.tau < 1):
            raise ValueError("need c > 0, lr > 0 and 0 < tau < 1")
        if not 0 <= self.reset_until <= 1:
            raise ValueError("reset_until must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.straight_through not in ST_MODES:
            raise ValueError(f"straight_through must be one of {ST_MODES}")
        self.weights  # validates loss weights


def scheduled_lr(config: TrainConfig, step: int, total: int) -> float:
    """Constant, or cosine decay from ``lr`` to zero over ``total`` steps."""
    if config.lr_schedule == "constant":
        return config.lr
    return 0.5 * config.lr * (1.0 + math.cos(math.pi * step / total))


@dataclass
class TrainResult:
    model: HARQModel
    history: list[LossBreakdown]
    config: TrainConfig

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: list[LossBreakdown]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "recon", "quant", "cost", "len", "total"])
    for epoch, row in enumerate(history, start=1):
        writer.writerow([epoch] + [f"{v:.17g}" for v in row.as_row()])
    return buf.getvalue()


def init_codebook(model: HARQModel, features: np.ndarray, rng: np.random.Generator,
                  iters: int = 20) -> None:
    """k-means in the origin tangent space for layer 0, sampled residuals deeper down."""
    c, K, M = model.c, model.K, model.M
    E = model.codebook.vectors
    z = encode(features, model.enc, c, model.max_tangent)
    u = geo.log_map_origin(z, c)
    n_clusters = min(M, len(u))
    centroids, _ = kmeans2(u, n_clusters, iter=iters, minit="++", seed=rng)
    if n_clusters < M:
        extra = u[rng.integers(len(u), size=M - n_clusters)]
        centroids = np.vstack([centroids, extra + 1e-3 * rng.standard_normal(extra.shape)])
    E[0] = geo.project_to_safe_ball(geo.exp_map_origin(centroids, c), c)
    r = z
    for l in range(K):
        if l > 0:
            pick = r[rng.integers(len(r), size=M)]
            jitter = geo.exp_map_origin(1e-3 * rng.standard_normal(pick.shape), c)
            E[l] = geo.project_to_safe_ball(geo.mobius_add(pick, jitter, c), c)
        dist = geo.hyp_distance(r[:, None, :], E[l][None], c)
        e = E[l][np.argmin(dist, axis=1)]
        r = geo.project_to_safe_ball(geo.mobius_add(-e, r, c), c)


def reset_dead_codes(model: HARQModel, usage: np.ndarray, residuals: np.ndarray,
                     state: OptimizerState, rng: np.random.Generator) -> int:
    """Re-seed codes unused for an epoch from residuals of the last batch.

    ``residuals`` is (B, K, d): the residual entering each layer.
    """
    E = model.codebook.vectors
    dead = np.argwhere(usage == 0)
    for l, j in dead:
        E[l, j] = residuals[rng.integers(len(residuals)), l]
        if "codebook" in state.m1:
            state.m1["codebook"][l, j] = 0
            state.m2["codebook"][l, j] = 0
    return len(dead)


def train(features: np.ndarray, targets: np.ndarray, config: TrainConfig,
          model: Optional[HARQModel] = None) -> TrainResult:
    """Minibatch training; ``targets`` holds the (N, K) prefix masks from length allocation."""
    config.validate()
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    N = len(features)
    if not np.all(np.isfinite(features)):
        raise ValueError("features contain NaN or Inf")
    if targets.shape != (N, config.K):
        raise ValueError(f"targets must have shape ({N}, {config.K})")
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = HARQModel.init(features.shape[1], config.dim, config.K, config.M, config.c,
                               seed=config.seed, gate_bias=config.gate_bias,
                               pinned_gates=config.pinned_gates,
                               max_tangent=config.max_tangent)
        init_codebook(model, features, rng, config.kmeans_iters)
    weights = config.weights
    params = model.parameters()
    state = make_optimizer(config.lr)
    n_batches = -(-N // config.batch_size)
    history = []
    for epoch in range(config.epochs):
        usage = np.zeros((config.K, config.M), dtype=np.int64)
        order = rng.permutation(N)
        sums = np.zeros(4)
        last_residuals = None
        for b, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start:start + config.batch_size]
            trace = forward(model, features[idx], straight_through=config.straight_through)
            parts = item_losses(trace, targets[idx], weights, model.c)
            batch_total = LossBreakdown.combine(*(parts[k].mean() for k in parts), weights).total
            if not np.isfinite(batch_total):
                raise TrainingError(f"loss diverged at epoch {epoch + 1}, batch {b}")
            sums += [parts[k].sum() for k in ("recon", "quant", "cost", "len")]
            np.add.at(usage, (np.broadcast_to(np.arange(config.K), trace.codes.shape),
                              trace.codes), 1)
            try:
                grads = backward(model, trace, targets[idx], weights)
            except TrainingError as err:
                raise TrainingError(f"epoch {epoch + 1}, batch {b}: {err}") from None
            state.lr = scheduled_lr(config, epoch * n_batches + b, config.epochs * n_batches)
            riemannian_adam_step(state, params, grads, model.c)
            if config.check_safety and not model.codebook.is_safe():
                raise TrainingError(f"codebook left the safe ball at epoch {epoch + 1}, batch {b}")
            last_residuals = trace.residuals[:, :-1]
        if config.reset_dead_codes and epoch + 1 < config.reset_until * config.epochs:
            n_dead = reset_dead_codes(model, usage, last_residuals, state, rng)
            if n_dead:
                log.debug("epoch %d: re-seeded %d dead codes", epoch + 1, n_dead)
        history.append(LossBreakdown.combine(*(sums / N), weights))
        log.info("epoch %d total %.6f", epoch + 1, history[-1].total)
    return TrainResult(model, history, config)


# --------------------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "varlenrec-harq/1"


def save_checkpoint(path, model: HARQModel, config: Optional[TrainConfig] = None) -> None:
    arrays = {f"param:{k}": v for k, v in model.parameters().items()}
    meta = dict(format=CHECKPOINT_FORMAT, c=model.c, pinned_gates=model.pinned_gates,
                max_tangent=model.max_tangent,
                enc_layers=len(model.enc.weights), gate_layers=len(model.gate.weights),
                dec_layers=len(model.dec.weights),
                config=asdict(config) if config is not None else None)
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[HARQModel, Optional[TrainConfig]]:
    from .harq import MLP

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")

        def mlp(prefix, n):
            return MLP([data[f"param:{prefix}.W{i}"] for i in range(n)],
                       [data[f"param:{prefix}.b{i}"] for i in range(n)])

        model = HARQModel(mlp("enc", meta["enc_layers"]), mlp("gate", meta["gate_layers"]),
                          mlp("dec", meta["dec_layers"]),
                          Codebook(data["param:codebook"], meta["c"]), meta["pinned_gates"],
                          meta.get("max_tangent"))
    cfg = TrainConfig.from_dict(meta["config"]) if meta["config"] is not None else None
    return model, cfg
