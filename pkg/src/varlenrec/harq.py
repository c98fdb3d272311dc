"""Hyperbolic adaptive residual quantization: encoder, quantizer, gates, decoder.

Shapes used throughout: ``B`` items per batch, ``F`` feature dim, ``d``
manifold dim, ``K`` quantization layers, ``M`` codes per layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry as geo

_ACTIVATIONS = ("relu", "identity")
ST_MODES = ("encoder", "residual", "off")


class MLP:
    """Dense network with ReLU hidden layers and a linear output layer."""

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray],
                 activations: Optional[list[str]] = None):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        for w0, w1 in zip(weights[:-1], weights[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError("consecutive layer widths do not match")
        if activations is None:
            activations = ["relu"] * (len(weights) - 1)
        if len(activations) != len(weights) - 1 or any(a not in _ACTIVATIONS for a in activations):
            raise ValueError(f"activations must be {len(weights) - 1} of {_ACTIVATIONS}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)

    @classmethod
    def init(cls, sizes: list[int], rng: np.random.Generator, out_scale: float = 1.0,
             out_bias: float = 0.0) -> "MLP":
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            std = np.sqrt(2.0 / n_in)
            if i == len(sizes) - 2:
                std = out_scale / np.sqrt(n_in)
            weights.append(rng.normal(0.0, std, size=(n_in, n_out)))
            biases.append(np.full(n_out, out_bias if i == len(sizes) - 2 else 0.0))
        return cls(weights, biases)

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[-1]}")
        inputs = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            h = h @ w + b
            if i < len(self.activations) and self.activations[i] == "relu":
                h = np.maximum(h, 0.0)
        return h, inputs

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, inputs: list[np.ndarray], g: np.ndarray) -> tuple[np.ndarray, list, list]:
        gw = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in reversed(range(len(self.weights))):
            gw[i] = inputs[i].T @ g
            gb[i] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if i > 0 and self.activations[i - 1] == "relu":
                g = g * (inputs[i] > 0)
        return g, gw, gb

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   list(self.activations))


@dataclass
class Codebook:
    """``K`` layers of ``M`` code vectors on the ball; ``vectors`` is (K, M, d)."""

    vectors: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3:
            raise ValueError("codebook must be a (K, M, d) array")
        if self.K < 1 or self.M < 1:
            raise ValueError("codebook needs K >= 1 and M >= 1")
        geo._check_c(self.c)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def M(self) -> int:
        return self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]

    def max_norm(self) -> float:
        return float(np.linalg.norm(self.vectors, axis=-1).max())

    def is_safe(self, eps: float = geo.SAFE_EPS) -> bool:
        return self.max_norm() <= geo.ball_radius(self.c) - eps + 1e-15


@dataclass
class HARQModel:
    enc: MLP
    gate: MLP
    dec: MLP
    codebook: Codebook
    pinned_gates: bool = False  # gate-free ablation: every retention probability is 1
    max_tangent: Optional[float] = None  # clip radius for encoder outputs before exp0

    @property
    def c(self) -> float:
        return self.codebook.c

    @property
    def K(self) -> int:
        return self.codebook.K

    @property
    def M(self) -> int:
        return self.codebook.M

    @classmethod
    def init(cls, n_features: int, dim: int, K: int, M: int, c: float = 1.0, seed: int = 0,
             enc_hidden: int = 128, gate_hidden: int = 64, dec_hidden: int = 128,
             gate_bias: float = 0.0, pinned_gates: bool = False,
             max_tangent: Optional[float] = None) -> "HARQModel":
        rng = np.random.default_rng(seed)
        enc = MLP.init([n_features, enc_hidden, dim], rng, out_scale=0.5)
        gate = MLP.init([2 * dim, gate_hidden, 1], rng, out_scale=0.1, out_bias=gate_bias)
        dec = MLP.init([dim, dec_hidden, n_features], rng)
        radius = 0.5 * geo.ball_radius(c)
        codes = geo.exp_map_origin(rng.normal(0.0, radius / np.sqrt(dim), size=(K, M, dim)), c)
        return cls(enc, gate, dec, Codebook(codes, c), pinned_gates, max_tangent)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        params.update(self.enc.parameters("enc"))
        params.update(self.gate.parameters("gate"))
        params.update(self.dec.parameters("dec"))
        params["codebook"] = self.codebook.vectors
        return params

    def copy(self) -> "HARQModel":
        return HARQModel(self.enc.copy(), self.gate.copy(), self.dec.copy(),
                         Codebook(self.codebook.vectors.copy(), self.codebook.c), self.pinned_gates,
                         self.max_tangent)


@dataclass
class ForwardTrace:
    """Everything one batched forward pass produced.

    ``residuals[:, l]`` is the residual entering layer ``l`` (so index 0 is
    the encoded point and index K the final leftover).  ``codes``, ``alphas``
    and ``masks`` are (B, K).
    """

    x: np.ndarray
    z0: np.ndarray
    codes: np.ndarray
    residuals: np.ndarray
    alphas: np.ndarray
    masks: np.ndarray
    x_hat: np.ndarray
    code_vectors: np.ndarray  # (B, K, d) selected codes
    tangent_anchor: np.ndarray  # (B, K, d) stop-gradient copy of the bridged tangent vector
    straight_through: str
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    @property
    def decoded_point(self) -> np.ndarray:
        """Accumulated ball point fed (through log0) to the decoder."""
        return self.cache["acc"][:, -1]


def clip_tangent(v: np.ndarray, radius: Optional[float]) -> np.ndarray:
    """Shrink rows longer than ``radius`` onto the sphere of that radius."""
    if radius is None:
        return v
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * np.minimum(1.0, radius / np.maximum(n, 1e-300))


def clip_tangent_vjp(v: np.ndarray, radius: Optional[float], g: np.ndarray) -> np.ndarray:
    if radius is None:
        return g
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    out = n > radius
    u = v / np.maximum(n, 1e-300)
    radial = np.sum(u * g, axis=-1, keepdims=True) * u
    return np.where(out, radius / np.maximum(n, 1e-300) * (g - radial), g)


def encode(x: np.ndarray, enc: MLP, c: float = 1.0, max_tangent: Optional[float] = None) -> np.ndarray:
    h = clip_tangent(enc(np.atleast_2d(np.asarray(x, dtype=np.float64))), max_tangent)
    return geo.project_to_safe_ball(geo.exp_map_origin(h, c), c)


def nearest_code(r: np.ndarray, layer: np.ndarray, c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Index and vector of the hyperbolically closest code (lowest index on ties).

    ``r`` is (d,) or (B, d); ``layer`` is (M, d).
    """
    layer = np.asarray(layer, dtype=np.float64)
    if layer.shape[0] == 0:
        raise ValueError("empty codebook layer")
    r = np.asarray(r, dtype=np.float64)
    dist = geo.hyp_distance(r[..., None, :], layer, c)
    idx = np.argmin(dist, axis=-1)
    return idx, layer[idx]


def residual_step(r_prev: np.ndarray, e_sel: np.ndarray, c: float = 1.0) -> np.ndarray:
    return geo.project_to_safe_ball(geo.mobius_add(geo.mobius_neg(e_sel), r_prev, c), c)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def gate_probability(r_prev: np.ndarray, e_sel: np.ndarray, gate: MLP, c: float = 1.0) -> np.ndarray:
    feats = np.concatenate([geo.log_map_origin(r_prev, c), geo.log_map_origin(e_sel, c)], axis=-1)
    return _sigmoid(gate(np.atleast_2d(feats))[..., 0])


def forward(model: HARQModel, x: np.ndarray, codes: Optional[np.ndarray] = None,
            tangent_anchor: Optional[np.ndarray] = None,
            straight_through: str = "encoder") -> ForwardTrace:
    """Full HARQ pass over a batch.

    ``codes`` forces the per-layer selections and ``tangent_anchor`` supplies
    frozen stop-gradient values; both exist so finite-difference checks can
    hold the non-differentiable pieces fixed.

    The decoder sees ``exp0(m * (log0(e) + b - sg[b]))``, equal in value to
    the scaled code, where the bridge ``b`` decides where the code's gradient
    is copied across the argmin:

    ``"encoder"``
        ``b = log0(z0)`` on the first layer only, so the encoded point
        receives the decoder gradient once, as in single-bridge VQ-VAE.
    ``"residual"``
        ``b = log0(r_prev)``; every layer copies its gradient onto its input
        residual, so the encoder sees up to K copies.
    ``"off"``
        no bridge; the encoder learns only from the commitment and gate terms.
    """
    c = model.c
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B, K, d = x.shape[0], model.K, model.codebook.dim
    E = model.codebook.vectors

    h, enc_cache = model.enc.forward(x)
    z0_raw = geo.exp_map_origin(clip_tangent(h, model.max_tangent), c)
    z0 = geo.project_to_safe_ball(z0_raw, c)

    residuals = np.empty((B, K + 1, d))
    residual_raw = np.empty((B, K, d))
    residuals[:, 0] = z0
    idx = np.empty((B, K), dtype=np.int64)
    code_vectors = np.empty((B, K, d))
    if straight_through not in ST_MODES:
        raise ValueError(f"straight_through must be one of {ST_MODES}")
    u_r = np.empty((B, K, d))
    u_e = np.empty((B, K, d))
    logits = np.empty((B, K))
    gate_caches = []
    for l in range(K):
        r_prev = residuals[:, l]
        if codes is None:
            idx[:, l], e = nearest_code(r_prev, E[l], c)
        else:
            idx[:, l] = codes[:, l]
            e = E[l, idx[:, l]]
        code_vectors[:, l] = e
        u_r[:, l] = geo.log_map_origin(r_prev, c)
        u_e[:, l] = geo.log_map_origin(e, c)
        if not model.pinned_gates:
            out, gcache = model.gate.forward(np.concatenate([u_r[:, l], u_e[:, l]], axis=-1))
            logits[:, l] = out[:, 0]
            gate_caches.append(gcache)
        residual_raw[:, l] = geo.mobius_add(-e, r_prev, c)
        residuals[:, l + 1] = geo.project_to_safe_ball(residual_raw[:, l], c)

    alphas = np.ones((B, K)) if model.pinned_gates else _sigmoid(logits)
    masks = np.cumprod(alphas, axis=1)

    bridge = u_r.copy()
    if straight_through != "residual":
        bridge[:, 1:] = 0.0
    if tangent_anchor is None:
        tangent_anchor = bridge.copy()
    direction = u_e if straight_through == "off" else u_e + (bridge - tangent_anchor)
    w = masks[..., None] * direction
    scaled = geo.exp_map_origin(w, c)
    acc = np.zeros((B, K + 1, d))
    for l in range(K):
        acc[:, l + 1] = geo.mobius_add(acc[:, l], scaled[:, l], c)
    y = geo.log_map_origin(acc[:, K], c)
    x_hat, dec_cache = model.dec.forward(y)

    cache = dict(h=h, z0_raw=z0_raw, enc=enc_cache, gate=gate_caches, residual_raw=residual_raw,
                 u_r=u_r, u_e=u_e, direction=direction, w=w, scaled=scaled, acc=acc, y=y,
                 dec=dec_cache)
    return ForwardTrace(x, z0, idx, residuals, alphas, masks, x_hat, code_vectors,
                        tangent_anchor, straight_through, cache)


def discretize_length(masks: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Number of leading layers whose cumulative mask stays >= tau, floored at 1.

    Accepts a single mask vector or a (B, K) batch.
    """
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    masks = np.asarray(masks, dtype=np.float64)
    keep = np.cumprod(masks >= tau, axis=-1)
    return np.maximum(keep.sum(axis=-1), 1).astype(np.int64)


def gate_length(alphas: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Per-gate rule: keep layers while each individual alpha >= tau (floored at 1)."""
    alphas = np.asarray(alphas, dtype=np.float64)
    keep = np.cumprod(alphas >= tau, axis=-1)
    return np.maximum(keep.sum(axis=-1), 1).astype(np.int64)
