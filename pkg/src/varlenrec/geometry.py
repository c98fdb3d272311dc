"""Poincaré-ball primitives with hand-derived vector-Jacobian products.

Every function operates on the last axis of its array arguments and broadcasts
over the leading ones, so a batch of points is an ``(..., d)`` array.  The
curvature magnitude ``c`` is a positive scalar; the ball has radius
``1/sqrt(c)``.

The ``*_vjp`` functions take the upstream gradient ``g`` of a scalar loss with
respect to the operation's output and return the gradients with respect to the
inputs.  They are what the HARQ backward pass is built from.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

#: Radial safety margin from the ball boundary (Riemannian optimizer default).
SAFE_EPS = 1e-5
#: Below this value of sqrt(c)*||v|| the maps switch to their Taylor series.
_SERIES_T = 1e-2
#: arctanh argument clamp.
_ATANH_MAX = 1.0 - 1e-15


def _check_c(c: float) -> float:
    c = float(c)
    if not c > 0 or not math.isfinite(c):
        raise ValueError(f"curvature must be positive and finite, got {c}")
    return c


def _check_pair(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1, keepdims=True)


def ball_radius(c: float) -> float:
    return 1.0 / math.sqrt(_check_c(c))


# ---------------------------------------------------------------------------
# Möbius arithmetic
# ---------------------------------------------------------------------------


def mobius_add(x, y, c: float = 1.0) -> np.ndarray:
    """Möbius addition ``x ⊕_c y``."""
    c = _check_c(c)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    xy = _dot(x, y)
    x2 = _dot(x, x)
    y2 = _dot(y, y)
    num = (1 + 2 * c * xy + c * y2) * x + (1 - c * x2) * y
    den = 1 + 2 * c * xy + c * c * x2 * y2
    return num / den


def mobius_add_vjp(x, y, g, c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    c = _check_c(c)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xy = _dot(x, y)
    x2 = _dot(x, x)
    y2 = _dot(y, y)
    a = 1 + 2 * c * xy + c * y2
    b = 1 - c * x2
    den = 1 + 2 * c * xy + c * c * x2 * y2
    out = (a * x + b * y) / den
    g_num = g / den
    g_den = -_dot(g, out) / den
    g_a = _dot(g_num, x)
    g_b = _dot(g_num, y)
    gx = (
        a * g_num
        + g_a * (2 * c * y)
        - g_b * (2 * c * x)
        + g_den * (2 * c * y + 2 * c * c * y2 * x)
    )
    gy = (
        b * g_num
        + g_a * (2 * c * x + 2 * c * y)
        + g_den * (2 * c * x + 2 * c * c * x2 * y)
    )
    return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def mobius_neg(x) -> np.ndarray:
    return -np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(extra))) if extra > 0 else g
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


# ---------------------------------------------------------------------------
# Distance
# ---------------------------------------------------------------------------


def hyp_distance(x, y, c: float = 1.0) -> np.ndarray:
    """Geodesic distance; returns an array with the last axis reduced."""
    c = _check_c(c)
    sc = math.sqrt(c)
    u = mobius_add(mobius_neg(x), y, c)
    n = np.linalg.norm(u, axis=-1)
    return (2.0 / sc) * np.arctanh(np.minimum(sc * n, _ATANH_MAX))


def hyp_distance_vjp(x, y, g, c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(g * hyp_distance(x, y))``.

    At ``x == y`` the distance is not differentiable; the zero subgradient is
    returned there.
    """
    c = _check_c(c)
    sc = math.sqrt(c)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = -x
    u = mobius_add(nx, y, c)
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    live = (n > 0) & (sc * n < _ATANH_MAX)
    n_safe = np.where(live, n, 0.5 / sc)  # placeholder stays off the pole
    coef = np.where(live, 2.0 / (1.0 - c * n_safe**2) / n_safe, 0.0)
    g = np.asarray(g, dtype=np.float64)[..., None]
    gu = g * coef * u
    g_nx, gy = mobius_add_vjp(nx, y, gu, c)
    return _unbroadcast(-g_nx, x.shape), _unbroadcast(gy, y.shape)


# ---------------------------------------------------------------------------
# Exponential / logarithmic maps at the origin
# ---------------------------------------------------------------------------


def _tanh_ratio(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh(t)/t and (1/t) d/dt[tanh(t)/t], stable at t -> 0.

    tanh is capped at the arctanh clamp so saturated inputs stay strictly
    inside the ball.
    """
    small = t < _SERIES_T
    ts = np.where(small, 1.0, t)
    t2 = t * t
    f = np.where(
        small,
        1 - t2 / 3 + 2 * t2**2 / 15 - 17 * t2**3 / 315,
        np.minimum(np.tanh(ts), _ATANH_MAX) / ts,
    )
    sech2 = 1.0 / np.cosh(np.minimum(ts, 350.0)) ** 2
    df = np.where(
        small,
        -2 / 3 + 8 * t2 / 15 - 102 * t2**2 / 315 + 496 * t2**3 / 2835,
        (sech2 * ts - np.tanh(ts)) / ts**3,
    )
    return f, df


def _atanh_ratio(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """arctanh(t)/t and (1/t) d/dt[arctanh(t)/t], stable at t -> 0."""
    small = t < _SERIES_T
    ts = np.where(small, 0.5, t)
    t2 = t * t
    f = np.where(
        small,
        1 + t2 / 3 + t2**2 / 5 + t2**3 / 7 + t2**4 / 9,
        np.arctanh(ts) / ts,
    )
    df = np.where(
        small,
        2 / 3 + 4 * t2 / 5 + 6 * t2**2 / 7 + 8 * t2**3 / 9,
        (ts / (1 - ts * ts) - np.arctanh(ts)) / ts**3,
    )
    return f, df


def exp_map_origin(v, c: float = 1.0) -> np.ndarray:
    """Map tangent vectors at the origin onto the ball."""
    c = _check_c(c)
    sc = math.sqrt(c)
    v = np.asarray(v, dtype=np.float64)
    t = sc * np.linalg.norm(v, axis=-1, keepdims=True)
    f, _ = _tanh_ratio(t)
    return f * v


def exp_map_origin_vjp(v, g, c: float = 1.0) -> np.ndarray:
    c = _check_c(c)
    sc = math.sqrt(c)
    v = np.asarray(v, dtype=np.float64)
    t = sc * np.linalg.norm(v, axis=-1, keepdims=True)
    f, df = _tanh_ratio(t)
    # d f(sc*|v|)/dv = c * df * v
    return f * g + c * df * _dot(g, v) * v


def log_map_origin(x, c: float = 1.0) -> np.ndarray:
    """Map ball points back to the tangent space at the origin."""
    c = _check_c(c)
    sc = math.sqrt(c)
    x = np.asarray(x, dtype=np.float64)
    t = np.minimum(sc * np.linalg.norm(x, axis=-1, keepdims=True), _ATANH_MAX)
    f, _ = _atanh_ratio(t)
    return f * x


def log_map_origin_vjp(x, g, c: float = 1.0) -> np.ndarray:
    c = _check_c(c)
    sc = math.sqrt(c)
    x = np.asarray(x, dtype=np.float64)
    t = np.minimum(sc * np.linalg.norm(x, axis=-1, keepdims=True), _ATANH_MAX)
    f, df = _atanh_ratio(t)
    return f * g + c * df * _dot(g, x) * x


def hyp_scale(s, x, c: float = 1.0) -> np.ndarray:
    """Hyperbolic scalar multiplication ``exp0(s * log0(x))`` for ``s`` in [0, 1].

    ``s`` broadcasts against the leading axes of ``x``.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0) or np.any(s > 1):
        raise ValueError("scale factor must lie in [0, 1]")
    return exp_map_origin(s[..., None] * log_map_origin(x, c), c)


def hyp_scale_vjp(s, x, g, c: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)[..., None]
    u = log_map_origin(x, c)
    w = s * u
    gw = exp_map_origin_vjp(w, g, c)
    gs = np.sum(gw * u, axis=-1)
    gx = log_map_origin_vjp(x, s * gw, c)
    return gs, gx


# ---------------------------------------------------------------------------
# Riemannian helpers
# ---------------------------------------------------------------------------


def conformal_factor(x, c: float = 1.0) -> np.ndarray:
    c = _check_c(c)
    x = np.asarray(x, dtype=np.float64)
    return 2.0 / (1.0 - c * np.sum(x * x, axis=-1))


def exp_map(x, v, c: float = 1.0) -> np.ndarray:
    """Exponential map at an arbitrary base point ``x``."""
    c = _check_c(c)
    sc = math.sqrt(c)
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_pair(x, v)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    lam = conformal_factor(x, c)[..., None]
    nz = nv > 1e-15
    nv_safe = np.where(nz, nv, 1.0)
    step = np.where(nz, np.tanh(sc * lam * nv_safe / 2) * v / (sc * nv_safe), 0.0)
    return mobius_add(x, step, c)


def project_to_safe_ball(x, c: float = 1.0, eps: float = SAFE_EPS) -> np.ndarray:
    """Radially pull points with norm >= 1/sqrt(c) - eps back to that norm."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    limit = ball_radius(c) - eps
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    over = n >= limit
    return np.where(over, x * (limit / np.where(over, n, 1.0)), x)


def project_to_safe_ball_vjp(x, g, c: float = 1.0, eps: float = SAFE_EPS) -> np.ndarray:
    limit = ball_radius(c) - eps
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    over = n >= limit
    n_safe = np.where(over, n, 1.0)
    xh = x / n_safe
    tangential = (limit / n_safe) * (g - _dot(g, xh) * xh)
    return np.where(over, tangential, g)


# ---------------------------------------------------------------------------
# Capacity: hyperbolic ball volume
# ---------------------------------------------------------------------------


def sphere_area(d: int) -> float:
    """Surface area of the unit (d-1)-sphere embedded in R^d."""
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)


def adaptive_simpson(f: Callable[[float], float], a: float, b: float, tol: float,
                     max_depth: int = 60) -> float:
    """Adaptive Simpson quadrature with Richardson correction (absolute tol)."""

    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4 * fm + fb)

    fa, fb = f(a), f(b)
    m = 0.5 * (a + b)
    fm = f(m)
    whole = simpson(fa, fm, fb, a, b)
    total = 0.0
    stack = [(a, b, fa, fm, fb, whole, tol, 0)]
    while stack:
        a, b, fa, fm, fb, whole, tol, depth = stack.pop()
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        delta = left + right - whole
        if depth >= max_depth or abs(delta) <= 15 * tol:
            total += left + right + delta / 15.0
        else:
            stack.append((a, m, fa, flm, fm, left, tol / 2, depth + 1))
            stack.append((m, b, fm, frm, fb, right, tol / 2, depth + 1))
    return total


def hyp_ball_volume(r: float, d: int, c: float = 1.0, rtol: float = 1e-10) -> float:
    """Volume of a geodesic ball of radius ``r`` in the d-dimensional ball model.

    The radial integral is split into unit pieces, each integrated to relative
    tolerance ``rtol``, so the result is relatively accurate even though the
    integrand grows like exp((d-1) sqrt(c) t).
    """
    c = _check_c(c)
    if r < 0:
        raise ValueError("radius must be nonnegative")
    if d < 2:
        raise ValueError("dimension must be at least 2")
    if r == 0:
        return 0.0
    sc = math.sqrt(c)

    def integrand(t: float) -> float:
        return math.sinh(sc * t) ** (d - 1) / c ** ((d - 1) / 2)

    edges = np.linspace(0.0, r, int(math.ceil(r)) + 1)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        rough = (b - a) * max(integrand(b), integrand(0.5 * (a + b)))
        total += adaptive_simpson(integrand, a, b, rtol * max(rough, 1e-300))
    return sphere_area(d) * total


# ---------------------------------------------------------------------------
# Tree embedding
# ---------------------------------------------------------------------------


def tree_depths(parents: Sequence[int]) -> np.ndarray:
    """Depth of every node given a parent array (root marked with -1)."""
    n = len(parents)
    roots = [i for i, p in enumerate(parents) if p < 0]
    if len(roots) != 1:
        raise ValueError("tree must have exactly one root")
    children = _children(parents)
    depth = np.full(n, -1, dtype=int)
    depth[roots[0]] = 0
    order = [roots[0]]
    for u in order:
        for v in children[u]:
            if depth[v] >= 0:
                raise ValueError("parent array contains a cycle")
            depth[v] = depth[u] + 1
            order.append(v)
    if np.any(depth < 0):
        raise ValueError("tree is not connected")
    return depth


def _children(parents: Sequence[int]) -> list[list[int]]:
    children: list[list[int]] = [[] for _ in parents]
    for i, p in enumerate(parents):
        if p >= 0:
            children[p].append(i)
    return children


def tree_distances(parents: Sequence[int]) -> np.ndarray:
    """All-pairs path lengths (unit edges)."""
    depth = tree_depths(parents)
    n = len(parents)
    anc = []
    for i in range(n):
        chain = [i]
        while parents[chain[-1]] >= 0:
            chain.append(parents[chain[-1]])
        anc.append(set(chain))
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            lca_depth = max(depth[k] for k in anc[i] & anc[j])
            out[i, j] = out[j, i] = depth[i] + depth[j] - 2 * lca_depth
    return out


def balanced_tree(branching: int, depth: int) -> list[int]:
    """Parent array of a complete ``branching``-ary tree, nodes in BFS order."""
    parents = [-1]
    frontier = [0]
    for _ in range(depth):
        nxt = []
        for u in frontier:
            for _ in range(branching):
                parents.append(u)
                nxt.append(len(parents) - 1)
        frontier = nxt
    return parents


def _simplex(n: int) -> np.ndarray:
    """``n`` unit vectors in R^(n-1) with pairwise inner product -1/(n-1)."""
    centered = np.eye(n) - 1.0 / n
    _, _, vt = np.linalg.svd(centered)
    pts = centered @ vt[: n - 1].T
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _orthonormal_complement(v: np.ndarray) -> np.ndarray:
    d = v.shape[0]
    q, _ = np.linalg.qr(np.column_stack([v, np.eye(d)]))
    return q[:, 1:d]


def sarkar_embed_tree(parents: Sequence[int], c: float = 1.0, d: int = 2) -> np.ndarray:
    """Radial Sarkar-style embedding of a rooted tree with unit edges.

    A depth-k node sits at Euclidean radius tanh(sqrt(c) k)/sqrt(c), i.e. at
    hyperbolic distance exactly 2k from the origin.  The children of a node
    fan out around its ray as a regular simplex in the orthogonal complement,
    at the half-angle that makes sibling separation equal to the separation of
    the root's children; the root's children form a simplex spanning the
    whole sphere.  Larger ``c`` lengthens every edge relative to the curvature
    scale and lowers distortion.

    Returns an ``(n, d)`` array indexed like ``parents``.
    """
    c = _check_c(c)
    if d < 2:
        raise ValueError("dimension must be at least 2")
    depth = tree_depths(parents)
    children = _children(parents)
    root = int(np.argmin(depth))
    fan = max((len(ch) for i, ch in enumerate(children) if i != root), default=0)
    if len(children[root]) - 1 > d or fan > d:
        raise ValueError("dimension too small for the tree's branching")
    sc = math.sqrt(c)
    n = len(parents)
    dirs = np.zeros((n, d))
    kids = children[root]
    if len(kids) == 1:
        dirs[kids[0], 0] = 1.0
    elif kids:
        dirs[kids, : len(kids) - 1] = _simplex(len(kids))
    order = list(kids)
    for u in order:
        ch = children[u]
        order.extend(ch)
        if not ch:
            continue
        if len(ch) == 1:
            dirs[ch[0]] = dirs[u]
            continue
        k = depth[u]
        sin_phi = math.sinh(2 * sc) / math.sinh(2 * sc * (k + 1))
        cos_phi = math.sqrt(1.0 - sin_phi**2)
        perp = _orthonormal_complement(dirs[u])[:, : len(ch) - 1]
        spread = _simplex(len(ch)) @ perp.T
        dirs[ch] = cos_phi * dirs[u] + sin_phi * spread
    radius = np.tanh(sc * depth) / sc
    return radius[:, None] * dirs


def embedding_distortion(parents: Sequence[int], points: np.ndarray, c: float = 1.0) -> float:
    """max/min ratio of embedded to tree distance over all node pairs."""
    td = tree_distances(parents)
    iu = np.triu_indices(len(parents), k=1)
    emb = hyp_distance(points[iu[0]], points[iu[1]], c)
    ratio = emb / td[iu]
    return float(ratio.max() / ratio.min())
