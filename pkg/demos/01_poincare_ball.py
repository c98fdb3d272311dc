"""
A tour of the Poincare ball
===========================

Points, distances and the maps between the ball and its tangent space at
the origin.  Everything here is plain numpy.
"""

import numpy as np

from varlenrec import geometry as geo

rng = np.random.default_rng(0)

# a point's hyperbolic distance from the origin grows without bound near the rim
for r in (0.1, 0.5, 0.9, 0.99, 0.999):
    x = np.array([r, 0.0])
    print(f"|x| = {r:<6} d(0, x) = {float(geo.hyp_distance(np.zeros(2), x)):.3f}")

# Mobius addition is the ball's translation; -x (+) (x (+) y) recovers y
x, y = rng.uniform(-0.5, 0.5, size=(2, 3))
back = geo.mobius_add(-x, geo.mobius_add(x, y))
print("left cancellation error:", np.abs(back - y).max())

# translating both points leaves their distance unchanged
a = rng.uniform(-0.4, 0.4, size=3)
print("d(x, y)         =", float(geo.hyp_distance(x, y)))
print("d(a+x, a+y)     =", float(geo.hyp_distance(geo.mobius_add(a, x), geo.mobius_add(a, y))))

# exp0 wraps tangent vectors onto the ball and log0 unwraps them
v = rng.normal(size=3) * 3
print("exp0 norm of a long tangent vector:", np.linalg.norm(geo.exp_map_origin(v)))
print("round trip error:", np.abs(geo.log_map_origin(geo.exp_map_origin(v)) - v).max())

# anything that drifts outward is pulled back inside a safety margin
far = np.array([[3.0, 4.0]])
print("projected norm:", np.linalg.norm(geo.project_to_safe_ball(far)),
      "limit:", geo.ball_radius(1.0) - geo.SAFE_EPS)

# ball volume grows like exp((d - 1) r): room for exponentially many codes
for d in (3, 5):
    rs = np.linspace(6, 10, 9)
    slope = np.polyfit(rs, [np.log(geo.hyp_ball_volume(r, d)) for r in rs], 1)[0]
    print(f"d={d}: slope of log volume {slope:.3f}")

# a binary tree embeds with depth proportional to distance from the origin
parents = geo.balanced_tree(2, 4)
pts = geo.sarkar_embed_tree(parents, c=4.0, d=3)
print("tree distortion:", round(geo.embedding_distortion(parents, pts, 4.0), 4))
