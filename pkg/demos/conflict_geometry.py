"""
Gradient conflict under five aggregators
========================================

Two tasks whose gradients point 135 degrees apart. Each aggregator turns them
into one direction; we look at how that direction sits relative to each task.
"""

import numpy as np

from aptmtl import TaskGradients, aggregate, projection_profile, similarity_profile

angle = np.deg2rad(135)
g = np.array([[1.0, 0.0], [3.0 * np.cos(angle), 3.0 * np.sin(angle)]])  # task 2 is 3x stronger
tg = TaskGradients.from_vectors(g)
print("cos(g1, g2) =", round(float(g[0] @ g[1] / np.linalg.norm(g[0]) / np.linalg.norm(g[1])), 4))

# %%
# The plain mean follows the stronger task and pushes the weaker one uphill
# ("mixed": one projection is negative). PCGrad and MGDA keep both projections
# positive. With c = 0.4 CAGrad only partly corrects a conflict this strong.

print(f"{'method':8s} {'combined':>20s} {'cos to tasks':>18s} {'proj ratio':>11s}")
for method in ("ls", "pcgrad", "mgda", "cagrad", "ldp"):
    res = aggregate(method, tg)
    cos = similarity_profile(res.combined, tg)
    prof = projection_profile(res.combined, tg)
    ratio = "mixed" if prof.sign_mixed else f"{prof.ratio:.3f}"
    print(f"{method:8s} {np.array2string(res.combined, precision=3):>20s} "
          f"{np.array2string(cos, precision=3):>18s} {ratio:>11s}")

# %%
# MGDA returns the smallest vector in the convex hull of the gradients. Here
# the hull does not contain the origin, so it is a common descent direction
# for both tasks, just a short one.

res = aggregate("mgda", tg)
print("\nMGDA weights", res.weights.round(4), "norm", round(float(np.linalg.norm(res.combined)), 4))
