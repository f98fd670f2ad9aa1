# # Reconciling two gradients
#
# A short tour of the weight solver on toy gradients: the closed-form
# two-task rule, the preference vectors, the active set and the
# Frank-Wolfe iteration used when more than one constraint is active.
# Runs in a second or two.

import numpy as np

from autocdsr.pareto import (
    SolverConfig,
    active_constraints,
    frank_wolfe_min_norm,
    min_norm_two,
    preference_vectors,
    reconcile_weights,
)

# ## Two tasks
#
# Orthogonal gradients of different length: the shorter one gets more weight,
# so that both tasks decrease by the same amount along the combined direction.

g_rec = np.array([1.0, 0.0])
g_cd = np.array([0.0, 2.0])
a1, a2 = min_norm_two(g_rec, g_cd)
d = a1 * g_rec + a2 * g_cd
print(a1, a2, d @ g_rec, d @ g_cd)

# When one gradient already points "inside" the other, the solver stops at a vertex.

print(min_norm_two(np.array([1.0, 1.0]), np.array([3.0, 3.0])))

# ## Preference vectors and the active set
#
# K = 5 splits the positive quadrant into equal angles. p_1 leans towards the
# recommendation loss. A constraint k is active when the loss vector projects
# further onto p_k than onto p_1. Losses dominated by the recommendation term
# activate p_0; a large cross-domain loss activates everything above p_1;
# in between, nothing is active and the two-task rule applies unchanged.

prefs = preference_vectors(5, chosen=1)
print(np.round(prefs.vectors, 3))
for losses in ([4.0, 0.2], [4.0, 1.5], [1.0, 3.0]):
    print(losses, active_constraints(losses, prefs))

# ## Frank-Wolfe on a face
#
# Three gradients where the min-norm point lies on an edge of the simplex.
# The plain iteration zigzags towards the face; away steps drop the third
# vertex and finish in a handful of iterations.

g = np.array([[1.0, 0.2], [-1.0, 0.2], [0.0, 3.0]])
plain = frank_wolfe_min_norm(list(g), SolverConfig(away_steps=False))
away = frank_wolfe_min_norm(list(g), SolverConfig())
for name, r in (("plain", plain), ("away", away)):
    print(name, r.iterations, r.converged, np.round(r.weights, 4), np.linalg.norm(r.weights @ g))

# ## Iteration counts
#
# How many iterations the solver needs on random gradient sets, with and
# without away steps.

rng = np.random.default_rng(0)
counts = {True: [], False: []}
for _ in range(500):
    k, dim = rng.integers(2, 6), rng.integers(2, 100)
    gs = list(rng.normal(size=(k, dim)))
    for flag in counts:
        counts[flag].append(frank_wolfe_min_norm(gs, SolverConfig(away_steps=flag)).iterations)
for flag, c in counts.items():
    c = np.array(c)
    print("away" if flag else "plain", "median", np.median(c), "p95", np.percentile(c, 95), "hit cap", np.mean(c >= 100))

# ## One training step's weights
#
# reconcile_weights ties everything together. The active set decides which
# gradients enter the Frank-Wolfe problem, so the same two gradients get
# very different weights under the two loss vectors below.

rec = reconcile_weights(g_rec, g_cd, [4.0, 0.2], prefs, SolverConfig())
print(rec)
rec = reconcile_weights(g_rec, g_cd, [1.0, 3.0], prefs, SolverConfig())
print(rec)
