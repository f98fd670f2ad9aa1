# # Static weights, corrupted labels and solver cost
#
# Three smaller studies around the adaptive weighting:
#
# 1. A sweep over fixed (alpha_rec, alpha_cd) pairs on the mixed scenario,
#    where domain 0 benefits from domain 1's history and domain 1 does not.
#    If one fixed weight is best for every domain there is little reason to
#    adapt it per step; if the best weight differs between domains, no single
#    static choice serves both. Over 5 seeds at desk scale the per-seed
#    optima vary but the mean favours (1, 0) for both domains.
# 2. The alpha2 trajectory of AutoCDSR as a growing share of training
#    labels get a wrong domain.
# 3. Per-step throughput of AutoCDSR against plain cross-domain training.
#
# The sweep dominates the runtime (grid size x seeds training runs, about
# half a minute each). AUTOCDSR_NB_SEEDS trims the seed count.

import os

import numpy as np

from autocdsr.data import synthesize
from autocdsr.experiments import DeskScale, overhead_experiment, run_method, trajectory_summary
from autocdsr.train import AUTO, NAIVE, prepare_split, sweep_static_weights

SEEDS = range(int(os.environ.get("AUTOCDSR_NB_SEEDS", "5")))
GRID = [(1.0, 0.0), (0.9, 0.1), (0.7, 0.3), (0.5, 0.5)]
# AUTOCDSR_NB_QUICK shrinks everything to a smoke run of a few seconds per model
if os.environ.get("AUTOCDSR_NB_QUICK"):
    scale = DeskScale(num_users=300, items_per_domain=200, max_steps=30, warmup_steps=5, validation_interval=10)
else:
    scale = DeskScale()

# ## 1. Static-weight sweep on the mixed scenario

per_domain = {a: {"0": [], "1": []} for a in GRID}
for seed in SEEDS:
    ds = synthesize(scale.synth_config("mixed", seed))
    tcfg = scale.train_config(NAIVE, seed, ds.catalog.size)
    for alpha, rep, _ in sweep_static_weights(tcfg, prepare_split(ds, tcfg), ds.catalog, GRID, ds.catalog.size - 1):
        for d in ("0", "1"):
            per_domain[alpha][d].append(rep.per_domain[d]["recall@10"])
    print("seed", seed, "done", flush=True)

means = {a: {d: float(np.mean(v)) for d, v in m.items()} for a, m in per_domain.items()}
for a in GRID:
    print(a, {d: round(v, 4) for d, v in means[a].items()})
best = {d: max(GRID, key=lambda a: means[a][d]) for d in ("0", "1")}
print("best weight per domain:", best, "differs:", best["0"] != best["1"])

# ## 2. alpha2 under domain-label corruption
#
# Corrupted labels make the cross-domain indicator partly wrong, so the
# penalty pulls on attention that is in fact within-domain. The solver sees
# this through the gradients and should lean less on the penalty.

outcomes = [run_method("complementary", AUTO, s, scale, corruption=r, test=False)
            for r in (0.0, 0.25, 0.5) for s in SEEDS]
rep = trajectory_summary(outcomes)
for rate, v in sorted(rep.summary.items()):
    print(f"corruption {rate:.2f}: final-20% mean alpha2 {v:.4f}")

# ## 3. Overhead
#
# Both methods see identical batches and model sizes; the difference is the
# second backward pass plus the solver.

for row in overhead_experiment(scale=scale):
    print(row)
