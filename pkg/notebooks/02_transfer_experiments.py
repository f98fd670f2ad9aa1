# # Negative and positive transfer at desk scale
#
# Trains the three main methods on the contradictory and complementary
# synthetic scenarios and compares test Recall@10 (full ranking over the
# 2000-item catalog). Then splits users into strata by which of the
# single-domain and cross-domain models gets them right, and looks at how
# much attention the cross-domain model spends across domains in each stratum.
#
# Each training run takes about half a minute on one core; the full script
# (5 seeds, both scenarios) takes roughly 20 minutes. Set AUTOCDSR_NB_SEEDS
# to a smaller number for a quicker look.

import os

import numpy as np

from autocdsr.data import synthesize
from autocdsr.evaluation import strata_report
from autocdsr.experiments import DeskScale, run_method
from autocdsr.train import AUTO, NAIVE, SINGLE, SequenceRecommender, SingleDomainRecommender, prepare_split

SEEDS = range(int(os.environ.get("AUTOCDSR_NB_SEEDS", "5")))
METHODS = (SINGLE, NAIVE, AUTO)
# AUTOCDSR_NB_QUICK shrinks everything to a smoke run of a few seconds per model
if os.environ.get("AUTOCDSR_NB_QUICK"):
    scale = DeskScale(num_users=300, items_per_domain=200, max_steps=30, warmup_steps=5, validation_interval=10)
else:
    scale = DeskScale()
print(scale)

# ## Recall@10 per scenario, method and seed

runs = {}
for scenario in ("contradictory", "complementary"):
    for m in METHODS:
        runs[scenario, m] = [run_method(scenario, m, s, scale) for s in SEEDS]

for scenario in ("contradictory", "complementary"):
    print(f"\n{scenario}")
    for m in METHODS:
        r = np.array([o.recall for o in runs[scenario, m]])
        print(f"  {m:20s} mean {r.mean():.4f}  sd {r.std(ddof=1) if len(r) > 1 else 0:.4f}  {np.round(r, 4)}")

# Per-domain view. In the contradictory scenario domain 1's next item does
# not depend on domain 0 at all, while domain 0 is actively misled by it.

for scenario in ("contradictory", "complementary"):
    for m in METHODS:
        per = {d: float(np.mean([o.report.per_domain[d]["recall@10"] for o in runs[scenario, m]])) for d in ("0", "1")}
        print(scenario, m, {d: round(v, 4) for d, v in per.items()})

# ## How AutoCDSR weighted the two losses
#
# alpha2 is the weight on the cross-domain attention penalty. Under the
# contradictory scenario the solver should keep pushing cross-domain
# attention down; under the complementary one it has less reason to.

for scenario in ("contradictory", "complementary"):
    finals = []
    for o in runs[scenario, AUTO]:
        a2 = np.array([r.alpha2 for r in o.results[0].records])
        finals.append(a2[-max(1, len(a2) // 5):].mean())
    print(scenario, "final-20% mean alpha2 per seed", np.round(finals, 4))

# ## Strata
#
# Rebuild the recommenders of seed 0 from the trained states and tabulate
# the four user strata on the contradictory scenario.

seed = SEEDS[0]
ds = synthesize(scale.synth_config("contradictory", seed))
tcfg = scale.train_config(NAIVE, seed, ds.catalog.size)
split = prepare_split(ds, tcfg)
single = SingleDomainRecommender(
    {d: SequenceRecommender(res.state, domain=d) for d, res in zip(ds.catalog.domains, runs["contradictory", SINGLE][0].results)},
    ds.catalog,
)
for m in (NAIVE, AUTO):
    cross = SequenceRecommender(runs["contradictory", m][0].results[0].state)
    table = strata_report(single, cross, cross.attention_stats, split.test, ds.catalog, k=10, num_negatives=99, seed=seed)
    print(f"\n{m}")
    for s in table.counts:
        print(f"  {s:12s} users {table.counts[s]:5d}  cross-domain share of attention {table.mean_cross_fraction[s]:.3f}")
