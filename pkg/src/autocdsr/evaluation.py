"""Ranking metrics, per-domain evaluation and the analysis reports."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .data import Catalog, Example
from .pareto import StepRecord

DEFAULT_KS = (5, 10, 20)


class Scorer(Protocol):
    def __call__(self, examples: Sequence[Example], candidates: np.ndarray) -> np.ndarray: ...


# ------------------------------------------------------------------ metrics


def _rank(ranked: Sequence[int], target: int) -> int:
    ranked = list(ranked)
    try:
        return ranked.index(target) + 1
    except ValueError:
        raise ValueError(f"target {target} is not among the candidates") from None


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    """1 if ``target`` is within the first ``k`` of ``ranked`` else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(_rank(ranked, target) <= k)


hits_at_k = recall_at_k


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    """Single-target NDCG: ``1 / log2(rank + 1)`` inside the cut-off, else 0."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(ranked, target)
    return 1.0 / math.log2(r + 1) if r <= k else 0.0


def target_ranks(scores: np.ndarray, candidates: np.ndarray, target_col: int = 0) -> np.ndarray:
    """1-based rank of the target column in every row; ties go to the smaller item id."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    st = scores[:, target_col : target_col + 1]
    it = candidates[:, target_col : target_col + 1]
    above = (scores > st) | ((scores == st) & (candidates < it))
    return 1 + above.sum(axis=1)


def metrics_from_ranks(ranks: np.ndarray, ks: Sequence[int] = DEFAULT_KS) -> dict[str, float]:
    ranks = np.asarray(ranks)
    out = {}
    for k in ks:
        hit = ranks <= k
        out[f"recall@{k}"] = float(hit.mean()) if ranks.size else 0.0
        out[f"ndcg@{k}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean()) if ranks.size else 0.0
    return out


# --------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    per_domain: dict[str, dict[str, float]]
    counts: dict[str, int]
    num_negatives: int
    seed: int
    model_id: str = ""
    overall: dict[str, float] = field(default_factory=dict)
    ranks: np.ndarray | None = field(default=None, repr=False)
    domains: np.ndarray | None = field(default=None, repr=False)

    def macro(self, metric: str) -> float:
        """Unweighted mean of a metric over domains."""
        vals = [m[metric] for m in self.per_domain.values()]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "seed": self.seed,
            "num_negatives": self.num_negatives,
            "per_domain": self.per_domain,
            "counts": self.counts,
            "overall": self.overall,
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def write_csv(self, path: str | Path) -> None:
        rows = []
        for dom, m in sorted(self.per_domain.items()):
            for name, v in sorted(m.items()):
                rows.append([self.model_id, self.seed, dom, name, repr(v), self.counts[dom]])
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id", "seed", "domain", "metric", "value", "count"])
            w.writerows(rows)


def sample_candidates(targets: np.ndarray, num_items: int, num_negatives: int, seed: int) -> np.ndarray:
    """``(U, 1 + n)`` candidates: target first, then ``n`` distinct non-target items."""
    if num_negatives < 1:
        raise ValueError("need at least one negative")
    if num_negatives > num_items - 1:
        raise ValueError("more negatives than non-target items")
    rng = np.random.default_rng(seed)
    targets = np.asarray(targets, dtype=np.int64)
    out = np.empty((len(targets), 1 + num_negatives), dtype=np.int64)
    out[:, 0] = targets
    if num_negatives == num_items - 1:
        base = np.arange(num_items - 1)
        for u, t in enumerate(targets):
            out[u, 1:] = base + (base >= t)
        return out
    for u, t in enumerate(targets):
        draw = rng.choice(num_items - 1, size=num_negatives, replace=False)
        out[u, 1:] = draw + (draw >= t)
    return out


def evaluate(
    scorer: Scorer,
    examples: Sequence[Example],
    catalog: Catalog,
    num_negatives: int = 99,
    seed: int = 0,
    ks: Sequence[int] = DEFAULT_KS,
    model_id: str = "",
    chunk: int = 512,
    threads: int = 1,
) -> EvalReport:
    """Score each example's target against sampled negatives and aggregate per domain.

    Domains are keyed by the target item's catalog domain. With
    ``threads > 1`` the chunks are scored concurrently; ranks are written back
    by chunk offset, so the report does not depend on scheduling.
    """
    if not examples:
        raise ValueError("empty test view")
    targets = np.array([e.target for e in examples], dtype=np.int64)
    cands = sample_candidates(targets, catalog.size, num_negatives, seed)
    ranks = np.empty(len(examples), dtype=np.int64)

    def run(s: int) -> None:
        part = list(examples[s : s + chunk])
        scores = np.asarray(scorer(part, cands[s : s + chunk]))
        ranks[s : s + chunk] = target_ranks(scores, cands[s : s + chunk])

    starts = range(0, len(examples), chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    doms = catalog.domain_of(targets)
    per, counts = {}, {}
    for d in sorted(set(doms.tolist())):
        sel = doms == d
        per[str(d)] = metrics_from_ranks(ranks[sel], ks)
        counts[str(d)] = int(sel.sum())
    return EvalReport(per, counts, num_negatives, seed, model_id, metrics_from_ranks(ranks, ks), ranks, doms)


# ------------------------------------------------------------------- strata

STRATA = ("both_correct", "single_only", "cross_only", "both_wrong")


@dataclass
class StrataTable:
    counts: dict[str, int]
    mean_cross: dict[str, float]
    mean_single: dict[str, float]
    mean_cross_fraction: dict[str, float]
    k: int = 10

    def rows(self) -> list[dict]:
        return [
            {
                "stratum": s,
                "count": self.counts[s],
                "cross_domain_attention": self.mean_cross[s],
                "single_domain_attention": self.mean_single[s],
                "cross_domain_fraction": self.mean_cross_fraction[s],
            }
            for s in STRATA
        ]

    def write_csv(self, path: str | Path) -> None:
        rows = self.rows()
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"k": self.k, "strata": self.rows()}, indent=2))


def strata_assignment(single_hit: np.ndarray, cross_hit: np.ndarray) -> np.ndarray:
    """Stratum index per user, in :data:`STRATA` order."""
    single_hit = np.asarray(single_hit, dtype=bool)
    cross_hit = np.asarray(cross_hit, dtype=bool)
    return np.where(single_hit, np.where(cross_hit, 0, 1), np.where(cross_hit, 2, 3))


def strata_report(
    single_scorer: Scorer,
    cross_scorer: Scorer,
    attention_stats: Callable[[Sequence[Example]], tuple[np.ndarray, np.ndarray]],
    examples: Sequence[Example],
    catalog: Catalog,
    k: int = 10,
    num_negatives: int = 99,
    seed: int = 0,
) -> StrataTable:
    """Split users by top-``k`` correctness of a single-domain and a cross-domain model.

    ``attention_stats(examples)`` returns ``(cross_mass, total_mass)`` per
    example; single-domain mass is the complement ``total - cross``.
    """
    rep_s = evaluate(single_scorer, examples, catalog, num_negatives, seed, ks=(k,))
    rep_c = evaluate(cross_scorer, examples, catalog, num_negatives, seed, ks=(k,))
    strata = strata_assignment(rep_s.ranks <= k, rep_c.ranks <= k)
    cross, total = attention_stats(examples)
    cross, total = np.asarray(cross), np.asarray(total)
    single = total - cross
    counts, mc, ms, mf = {}, {}, {}, {}
    for i, name in enumerate(STRATA):
        sel = strata == i
        counts[name] = int(sel.sum())
        mc[name] = float(cross[sel].mean()) if sel.any() else float("nan")
        ms[name] = float(single[sel].mean()) if sel.any() else float("nan")
        frac = np.divide(cross[sel], total[sel], out=np.zeros(int(sel.sum())), where=total[sel] > 0)
        mf[name] = float(frac.mean()) if sel.any() else float("nan")
    return StrataTable(counts, mc, ms, mf, k)


# -------------------------------------------------------- weight trajectory


@dataclass
class TrajectoryReport:
    summary: dict[float, float]  # corruption rate -> mean alpha2 over final 20% (seed mean)
    per_run: dict[tuple[float, int], float]
    rows: list[dict]  # long format: rate, seed, step, alpha2, alpha2_smooth

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["rate", "seed", "step", "alpha2", "alpha2_smooth"])
            w.writeheader()
            w.writerows(self.rows)

    def write_summary_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rate", "mean_final_alpha2"])
            for r, v in sorted(self.summary.items()):
                w.writerow([r, repr(v)])


def smooth(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average; the first entries average over what is available."""
    x = np.asarray(x, dtype=np.float64)
    if window <= 1 or x.size == 0:
        return x.copy()
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def final_mean(values: Sequence[float], fraction: float = 0.2) -> float:
    v = np.asarray(values, dtype=np.float64)
    n = max(1, int(math.ceil(fraction * v.size)))
    return float(v[-n:].mean())


def weight_trajectory_report(
    logs: Mapping[float, Sequence[Sequence[StepRecord]]], window: int = 20, fraction: float = 0.2
) -> TrajectoryReport:
    """Smoothed ``alpha2`` per run and the final-``fraction`` mean per corruption rate.

    ``logs`` maps a corruption rate to one step-record list per seed.
    """
    if not logs or any(len(v) == 0 for v in logs.values()):
        raise ValueError("missing training logs")
    rows, per_run, summary = [], {}, {}
    for rate in sorted(logs):
        finals = []
        for seed, recs in enumerate(logs[rate]):
            if not recs:
                raise ValueError(f"empty log for rate {rate}, run {seed}")
            a2 = np.array([r.alpha2 for r in recs])
            sm = smooth(a2, window)
            for r, a, s in zip(recs, a2, sm):
                rows.append({"rate": rate, "seed": seed, "step": r.step, "alpha2": repr(float(a)), "alpha2_smooth": repr(float(s))})
            per_run[(rate, seed)] = final_mean(a2, fraction)
            finals.append(per_run[(rate, seed)])
        summary[rate] = float(np.mean(finals))
    return TrajectoryReport(summary, per_run, rows)


# ----------------------------------------------------------------- overhead


def time_steps(step: Callable[[int], object], steps: int = 200, warmup: int = 20) -> float:
    """Iterations per second of ``step(i)`` over ``steps`` calls after ``warmup`` calls."""
    if steps < 200:
        raise ValueError("overhead timing needs at least 200 timed steps")
    for i in range(warmup):
        step(i)
    t0 = time.perf_counter()
    for i in range(steps):
        step(warmup + i)
    return steps / (time.perf_counter() - t0)


@dataclass
class OverheadRow:
    name: str
    iterations_per_second: float
    throughput_drop_percent: float  # (base_rate - rate) / base_rate
    time_overhead_percent: float  # extra wall-clock time per iteration


def overhead_report(rates: Mapping[str, float], base: str) -> list[OverheadRow]:
    """Slowdown of every configuration relative to ``base``.

    Two views of the same measurement: the drop in iterations per second
    and the extra time per iteration, both in percent.
    """
    if base not in rates:
        raise ValueError(f"base configuration {base!r} missing")
    b = rates[base]
    return [OverheadRow(k, v, (1.0 - v / b) * 100.0, (b / v - 1.0) * 100.0) for k, v in rates.items()]


def write_overhead_csv(path: str | Path, rows: Sequence[OverheadRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["configuration", "iterations_per_second", "throughput_drop_percent", "time_overhead_percent"])
        for r in rows:
            w.writerow([r.name, repr(r.iterations_per_second), repr(r.throughput_drop_percent), repr(r.time_overhead_percent)])
