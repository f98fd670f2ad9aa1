"""Desk-scale experiment runners shared by the acceptance suite and the notebooks.

Every run is keyed by ``(scenario, method, seed, corruption)``; the dataset
is generated from the same seed, so methods compared under one seed see the
same users.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import SynthConfig, synthesize
from .evaluation import EvalReport, evaluate, overhead_report, time_steps, weight_trajectory_report
from .model import ModelConfig
from .train import (
    AUTO,
    NAIVE,
    SINGLE,
    SequenceRecommender,
    SingleDomainRecommender,
    TrainConfig,
    Trainer,
    TrainResult,
    domain_view,
    prepare_split,
    train,
)


@dataclass
class DeskScale:
    """Sizes and optimiser settings used for the desk-scale runs."""

    num_users: int = 2000
    items_per_domain: int = 1000
    num_domains: int = 2
    max_seq_len: int = 30
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    batch_size: int = 64
    learning_rate: float = 3e-3
    warmup_steps: int = 50
    max_steps: int = 300
    validation_interval: int = 100
    eval_k: int = 10
    full_ranking: bool = True  # test metrics rank against the whole catalog
    synth: dict = field(default_factory=dict)  # extra SynthConfig fields

    def synth_config(self, scenario: str, seed: int) -> SynthConfig:
        return SynthConfig(
            scenario=scenario,
            num_users=self.num_users,
            items_per_domain=self.items_per_domain,
            num_domains=self.num_domains,
            seed=seed,
            **self.synth,
        )

    def train_config(self, method: str, seed: int, vocab_size: int, **overrides) -> TrainConfig:
        model = ModelConfig(
            vocab_size=vocab_size,
            max_seq_len=self.max_seq_len,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            num_domains=self.num_domains,
        )
        cfg = TrainConfig(
            method=method,
            learning_rate=self.learning_rate,
            warmup_steps=self.warmup_steps,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            validation_interval=self.validation_interval,
            patience_steps=self.max_steps - self.max_steps % self.validation_interval or self.validation_interval,
            seed=seed,
            model=model,
        )
        return replace(cfg, **overrides)


@dataclass
class RunOutcome:
    scenario: str
    method: str
    seed: int
    corruption: float
    report: EvalReport | None
    results: list[TrainResult]

    @property
    def recall(self) -> float:
        return self.report.overall["recall@10"]


def run_method(
    scenario: str,
    method: str,
    seed: int,
    scale: DeskScale | None = None,
    corruption: float = 0.0,
    test: bool = True,
) -> RunOutcome:
    """Train one method on one seed and, optionally, report test metrics."""
    scale = scale or DeskScale()
    ds = synthesize(scale.synth_config(scenario, seed))
    tcfg = scale.train_config(method, seed, ds.catalog.size, corruption_rate=corruption)
    split = prepare_split(ds, tcfg)
    if method == SINGLE:
        results, models = [], {}
        for d in ds.catalog.domains:
            res = train(tcfg, domain_view(split, d), ds.catalog)
            results.append(res)
            models[d] = SequenceRecommender(res.state, domain=d)
        scorer = SingleDomainRecommender(models, ds.catalog)
    else:
        res = train(tcfg, split, ds.catalog)
        results = [res]
        scorer = SequenceRecommender(res.state)
    report = None
    if test:
        n = ds.catalog.size - 1 if scale.full_ranking else 99
        report = evaluate(scorer, split.test, ds.catalog, n, seed=seed, ks=(scale.eval_k,), model_id=f"{method}-{seed}")
    return RunOutcome(scenario, method, seed, corruption, report, results)


def mean_recall(outcomes: Sequence[RunOutcome]) -> float:
    return float(np.mean([o.recall for o in outcomes]))


def trajectory_summary(outcomes: Sequence[RunOutcome], window: int = 20):
    """Weight-trajectory report from AutoCDSR runs grouped by corruption rate."""
    logs: dict[float, list] = {}
    for o in outcomes:
        if o.method != AUTO:
            raise ValueError("trajectories need autocdsr runs")
        logs.setdefault(o.corruption, []).append(o.results[0].records)
    return weight_trajectory_report(logs, window=window)


def overhead_experiment(
    scenario: str = "complementary",
    seed: int = 0,
    scale: DeskScale | None = None,
    methods: Sequence[str] = (NAIVE, AUTO),
    steps: int = 200,
    warmup: int = 20,
):
    """Iterations per second of each method on identical batches and model size."""
    scale = scale or DeskScale()
    ds = synthesize(scale.synth_config(scenario, seed))
    rates = {}
    for m in methods:
        tcfg = scale.train_config(m, seed, ds.catalog.size, max_steps=steps + warmup)
        trainer = Trainer(tcfg, ds.catalog)
        batches = trainer.batches(prepare_split(ds, tcfg).train)
        rates[m] = time_steps(lambda _k: trainer.step(next(batches)), steps, warmup)
    return overhead_report(rates, methods[0])
