"""Training loop for the single-domain, cross-domain and Pareto-reconciled methods."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .crossdomain import (
    MASK_ID,
    PAD_DOMAIN,
    PAD_ID,
    attention_penalty,
    build_ib_batch,
    cross_domain_indicator,
    ib_indicator,
)
from .data import (
    Batch,
    Catalog,
    Dataset,
    Example,
    InteractionSequence,
    Split,
    corrupt_domains,
    leave_one_out,
    make_batches,
    truncate,
)
from .evaluation import EvalReport, evaluate
from .model import (
    MASKED,
    EncoderState,
    ModelConfig,
    encode,
    init_state,
    recommendation_loss,
    save_checkpoint,
    static_combined_loss,
)
from .pareto import (
    SolverConfig,
    StepLog,
    StepRecord,
    preference_vectors,
    reconcile_step,
)

log = logging.getLogger(__name__)

SINGLE = "single-domain"
NAIVE = "naive-cross-domain"
STATIC = "static-weight"
AUTO = "autocdsr"
AUTO_PLUS = "autocdsr-plus"
METHODS = (SINGLE, NAIVE, STATIC, AUTO, AUTO_PLUS)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    method: str = AUTO
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    warmup_steps: int = 1000
    max_steps: int = 20000
    min_lr_ratio: float = 0.0
    batch_size: int = 128
    patience_steps: int = 2000
    validation_interval: int = 500
    seed: int = 0
    eval_negatives: int = 99
    static_alpha: tuple[float, float] = (1.0, 0.0)
    domain: int | None = None  # single-domain method: which domain to train on
    cd_normalize: bool = True  # divide a_cd by the number of content positions
    cd_reduce: str = "mean"  # batch aggregation of a_cd: mean | sum
    cd_raw_scores: bool = False  # bottleneck variant: sum raw scores instead of softmax
    grad_clip: float = 5.0
    corruption_rate: float = 0.0  # fraction of training domain labels relabelled at random
    solver: SolverConfig = field(default_factory=SolverConfig)
    model: ModelConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.validation_interval < 1 or self.patience_steps % self.validation_interval:
            raise ValueError("patience_steps must be a multiple of validation_interval")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption_rate must lie in [0, 1]")
        if self.cd_reduce not in ("mean", "sum"):
            raise ValueError("cd_reduce must be 'mean' or 'sum'")
        a1, a2 = self.static_alpha
        if a1 < 0 or a2 < 0:
            raise ValueError("static weights must be non-negative")
        self.static_alpha = (float(a1), float(a2))
        if self.method == AUTO_PLUS and self.model is not None and self.model.objective != MASKED:
            raise ValueError("autocdsr-plus needs the masked objective")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["static_alpha"] = list(self.static_alpha)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        from .config import build_dataclass

        return build_dataclass(cls, doc)


# ------------------------------------------------------------- optimisation


def learning_rate_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to the peak at ``warmup_steps``, cosine decay to the floor at ``max_steps``."""
    peak, floor = cfg.learning_rate, cfg.learning_rate * cfg.min_lr_ratio
    w = cfg.warmup_steps
    if w > 0 and step < w:
        return peak * step / w
    span = max(cfg.max_steps - w, 1)
    t = min(max(step - w, 0) / span, 1.0)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * t))


class AdamW:
    """Adam with decoupled weight decay (matrices only)."""

    def __init__(self, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        out = {}
        for k, p in arrays.items():
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p - lr * upd
            if self.wd and p.ndim >= 2:
                new = new - lr * self.wd * p
            out[k] = new.astype(p.dtype, copy=False)
        return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if not math.isfinite(total):
        return grads, total
    if max_norm and total > max_norm:
        s = max_norm / total
        return {k: g * s for k, g in grads.items()}, total
    return grads, total


# ------------------------------------------------------------------ batches


@dataclass
class PreparedBatch:
    token_ids: np.ndarray
    valid: np.ndarray
    target_pos: tuple[np.ndarray, np.ndarray]
    targets: np.ndarray
    indicator: np.ndarray  # (B, L, L) mask of penalised attention entries
    content: np.ndarray  # (B,) number of content rows, for normalisation
    index: int = 0
    allowed: np.ndarray | None = None
    positions: np.ndarray | None = None
    combine: np.ndarray | None = None


def prepare_batch(batch: Batch, cfg: ModelConfig, method: str) -> PreparedBatch:
    if method != AUTO_PLUS:
        ind = cross_domain_indicator(batch.domains)
        return PreparedBatch(
            batch.token_ids,
            batch.valid,
            batch.target_pos,
            batch.targets,
            ind,
            (batch.domains >= 0).sum(axis=1),
            batch.index,
        )
    return _bottleneck_batch(batch, cfg)


def _bottleneck_batch(batch: Batch, cfg: ModelConfig) -> PreparedBatch:
    """Regroup a masked batch into per-domain blocks with bottleneck tokens."""
    tok = batch.token_ids
    B = tok.shape[0]
    per_domain, moves = [], []
    labels = batch.block_domains
    for b in range(B):
        groups: dict[int, list[int]] = {}
        for pos in np.flatnonzero(tok[b] != PAD_ID):
            groups.setdefault(int(labels[b, pos]), []).append(int(pos))
        per_domain.append({d: [int(tok[b, p]) for p in ps] for d, ps in groups.items()})
        moves.append(groups)
    ib = build_ib_batch(per_domain, cfg.ib_tokens, None, max_len=cfg.max_seq_len)
    # old (row, pos) -> new (row, pos)
    L = ib.token_ids.shape[1]
    remap = np.full(tok.shape, -1, dtype=np.int64)
    for b, (groups, layout) in enumerate(zip(moves, ib.layouts)):
        for d, start, _ in layout.blocks:
            for j, p in enumerate(groups[d]):
                remap[b, p] = start + cfg.ib_tokens + j
    rows, pos = batch.target_pos
    new_pos = remap[rows, pos]
    ind = ib_indicator(ib.layouts, L)
    # MASK rows are not items of any domain
    ind[ib.token_ids == MASK_ID] = 0.0
    content = ((ib.token_ids >= cfg.num_special)).sum(axis=1)
    return PreparedBatch(
        ib.token_ids,
        ib.valid,
        (rows, new_pos),
        batch.targets,
        ind,
        content,
        batch.index,
        allowed=ib.allowed,
        positions=ib.positions,
        combine=ib.combine,
    )


def compute_losses(state: EncoderState, pb: PreparedBatch, tcfg: TrainConfig, check_finite: bool = False):
    """Forward pass on a fresh tape; returns ``(tape, L_rec, L_cd)``."""
    with nx.Tape(check_finite=check_finite) as tape:
        out = encode(
            pb.token_ids,
            state,
            valid=pb.valid,
            allowed=pb.allowed,
            positions=pb.positions,
            combine=pb.combine,
        )
        h = nx.take(out.hidden, pb.target_pos)
        l_rec = recommendation_loss(h, pb.targets, state.params["item_emb"])
        attn = out.scores if (tcfg.cd_raw_scores and tcfg.method == AUTO_PLUS) else out.attention
        per_seq = attention_penalty(attn, pb.indicator)
        if tcfg.cd_normalize:
            per_seq = nx.mul(per_seq, 1.0 / np.maximum(pb.content, 1).astype(per_seq.dtype))
        l_cd = nx.mean_all(per_seq) if tcfg.cd_reduce == "mean" else nx.sum_all(per_seq)
    return tape, l_rec, l_cd


# -------------------------------------------------------------- recommenders


def _history_tokens(items: np.ndarray, num_special: int, max_len: int, append_mask: bool) -> np.ndarray:
    keep = max_len - 1 if append_mask else max_len
    toks = truncate(items, keep) + num_special
    if append_mask:
        toks = np.append(toks, MASK_ID)
    return toks


def _pad_rows(rows: Sequence[np.ndarray]) -> np.ndarray:
    L = max(len(r) for r in rows)
    out = np.full((len(rows), L), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _cosine_candidates(h: np.ndarray, item_emb: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    hn = h / (np.linalg.norm(h, axis=-1, keepdims=True) + 1e-12)
    en = item_emb / (np.linalg.norm(item_emb, axis=-1, keepdims=True) + 1e-12)
    return np.einsum("ur,ucr->uc", hn, en[candidates])


class SequenceRecommender:
    """Scores candidates for examples with one trained encoder.

    ``bottleneck=True`` lays histories out in per-domain blocks and reads the
    MASK appended to the target domain's block.
    """

    def __init__(self, state: EncoderState, bottleneck: bool = False, domain: int | None = None, combine: bool = True):
        self.state = state
        self.cfg = state.config
        self.bottleneck = bottleneck
        self.domain = domain
        self.use_combine = combine

    def _histories(self, examples: Sequence[Example]):
        for e in examples:
            if self.domain is None:
                yield e.history_items, e.history_domains
            else:
                keep = e.history_domains == self.domain
                yield e.history_items[keep], e.history_domains[keep]

    def forward(self, examples: Sequence[Example]):
        """Encoder outputs, the readout row index and the domain map for a chunk."""
        cfg = self.cfg
        masked = cfg.objective == MASKED
        if self.bottleneck:
            per_domain, qd = [], []
            for (items, doms), e in zip(self._histories(examples), examples):
                groups: dict[int, list[int]] = {}
                for it, d in zip(items, doms):
                    groups.setdefault(int(d), []).append(int(it))
                # leave room for the bottleneck tokens and the MASK
                room = cfg.max_seq_len - cfg.ib_tokens - 1
                per_domain.append({d: v[-room:] for d, v in groups.items()})
                qd.append(e.target_domain)
            ib = build_ib_batch(per_domain, cfg.ib_tokens, cfg.num_special, query_domain=qd, max_len=cfg.max_seq_len)
            out = encode(
                ib.token_ids,
                self.state,
                valid=ib.valid,
                allowed=ib.allowed,
                positions=ib.positions,
                combine=ib.combine if self.use_combine else None,
            )
            return out, ib.query_index, ib
        toks, dmaps = [], []
        for items, doms in self._histories(examples):
            t = _history_tokens(items, cfg.num_special, cfg.max_seq_len, masked)
            keep = len(t) - (1 if masked else 0)
            dm = truncate(doms, keep) if keep else doms[:0]
            if masked:
                dm = np.append(dm, PAD_DOMAIN)
            toks.append(t)
            dmaps.append(dm)
        ids = _pad_rows(toks)
        dmap = np.full(ids.shape, PAD_DOMAIN, dtype=np.int64)
        for i, d in enumerate(dmaps):
            dmap[i, : len(d)] = d
        out = encode(ids, self.state)
        lengths = (ids != PAD_ID).sum(axis=1)
        return out, lengths - 1, dmap

    def __call__(self, examples: Sequence[Example], candidates: np.ndarray) -> np.ndarray:
        examples = list(examples)
        scores = np.zeros(candidates.shape)
        nonempty = [i for i, (items, _) in enumerate(self._histories(examples)) if len(items) or self.cfg.objective == MASKED]
        if not nonempty:
            return scores
        sub = [examples[i] for i in nonempty]
        out, idx, _ = self.forward(sub)
        h = out.hidden.data[np.arange(len(sub)), idx]
        scores[nonempty] = _cosine_candidates(h, self.state.params["item_emb"].data, candidates[nonempty])
        return scores

    def attention_stats(self, examples: Sequence[Example], chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
        """Per-example cross-domain and total attention mass (cross-domain encoders only)."""
        from .crossdomain import attention_mass, cross_domain_attention_score

        cross, total = [], []
        for s in range(0, len(examples), chunk):
            part = list(examples[s : s + chunk])
            out, _, dmap = self.forward(part)
            att = out.attention_array()
            cross.append(cross_domain_attention_score(att, dmap))
            total.append(attention_mass(att, dmap))
        return np.concatenate(cross), np.concatenate(total)


class SingleDomainRecommender:
    """Routes each example to the model trained on its target's domain."""

    def __init__(self, models: dict[int, SequenceRecommender], catalog: Catalog):
        self.models = models
        self.catalog = catalog

    def __call__(self, examples: Sequence[Example], candidates: np.ndarray) -> np.ndarray:
        examples = list(examples)
        doms = self.catalog.domain_of(np.array([e.target for e in examples]))
        scores = np.zeros(candidates.shape)
        for d, model in self.models.items():
            sel = np.flatnonzero(doms == d)
            if sel.size:
                scores[sel] = model([examples[i] for i in sel], candidates[sel])
        return scores


# ------------------------------------------------------------------ training


@dataclass
class TrainResult:
    state: EncoderState  # best validation checkpoint
    best_ndcg: float
    best_step: int
    steps_run: int
    records: list[StepRecord]
    validation: list[dict]
    config: TrainConfig


def prepare_split(dataset: Dataset, tcfg: TrainConfig) -> Split:
    """Leave-one-out split, with domain labels corrupted first when configured."""
    seqs = dataset.sequences
    if tcfg.corruption_rate > 0:
        seqs = corrupt_domains(seqs, tcfg.corruption_rate, seed=tcfg.seed, domains=dataset.catalog.domains)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return leave_one_out(seqs)


def model_config_for(tcfg: TrainConfig, catalog: Catalog) -> ModelConfig:
    base = tcfg.model or ModelConfig(vocab_size=catalog.size)
    return replace(base, vocab_size=catalog.size, num_domains=max(len(catalog.domains), 1))


def domain_view(split: Split, domain: int) -> Split:
    """Restrict a split to one domain: filtered training rows and same-domain targets."""
    train = [s.filter_domain(domain) for s in split.train]
    train = [s for s in train if len(s)]

    def ex(es):
        out = []
        for e in es:
            if e.target_domain != domain:
                continue
            keep = e.history_domains == domain
            out.append(Example(e.user, e.history_items[keep], e.history_domains[keep], e.target, e.target_domain))
        return out

    return Split(train, ex(split.valid), ex(split.test), split.skipped)


class Trainer:
    """Holds parameters and optimiser state; ``step`` performs one update."""

    def __init__(self, tcfg: TrainConfig, catalog: Catalog):
        self.tcfg = tcfg
        self.catalog = catalog
        self.mcfg = model_config_for(tcfg, catalog)
        if tcfg.method == AUTO_PLUS and self.mcfg.objective != MASKED:
            raise ValueError("autocdsr-plus needs the masked objective")
        self.state = init_state(self.mcfg, np.random.default_rng([tcfg.seed, 0]))
        self.opt = AdamW(tcfg.weight_decay)
        self.prefs = preference_vectors(tcfg.solver.num_preferences, tcfg.solver.preference_index)
        self.step_index = 0
        self.records: list[StepRecord] = []

    def batches(self, train: Sequence[InteractionSequence]) -> Iterator[PreparedBatch]:
        epoch = 0
        while True:
            for b in make_batches(
                train,
                self.tcfg.batch_size,
                self.mcfg.objective,
                self.tcfg.seed,
                epoch,
                self.mcfg.max_seq_len if self.tcfg.method != AUTO_PLUS else self.mcfg.max_seq_len - self.mcfg.ib_tokens,
                self.mcfg.num_special,
                self.mcfg.mask_probability,
            ):
                yield prepare_batch(b, self.mcfg, self.tcfg.method)
            epoch += 1

    def step(self, pb: PreparedBatch) -> StepRecord:
        tcfg, state = self.tcfg, self.state
        k = self.step_index
        params = state.params
        if tcfg.method in (AUTO, AUTO_PLUS):
            try:
                grads, rec = reconcile_step(
                    params,
                    lambda: compute_losses(state, pb, tcfg),
                    self.prefs,
                    tcfg.solver,
                    state.embedding_names(),
                    step=k,
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(f"step {k}, batch {pb.index}: {exc}") from None
        else:
            tape, l_rec, l_cd = compute_losses(state, pb, tcfg)
            a1, a2 = tcfg.static_alpha if tcfg.method == STATIC else (1.0, 0.0)
            with tape:  # the weighted sum must be recorded to be differentiated
                total = static_combined_loss(l_rec, l_cd, a1, a2)
            grads = nx.backward(total, tape, params)
            rec = StepRecord(k, float(l_rec.data), float(l_cd.data), a1, a2, 0, 0)
        if not (math.isfinite(rec.L_rec) and math.isfinite(rec.L_cd)):
            raise TrainingDiverged(f"step {k}, batch {pb.index}: L_rec={rec.L_rec}, L_cd={rec.L_cd}")
        grads, gnorm = clip_by_global_norm(grads, tcfg.grad_clip)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(f"step {k}, batch {pb.index}: non-finite gradient norm")
        lr = learning_rate_at(k, tcfg)
        new = self.opt.step(state.arrays(), grads, lr)
        self.state = state.with_arrays(new)
        self.step_index += 1
        self.records.append(rec)
        return rec

    def recommender(self, state: EncoderState | None = None) -> SequenceRecommender:
        return SequenceRecommender(state or self.state, bottleneck=self.tcfg.method == AUTO_PLUS)


def train(
    tcfg: TrainConfig,
    split: Split,
    catalog: Catalog,
    log_dir: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
) -> TrainResult:
    """Train one model with early stopping on validation NDCG@10.

    For the single-domain method, pass a split already restricted with
    :func:`domain_view`, or set ``tcfg.domain``.
    """
    if tcfg.method == SINGLE and tcfg.domain is not None:
        split = domain_view(split, tcfg.domain)
    if not split.train:
        raise ValueError("empty training view")
    trainer = Trainer(tcfg, catalog)
    step_log = val_path = None
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        step_log = StepLog(log_dir / "steps.csv")
        val_path = log_dir / "validation.csv"
        with val_path.open("w", newline="") as fh:
            csv.writer(fh).writerow(["step", "ndcg@10", "recall@10", "best"])

    best_ndcg, best_step, best_state = -1.0, 0, trainer.state
    validation = []
    pending: list[StepRecord] = []
    batches = trainer.batches(split.train)
    since_best = 0
    while trainer.step_index < tcfg.max_steps:
        rec = trainer.step(next(batches))
        pending.append(rec)
        done = trainer.step_index
        if done % tcfg.validation_interval == 0 or done == tcfg.max_steps:
            ndcg, recall = _validate(trainer, split.valid, catalog, tcfg)
            improved = ndcg > best_ndcg
            if improved:
                best_ndcg, best_step, best_state = ndcg, done, trainer.state
                since_best = 0
            else:
                since_best += done - validation[-1]["step"] if validation else done
            validation.append({"step": done, "ndcg@10": ndcg, "recall@10": recall, "best": improved})
            if step_log is not None:
                step_log.append(pending)
                with val_path.open("a", newline="") as fh:
                    csv.writer(fh).writerow([done, repr(ndcg), repr(recall), int(improved)])
            pending = []
            if since_best >= tcfg.patience_steps:
                log.info("early stop at step %d (best %d)", done, best_step)
                break
    if step_log is not None and pending:
        step_log.append(pending)
    result = TrainResult(best_state, best_ndcg, best_step, trainer.step_index, trainer.records, validation, tcfg)
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path,
            best_state,
            {"train_config": tcfg.to_dict(), "best_ndcg": best_ndcg, "step": best_step},
        )
    return result


def _validate(trainer: Trainer, valid: Sequence[Example], catalog: Catalog, tcfg: TrainConfig) -> tuple[float, float]:
    if not valid:
        return 0.0, 0.0
    n = min(tcfg.eval_negatives, catalog.size - 1)
    rep = evaluate(trainer.recommender(), valid, catalog, n, seed=tcfg.seed, ks=(10,))
    return rep.overall["ndcg@10"], rep.overall["recall@10"]


# -------------------------------------------------------------------- sweep


def sweep_static_weights(
    tcfg: TrainConfig,
    split: Split,
    catalog: Catalog,
    grid: Sequence[tuple[float, float]],
    num_negatives: int = 99,
) -> list[tuple[tuple[float, float], EvalReport, TrainResult]]:
    """Train and test one static-weight model per ``(alpha_rec, alpha_cd)`` grid point."""
    if not grid:
        raise ValueError("empty weight grid")
    out = []
    for a in grid:
        cfg = replace(tcfg, method=STATIC, static_alpha=tuple(a))
        res = train(cfg, split, catalog)
        rep = evaluate(
            SequenceRecommender(res.state),
            split.test,
            catalog,
            min(num_negatives, catalog.size - 1),
            seed=tcfg.seed,
            model_id=f"static-{a[0]:g}-{a[1]:g}",
        )
        out.append((tuple(a), rep, res))
    return out
