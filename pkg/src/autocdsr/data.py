"""Interaction data: TSV ingestion, synthetic scenarios, splits and batching.

Items carry global catalog indices; each domain owns a contiguous index
range. Every sequence stores the per-position domain label separately from
the catalog, so labels can be corrupted without touching item ids.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .crossdomain import MASK_ID, PAD_DOMAIN, PAD_ID
from .model import CAUSAL, MASKED

log = logging.getLogger(__name__)

SCENARIOS = ("complementary", "independent", "contradictory", "mixed")


class DataFormatError(ValueError):
    pass


@dataclass
class Catalog:
    """Domains and their contiguous item index ranges ``[start, stop)``."""

    domains: tuple[int, ...] = ()
    ranges: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        spans = sorted(self.ranges[d] for d in self.domains)
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise DataFormatError("domain item ranges overlap")

    @property
    def size(self) -> int:
        return max((stop for _, stop in self.ranges.values()), default=0)

    def domain_items(self, d: int) -> np.ndarray:
        lo, hi = self.ranges[d]
        return np.arange(lo, hi)

    def domain_of(self, items) -> np.ndarray:
        items = np.asarray(items)
        out = np.full(items.shape, PAD_DOMAIN, dtype=np.int64)
        for d, (lo, hi) in self.ranges.items():
            out[(items >= lo) & (items < hi)] = d
        return out

    def to_dict(self) -> dict:
        return {"domains": list(self.domains), "ranges": {str(d): list(r) for d, r in self.ranges.items()}}

    @classmethod
    def from_dict(cls, doc: dict) -> "Catalog":
        return cls(tuple(doc["domains"]), {int(d): tuple(r) for d, r in doc["ranges"].items()})


@dataclass
class InteractionSequence:
    user: int
    items: np.ndarray
    domains: np.ndarray
    timestamps: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def __post_init__(self):
        if not (len(self.items) == len(self.domains) == len(self.timestamps)):
            raise ValueError("sequence fields differ in length")

    def equals(self, other: "InteractionSequence") -> bool:
        return (
            self.user == other.user
            and np.array_equal(self.items, other.items)
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    def filter_domain(self, d: int) -> "InteractionSequence":
        keep = self.domains == d
        return InteractionSequence(self.user, self.items[keep], self.domains[keep], self.timestamps[keep])


@dataclass
class Dataset:
    sequences: list[InteractionSequence]
    catalog: Catalog
    truth: dict | None = None


# ----------------------------------------------------------------- TSV I/O


def load_tsv(path: str | Path, catalog: Catalog | None = None) -> Dataset:
    """Read ``user_id, item_id, domain_id, timestamp`` rows.

    A header line is skipped if its first field is not an integer. Without a
    ``catalog``, one is inferred from the observed item ids of each domain.
    """
    rows: dict[int, list[tuple[float, int, int, int]]] = {}
    order = 0
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if lineno == 1 and parts and not _is_int(parts[0]):
                continue
            if len(parts) != 4:
                raise DataFormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                user, item, dom = int(parts[0]), int(parts[1]), int(parts[2])
                ts = float(parts[3])
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if catalog is not None and dom not in catalog.ranges:
                raise DataFormatError(f"{path}:{lineno}: unknown domain {dom}")
            rows.setdefault(user, []).append((ts, order, item, dom))
            order += 1

    if catalog is None:
        spans: dict[int, list[int]] = {}
        for recs in rows.values():
            for _, _, item, dom in recs:
                lo_hi = spans.setdefault(dom, [item, item])
                lo_hi[0] = min(lo_hi[0], item)
                lo_hi[1] = max(lo_hi[1], item)
        catalog = Catalog(tuple(sorted(spans)), {d: (lo, hi + 1) for d, (lo, hi) in spans.items()})

    seqs = []
    for user in sorted(rows):
        recs = sorted(rows[user], key=lambda r: (r[0], r[1]))
        items = np.array([r[2] for r in recs], dtype=np.int64)
        doms = np.array([r[3] for r in recs], dtype=np.int64)
        ts = np.array([r[0] for r in recs], dtype=np.float64)
        seqs.append(InteractionSequence(user, items, doms, ts))
    return Dataset(seqs, catalog)


def _is_int(s: str) -> bool:
    try:
        int(s)
        return True
    except ValueError:
        return False


def write_tsv(path: str | Path, sequences: Sequence[InteractionSequence], header: bool = True) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if header:
            w.writerow(["user_id", "item_id", "domain_id", "timestamp"])
        for s in sequences:
            for it, d, t in zip(s.items, s.domains, s.timestamps):
                w.writerow([s.user, int(it), int(d), repr(float(t))])


def manifest(dataset: Dataset) -> dict:
    """Counts, catalog sizes and sparsity per domain."""
    n_users = len(dataset.sequences)
    per = {}
    for d in dataset.catalog.domains:
        lo, hi = dataset.catalog.ranges[d]
        n_inter = int(sum(int(np.sum(s.domains == d)) for s in dataset.sequences))
        n_items = hi - lo
        denom = max(n_users * n_items, 1)
        per[str(d)] = {"items": n_items, "interactions": n_inter, "sparsity": 1.0 - n_inter / denom}
    return {
        "users": n_users,
        "items": dataset.catalog.size,
        "interactions": int(sum(len(s) for s in dataset.sequences)),
        "domains": per,
        "catalog": dataset.catalog.to_dict(),
    }


def write_manifest(path: str | Path, dataset: Dataset, extra: dict | None = None) -> None:
    doc = manifest(dataset)
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_manifest_catalog(path: str | Path) -> Catalog:
    return Catalog.from_dict(json.loads(Path(path).read_text())["catalog"])


# ------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    """Synthetic multi-domain behaviour generator settings.

    Each domain's items are split into ``num_interests`` clusters of equal
    size. An interaction picks a cluster from a domain-dependent source and a
    within-cluster rank from a sparse first-order rank chain.
    """

    scenario: str = "complementary"
    num_users: int = 2000
    items_per_domain: int = 1000
    num_domains: int = 2
    mean_seq_len: float = 20.0
    domain_mix: float = 0.5
    noise_rate: float = 0.0
    num_interests: int = 20
    switch_prob: float = 0.5
    successors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        for name in ("domain_mix", "noise_rate", "switch_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.num_domains < 1:
            raise ValueError("num_domains must be >= 1")
        if self.items_per_domain % self.num_interests:
            raise ValueError("items_per_domain must be a multiple of num_interests")
        if self.mean_seq_len < 3:
            raise ValueError("mean_seq_len must be >= 3")
        if not 1 <= self.successors <= self.items_per_domain // self.num_interests:
            raise ValueError("successors must lie in [1, cluster size]")


def _cluster_sources(cfg: SynthConfig) -> list[str]:
    D = cfg.num_domains
    if cfg.scenario == "independent":
        return ["own"] * D
    if cfg.scenario == "complementary":
        return ["shared"] * D
    if cfg.scenario == "contradictory":
        return ["own"] + ["noise"] * (D - 1)
    # mixed: domain 0 follows domain 1's interest, domain 1 is self-contained
    if D < 2:
        return ["own"]
    return ["follow1", "own"] + ["noise"] * (D - 2)


def synthesize(cfg: SynthConfig) -> Dataset:
    """Generate sequences plus the generator's ground truth.

    Cluster sources per scenario:

    ``independent``   every domain keeps its own interest chain
    ``complementary`` all domains share one user interest that switches
                      with ``switch_prob`` every interaction
    ``contradictory`` domain 0 keeps its own chain; other domains are
                      uniform noise independent of the user
    ``mixed``         domain 1 keeps its own chain, domain 0 follows
                      domain 1's current interest

    ``truth`` holds the rank transition tables, the cluster sources and the
    per-interaction clusters.
    """
    rng = np.random.default_rng(cfg.seed)
    D, C = cfg.num_domains, cfg.num_interests
    n = cfg.items_per_domain
    cs = n // C
    catalog = Catalog(tuple(range(D)), {d: (d * n, (d + 1) * n) for d in range(D)})

    # sparse rank chains: each rank has `successors` next ranks with Dirichlet weights
    rank_T = np.zeros((D, cs, cs))
    for d in range(D):
        for r in range(cs):
            nxt = rng.choice(cs, size=cfg.successors, replace=False)
            rank_T[d, r, nxt] = rng.dirichlet(np.ones(cfg.successors))
    sources = _cluster_sources(cfg)
    other_p = cfg.domain_mix / (D - 1) if D > 1 else 0.0
    dom_p = np.array([1.0 - cfg.domain_mix] + [other_p] * (D - 1)) if D > 1 else np.ones(1)

    seqs, clusters_all = [], []
    for u in range(cfg.num_users):
        length = 3 + int(rng.poisson(cfg.mean_seq_len - 3))
        doms = rng.choice(D, size=length, p=dom_p)
        shared = int(rng.integers(C))
        own = rng.integers(C, size=D)
        prev_rank = np.full(D, -1)
        items = np.empty(length, dtype=np.int64)
        clus = np.empty(length, dtype=np.int64)
        for t in range(length):
            if rng.random() < cfg.switch_prob:
                shared = int(rng.integers(C))
            d = int(doms[t])
            src = sources[d]
            if src == "noise":
                idx = int(rng.integers(n))
                items[t] = d * n + idx
                clus[t] = idx // cs
                continue
            if src == "own":
                if prev_rank[d] >= 0 and rng.random() < cfg.switch_prob:
                    own[d] = rng.integers(C)
                c = int(own[d])
            elif src == "follow1":
                c = int(own[1])
            else:
                c = shared
            if prev_rank[d] < 0:
                r = int(rng.integers(cs))
            else:
                r = int(rng.choice(cs, p=rank_T[d, prev_rank[d]]))
            if cfg.noise_rate and rng.random() < cfg.noise_rate:
                idx = int(rng.integers(n))
                c, r = idx // cs, idx % cs
            prev_rank[d] = r
            items[t] = d * n + c * cs + r
            clus[t] = c
        seqs.append(InteractionSequence(u, items, doms.astype(np.int64), np.arange(length, dtype=np.float64)))
        clusters_all.append(clus)
    truth = {
        "scenario": cfg.scenario,
        "sources": sources,
        "rank_transitions": rank_T,
        "cluster_size": cs,
        "clusters": clusters_all,
        "switch_prob": cfg.switch_prob,
        "config": asdict(cfg),
    }
    return Dataset(seqs, catalog, truth)


def markov_transition_row(truth: dict, domain: int, prev_item: int, items_per_domain: int, num_interests: int) -> np.ndarray:
    """Exact next-item distribution within a self-contained ("own") domain.

    Used as the analytic oracle for the ``independent`` scenario without noise.
    """
    cs = truth["cluster_size"]
    s = truth["switch_prob"]
    local = prev_item - domain * items_per_domain
    c, r = divmod(local, cs)
    rank_row = truth["rank_transitions"][domain, r]
    out = np.zeros(items_per_domain)
    for cc in range(num_interests):
        w = s / num_interests + (1.0 - s) * (cc == c)
        out[cc * cs : (cc + 1) * cs] += w * rank_row
    return out


# ------------------------------------------------------------------ splits


@dataclass
class Example:
    """A prediction target with the history preceding it."""

    user: int
    history_items: np.ndarray
    history_domains: np.ndarray
    target: int
    target_domain: int  # label domain of the target position


@dataclass
class Split:
    train: list[InteractionSequence]
    valid: list[Example]
    test: list[Example]
    skipped: int = 0


def leave_one_out(sequences: Sequence[InteractionSequence]) -> Split:
    """Last item for test, second-to-last for validation, the rest for training.

    Sequences shorter than three are skipped (counted in ``skipped``). All
    views are numpy slices of the input arrays.
    """
    train, valid, test = [], [], []
    skipped = 0
    for s in sequences:
        if len(s) < 3:
            skipped += 1
            continue
        train.append(InteractionSequence(s.user, s.items[:-2], s.domains[:-2], s.timestamps[:-2]))
        valid.append(Example(s.user, s.items[:-2], s.domains[:-2], int(s.items[-2]), int(s.domains[-2])))
        test.append(Example(s.user, s.items[:-1], s.domains[:-1], int(s.items[-1]), int(s.domains[-1])))
    if skipped:
        warnings.warn(f"leave_one_out skipped {skipped} sequences shorter than 3", stacklevel=2)
    return Split(train, valid, test, skipped)


def corrupt_domains(
    sequences: Sequence[InteractionSequence], rate: float, seed: int, domains: Sequence[int] | None = None
) -> list[InteractionSequence]:
    """Relabel each position with a uniformly drawn *other* domain with probability ``rate``."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if domains is None:
        domains = sorted({int(d) for s in sequences for d in s.domains})
    domains = np.asarray(sorted(domains), dtype=np.int64)
    if rate == 0.0 or len(domains) < 2:
        return list(sequences)
    rng = np.random.default_rng(seed)
    out = []
    for s in sequences:
        flip = rng.random(len(s)) < rate
        shift = rng.integers(1, len(domains), size=len(s))
        pos = np.searchsorted(domains, s.domains)
        new = np.where(flip, domains[(pos + shift) % len(domains)], s.domains)
        out.append(InteractionSequence(s.user, s.items, new, s.timestamps))
    return out


# ----------------------------------------------------------------- batches


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, L)
    domains: np.ndarray  # (B, L) domain map; PAD_DOMAIN for pad and MASK
    target_pos: tuple[np.ndarray, np.ndarray]  # (row, position) pairs carrying targets
    targets: np.ndarray  # (N,) catalog indices
    users: np.ndarray
    index: int = 0
    block_domains: np.ndarray | None = None  # (B, L) domain labels kept at masked positions

    @property
    def valid(self) -> np.ndarray:
        return self.token_ids != PAD_ID


def truncate(items: np.ndarray, max_len: int) -> np.ndarray:
    """Keep the most recent ``max_len`` entries."""
    return items[-max_len:] if len(items) > max_len else items


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(
    train: Sequence[InteractionSequence],
    batch_size: int,
    objective: str,
    seed: int,
    epoch: int,
    max_len: int,
    num_special: int,
    mask_probability: float = 0.2,
) -> Iterator[Batch]:
    """Shuffled batches for one epoch.

    Causal batches hold every ``(prefix, next item)`` pair of a sequence in
    one row: inputs are ``items[:-1]`` and targets ``items[1:]``, both cut to
    the last ``max_len`` positions. Masked batches replace content tokens by
    MASK with ``mask_probability`` and target the hidden items.
    """
    if not train:
        raise ValueError("empty training view")
    if objective not in (CAUSAL, MASKED):
        raise ValueError(f"unknown objective {objective!r}")
    rows = [s for s in train if len(s) >= (2 if objective == CAUSAL else 1)]
    order = epoch_order(len(rows), seed, epoch)
    mask_rng = np.random.default_rng([seed, epoch, 1])
    for bi, start in enumerate(range(0, len(order), batch_size)):
        chunk = [rows[i] for i in order[start : start + batch_size]]
        if objective == CAUSAL:
            ins = [truncate(s.items[:-1], max_len) for s in chunk]
            doms = [truncate(s.domains[:-1], max_len) for s in chunk]
            tgs = [truncate(s.items[1:], max_len) for s in chunk]
        else:
            ins = [truncate(s.items, max_len) for s in chunk]
            doms = [truncate(s.domains, max_len) for s in chunk]
            tgs = ins
        L = max(len(x) for x in ins)
        B = len(chunk)
        tok = np.full((B, L), PAD_ID, dtype=np.int64)
        dmap = np.full((B, L), PAD_DOMAIN, dtype=np.int64)
        tgt = np.full((B, L), -1, dtype=np.int64)
        for b, (x, dd, t) in enumerate(zip(ins, doms, tgs)):
            tok[b, : len(x)] = x + num_special
            dmap[b, : len(x)] = dd
            tgt[b, : len(t)] = t
        labels = dmap.copy()
        if objective == MASKED:
            valid = tok != PAD_ID
            where = (mask_rng.random(tok.shape) < mask_probability) & valid
            none = ~where.any(axis=1)
            lengths = valid.sum(axis=1)
            where[np.flatnonzero(none), lengths[none] - 1] = True
            tok[where] = MASK_ID
            dmap[where] = PAD_DOMAIN
            tgt[~where] = -1
        rows_i, pos_i = np.nonzero(tgt >= 0)
        yield Batch(
            token_ids=tok,
            domains=dmap,
            target_pos=(rows_i, pos_i),
            targets=tgt[rows_i, pos_i],
            users=np.array([s.user for s in chunk]),
            index=bi,
            block_domains=labels,
        )
