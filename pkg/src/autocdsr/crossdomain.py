"""Domain-aware pieces: stitching, cross-domain attention mass, IB-token layout.

Domain maps are integer arrays aligned with token positions. Content
positions carry their catalog domain (``>= 0``); padding is ``PAD_DOMAIN``
and bottleneck tokens are ``IB_DOMAIN``. Only content positions ever count
towards a cross-domain score.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx

PAD_DOMAIN = -1
IB_DOMAIN = -2

PAD_ID = 0
MASK_ID = 1


def num_special_tokens(num_domains: int, ib_tokens: int) -> int:
    """PAD, MASK and one learned token per (domain, bottleneck slot)."""
    return 2 + num_domains * ib_tokens


def ib_token_id(domain: int, slot: int, ib_tokens: int) -> int:
    return 2 + domain * ib_tokens + slot


# ----------------------------------------------------------------- stitching


def stitch(per_domain: Mapping[int, tuple[Sequence[int], Sequence[float]]]):
    """Merge per-domain (items, timestamps) lists into one time-ordered sequence.

    Ties in time go to the smaller domain id; within a domain the input
    order is kept.

    Returns
    -------
    items, domains, timestamps : np.ndarray
    """
    items, doms, ts = [], [], []
    for d in sorted(per_domain):
        it, t = per_domain[d]
        it = np.asarray(it, dtype=np.int64)
        t = np.asarray(t, dtype=np.float64)
        if it.shape != t.shape:
            raise ValueError(f"domain {d}: items and timestamps differ in length")
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ValueError(f"domain {d}: timestamps are not ordered")
        items.append(it)
        doms.append(np.full(it.shape, d, dtype=np.int64))
        ts.append(t)
    if not items:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), np.zeros(0)
    items = np.concatenate(items)
    doms = np.concatenate(doms)
    ts = np.concatenate(ts)
    order = np.argsort(ts, kind="stable")
    return items[order], doms[order], ts[order]


# ----------------------------------------------------- cross-domain attention


def cross_domain_indicator(domains: np.ndarray) -> np.ndarray:
    """``I[..., i, j] = 1`` when i and j are content positions of different domains."""
    domains = np.asarray(domains)
    valid = domains >= 0
    diff = domains[..., :, None] != domains[..., None, :]
    both = valid[..., :, None] & valid[..., None, :]
    return (diff & both).astype(np.float64)


def cross_domain_attention_score(attn: np.ndarray, domains: np.ndarray) -> np.ndarray | float:
    """Cross-domain attention mass, averaged over layers and heads.

    Parameters
    ----------
    attn : np.ndarray
        Post-softmax attention, ``(layers, heads, M, M)`` for one sequence or
        ``(B, layers, heads, M, M)`` for a batch.
    domains : np.ndarray
        Domain map ``(M,)`` or ``(B, M)``.
    """
    attn = np.asarray(attn)
    domains = np.asarray(domains)
    single = attn.ndim == 4
    if single:
        attn, domains = attn[None], domains[None]
    if attn.ndim != 5 or domains.ndim != 2:
        raise ValueError("attention must be (L, H, M, M) or (B, L, H, M, M)")
    if attn.shape[0] != domains.shape[0] or attn.shape[-1] != domains.shape[-1] or attn.shape[-2] != domains.shape[-1]:
        raise ValueError(f"attention {attn.shape} does not match domain map {domains.shape}")
    ind = cross_domain_indicator(domains)[:, None, None]
    per = (attn * ind).sum(axis=(-1, -2)).mean(axis=(1, 2))
    return float(per[0]) if single else per


def attention_mass(attn: np.ndarray, domains: np.ndarray) -> np.ndarray | float:
    """Total attention mass among content positions, averaged over layers and heads."""
    attn = np.asarray(attn)
    domains = np.asarray(domains)
    single = attn.ndim == 4
    if single:
        attn, domains = attn[None], domains[None]
    valid = domains >= 0
    both = (valid[:, :, None] & valid[:, None, :]).astype(attn.dtype)[:, None, None]
    per = (attn * both).sum(axis=(-1, -2)).mean(axis=(1, 2))
    return float(per[0]) if single else per


def attention_penalty(attn: Sequence[nx.Tensor], indicator: np.ndarray) -> nx.Tensor:
    """Differentiable per-sequence mass ``sum_ij P_ij * I_ij`` averaged over layers and heads.

    ``attn`` holds one ``(B, heads, L, L)`` tensor per layer and ``indicator``
    is ``(B, L, L)``. Returns a ``(B,)`` tensor.
    """
    ind = indicator[:, None].astype(attn[0].dtype)
    n_layers, n_heads = len(attn), attn[0].shape[1]
    total = None
    for p in attn:
        s = nx.sum_axis(nx.mul(p, ind), (1, 2, 3))
        total = s if total is None else nx.add(total, s)
    return nx.scale(total, 1.0 / (n_layers * n_heads))


# ------------------------------------------------------------- IB token batches


@dataclass
class IBLayout:
    """Block structure of one bottleneck-token sequence.

    ``blocks`` lists ``(domain, start, n_items)``; each block occupies
    ``[start, start + T + n_items)`` with its ``T`` bottleneck tokens first.
    """

    ib_tokens: int
    blocks: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def length(self) -> int:
        return sum(self.ib_tokens + n for _, _, n in self.blocks)

    @property
    def domain_lengths(self) -> dict[int, int]:
        return {d: n for d, _, n in self.blocks}

    def domain_map(self, total_len: int | None = None) -> np.ndarray:
        n = self.length if total_len is None else total_len
        out = np.full(n, PAD_DOMAIN, dtype=np.int64)
        for d, s, k in self.blocks:
            out[s : s + self.ib_tokens] = IB_DOMAIN
            out[s + self.ib_tokens : s + self.ib_tokens + k] = d
        return out

    def block_ids(self, total_len: int | None = None) -> np.ndarray:
        n = self.length if total_len is None else total_len
        out = np.full(n, -1, dtype=np.int64)
        for b, (_, s, k) in enumerate(self.blocks):
            out[s : s + self.ib_tokens + k] = b
        return out


@dataclass
class IBBatch:
    token_ids: np.ndarray  # (B, L) int
    positions: np.ndarray  # (B, L) int
    allowed: np.ndarray  # (B, L, L) bool, True where attention is permitted
    valid: np.ndarray  # (B, L) bool
    combine: np.ndarray  # (B, L, L) mixing matrix applied between layers
    layouts: list[IBLayout]
    query_index: np.ndarray | None = None  # (B,) position of the appended MASK, if any


def build_ib_batch(
    per_domain: Sequence[Mapping[int, Sequence[int]]],
    ib_tokens: int,
    num_special: int | None,
    query_domain: Sequence[int] | None = None,
    max_len: int | None = None,
) -> IBBatch:
    """Lay out each user as ``[IB_1..IB_T ; items]`` blocks, one per domain.

    Parameters
    ----------
    per_domain
        For every user, a map from domain id to that domain's item indices
        (catalog indices, already in time order).
    ib_tokens
        Bottleneck tokens per domain (``T``).
    num_special
        Offset added to item indices to obtain token ids. ``None`` means the
        values are token ids already (e.g. MASK tokens in training batches).
    query_domain
        Optional per-user domain whose block gets a trailing MASK token; used
        for scoring the next item of that domain.
    max_len
        Positional-table size; every block must fit in it.
    """
    if ib_tokens < 1:
        raise ValueError("ib_tokens must be >= 1")
    layouts: list[IBLayout] = []
    rows: list[list[int]] = []
    pos_rows: list[list[int]] = []
    queries: list[int] = []
    for u, doms in enumerate(per_domain):
        qd = None if query_domain is None else int(query_domain[u])
        keys = sorted(set(doms) | ({qd} if qd is not None else set()))
        layout = IBLayout(ib_tokens)
        toks: list[int] = []
        pos: list[int] = []
        q_at = -1
        for d in keys:
            items = list(doms.get(d, ()))
            if not items and d != qd:
                raise ValueError(f"user {u}: empty block for domain {d}")
            ids = [ib_token_id(d, t, ib_tokens) for t in range(ib_tokens)]
            off = 0 if num_special is None else num_special
            ids += [int(i) + off for i in items]
            if d == qd:
                ids.append(MASK_ID)
            start = len(toks)
            if d == qd:
                q_at = start + len(ids) - 1
            if max_len is not None and len(ids) > max_len:
                raise ValueError(f"block of length {len(ids)} exceeds max_len {max_len}")
            toks += ids
            pos += list(range(len(ids)))
            layout.blocks.append((d, start, len(ids) - ib_tokens))
        layouts.append(layout)
        rows.append(toks)
        pos_rows.append(pos)
        queries.append(q_at)

    B = len(rows)
    L = max((len(r) for r in rows), default=0)
    token_ids = np.full((B, L), PAD_ID, dtype=np.int64)
    positions = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    allowed = np.zeros((B, L, L), dtype=bool)
    combine = np.zeros((B, L, L))
    for b, (toks, pos, layout) in enumerate(zip(rows, pos_rows, layouts)):
        n = len(toks)
        token_ids[b, :n] = toks
        positions[b, :n] = pos
        valid[b, :n] = True
        blk = layout.block_ids(L)
        allowed[b] = (blk[:, None] == blk[None, :]) & (blk[:, None] >= 0)
        combine[b] = np.eye(L)
        for t in range(ib_tokens):
            slots = [s + t for _, s, _ in layout.blocks]
            for i in slots:
                combine[b, i, :] = 0.0
                combine[b, i, slots] = 1.0
    return IBBatch(
        token_ids=token_ids,
        positions=positions,
        allowed=allowed,
        valid=valid,
        combine=combine,
        layouts=layouts,
        query_index=np.asarray(queries) if query_domain is not None else None,
    )


def ib_indicator(layouts: Sequence[IBLayout], total_len: int) -> np.ndarray:
    """``I[b, i, j] = 1`` for item row i and bottleneck column j of the same block."""
    out = np.zeros((len(layouts), total_len, total_len))
    for b, lay in enumerate(layouts):
        T = lay.ib_tokens
        for _, s, k in lay.blocks:
            out[b, s + T : s + T + k, s : s + T] = 1.0
    return out


def ib_cross_domain_score(attn: np.ndarray, layout: IBLayout | Sequence[IBLayout]) -> np.ndarray | float:
    """Item-to-bottleneck attention mass summed over domain blocks.

    ``attn`` is ``(layers, heads, L, L)`` with a single layout, or
    ``(B, layers, heads, L, L)`` with one layout per row. The result is
    averaged over layers and heads.
    """
    attn = np.asarray(attn)
    single = isinstance(layout, IBLayout)
    if single:
        attn, layout = attn[None], [layout]
    if attn.ndim != 5 or attn.shape[0] != len(layout):
        raise ValueError("attention batch does not match layouts")
    for lay in layout:
        if lay.length > attn.shape[-1]:
            raise ValueError(f"layout length {lay.length} exceeds attention size {attn.shape[-1]}")
    ind = ib_indicator(layout, attn.shape[-1])[:, None, None]
    per = (attn * ind).sum(axis=(-1, -2)).mean(axis=(1, 2))
    return float(per[0]) if single else per


def combine_ib(states: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise sum of every domain's ``(T, r)`` bottleneck states.

    The encoder applies the same combination through the batch's
    ``combine`` matrix; this is the stand-alone form.
    """
    if not states:
        raise ValueError("no bottleneck states to combine")
    shape = np.shape(states[0])
    for s in states:
        if np.shape(s) != shape:
            raise ValueError("bottleneck states differ in shape")
    return np.sum(np.stack(states), axis=0)
