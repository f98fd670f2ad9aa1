"""Transformer sequence encoder with exposed attention and cosine readout."""
from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .crossdomain import MASK_ID, PAD_ID, num_special_tokens

CAUSAL = "causal"
MASKED = "masked"

CHECKPOINT_FORMAT = "autocdsr-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 50
    embed_dim: int = 32
    num_layers: int = 6
    num_heads: int = 4
    ffn_multiplier: int = 4
    objective: str = CAUSAL
    mask_probability: float = 0.2
    num_domains: int = 2
    ib_tokens: int = 2
    dtype: str = "float64"

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be >= 2")
        if self.objective not in (CAUSAL, MASKED):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if not 0.0 < self.mask_probability <= 1.0:
            raise ValueError("mask_probability must lie in (0, 1]")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def num_special(self) -> int:
        return num_special_tokens(self.num_domains, self.ib_tokens)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


EMBEDDING_PARAMS = ("item_emb", "special_emb")


@dataclass
class EncoderState:
    """Named parameters of the encoder.

    ``item_emb`` and ``special_emb`` form the embedding-table group; all
    other parameters are the non-embedding group.
    """

    config: ModelConfig
    params: dict[str, nx.Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.params)

    def embedding_names(self) -> list[str]:
        return [n for n in self.params if n in EMBEDDING_PARAMS]

    def non_embedding_names(self) -> list[str]:
        return [n for n in self.params if n not in EMBEDDING_PARAMS]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "EncoderState":
        return EncoderState(self.config, {k: nx.parameter(arrays[k], k) for k in self.params})


def init_state(cfg: ModelConfig, rng: np.random.Generator) -> EncoderState:
    dt = np.dtype(cfg.dtype)
    r, f = cfg.embed_dim, cfg.embed_dim * cfg.ffn_multiplier

    def normal(*shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(dt)

    p: dict[str, np.ndarray] = {
        "item_emb": normal(cfg.vocab_size, r),
        "special_emb": normal(cfg.num_special, r),
        "pos_emb": normal(cfg.max_seq_len, r),
    }
    for l in range(cfg.num_layers):
        p[f"l{l}.wq"] = normal(r, r, std=r**-0.5)
        p[f"l{l}.wk"] = normal(r, r, std=r**-0.5)
        p[f"l{l}.wv"] = normal(r, r, std=r**-0.5)
        p[f"l{l}.ffn_w1"] = normal(r, f, std=r**-0.5)
        p[f"l{l}.ffn_b1"] = np.zeros(f, dtype=dt)
        p[f"l{l}.ffn_w2"] = normal(f, r, std=f**-0.5)
        p[f"l{l}.ffn_b2"] = np.zeros(r, dtype=dt)
        p[f"l{l}.ln_g"] = np.ones(r, dtype=dt)
        p[f"l{l}.ln_b"] = np.zeros(r, dtype=dt)
    return EncoderState(cfg, {k: nx.parameter(v, k) for k, v in p.items()})


@dataclass
class ForwardOutput:
    hidden: nx.Tensor  # (B, L, r)
    attention: list[nx.Tensor]  # per layer, (B, heads, L, L), post-softmax
    scores: list[nx.Tensor]  # per layer, (B, heads, L, L), raw scaled Q K^T
    valid: np.ndarray  # (B, L) bool

    def attention_array(self) -> np.ndarray:
        """Stacked attention ``(B, layers, heads, L, L)``."""
        return np.stack([a.data for a in self.attention], axis=1)


def attention_allowed(valid: np.ndarray, causal: bool) -> np.ndarray:
    """Boolean ``(B, L, L)`` permission matrix over content positions."""
    valid = np.asarray(valid, dtype=bool)
    allowed = valid[:, None, :] & valid[:, :, None]
    if causal:
        L = valid.shape[1]
        allowed = allowed & np.tril(np.ones((L, L), dtype=bool))
    return allowed


def encode(
    token_ids: np.ndarray,
    state: EncoderState,
    valid: np.ndarray | None = None,
    allowed: np.ndarray | None = None,
    positions: np.ndarray | None = None,
    combine: np.ndarray | None = None,
) -> ForwardOutput:
    """Run the encoder on a right-padded batch of token ids.

    Parameters
    ----------
    token_ids : (B, L) int
    valid : (B, L) bool, optional
        Content mask; defaults to ``token_ids != PAD_ID``.
    allowed : (B, L, L) bool, optional
        Attention permissions among valid positions; defaults to causal or
        bidirectional attention according to the config objective.
    positions : (B, L) int, optional
        Positional slots; defaults to ``0..L-1``.
    combine : (B, L, L), optional
        Fixed mixing matrix applied to the hidden states after every layer
        (bottleneck-token exchange).
    """
    cfg = state.config
    p = state.params
    dt = np.dtype(cfg.dtype)
    token_ids = np.asarray(token_ids)
    if token_ids.ndim == 1:
        token_ids = token_ids[None]
    B, L = token_ids.shape
    if L > cfg.max_seq_len and positions is None:
        raise ValueError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
    n_tok = cfg.num_special + cfg.vocab_size
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= n_tok):
        raise IndexError(f"token id out of vocabulary [0, {n_tok})")
    if valid is None:
        valid = token_ids != PAD_ID
    valid = np.asarray(valid, dtype=bool)
    if allowed is None:
        allowed = attention_allowed(valid, cfg.objective == CAUSAL)
    else:
        allowed = np.asarray(allowed, dtype=bool) & valid[:, None, :] & valid[:, :, None]
    # padding rows may only see themselves, then get zeroed
    allowed = allowed | (np.eye(L, dtype=bool)[None] & ~valid[:, :, None])
    mask = np.where(allowed, 0.0, -np.inf).astype(dt)[:, None]
    row_keep = valid[:, None, :, None].astype(dt)
    if positions is None:
        positions = np.broadcast_to(np.arange(L), (B, L))
    if np.max(positions, initial=0) >= cfg.max_seq_len:
        raise ValueError("position index exceeds max_seq_len")

    table = nx.concat([p["special_emb"], p["item_emb"]], axis=0)
    h = nx.embedding(table, token_ids)
    pos = nx.embedding(p["pos_emb"], positions)
    nh, hd = cfg.num_heads, cfg.head_dim
    inv_sqrt = 1.0 / np.sqrt(hd)
    attn_all, score_all = [], []
    for l in range(cfg.num_layers):
        x = nx.add(h, pos)

        def heads(w):
            t = nx.matmul(x, p[f"l{l}.{w}"])
            return nx.transpose(nx.reshape(t, (B, L, nh, hd)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        s = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), inv_sqrt)
        a = nx.mul(nx.row_softmax(s, mask), row_keep)
        o = nx.matmul(a, v)
        o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B, L, cfg.embed_dim))
        f = nx.gelu(nx.add(nx.matmul(o, p[f"l{l}.ffn_w1"]), p[f"l{l}.ffn_b1"]))
        f = nx.add(nx.matmul(f, p[f"l{l}.ffn_w2"]), p[f"l{l}.ffn_b2"])
        h = nx.layer_norm(nx.add(f, h), p[f"l{l}.ln_g"], p[f"l{l}.ln_b"])
        if combine is not None:
            h = nx.matmul(nx.constant(combine, dtype=dt), h)
        attn_all.append(a)
        score_all.append(s)
    return ForwardOutput(hidden=h, attention=attn_all, scores=score_all, valid=valid)


def readout_index(token_ids: np.ndarray, mode: str, valid: np.ndarray | None = None) -> np.ndarray:
    """Per-row position whose hidden state serves as the user vector."""
    token_ids = np.atleast_2d(np.asarray(token_ids))
    if valid is None:
        valid = token_ids != PAD_ID
    if mode == CAUSAL:
        if np.any(~valid.any(axis=1)):
            raise ValueError("readout on an empty sequence")
        return valid.shape[1] - 1 - np.argmax(valid[:, ::-1], axis=1)
    if mode == MASKED:
        masked = token_ids == MASK_ID
        if np.any(~masked.any(axis=1)):
            raise ValueError("masked readout needs a masked position in every row")
        return masked.shape[1] - 1 - np.argmax(masked[:, ::-1], axis=1)
    raise ValueError(f"unknown readout mode {mode!r}")


def readout(hidden: nx.Tensor, token_ids: np.ndarray, mode: str, valid: np.ndarray | None = None) -> nx.Tensor:
    """User vectors ``(B, r)``: last content position (causal) or last MASK (masked)."""
    idx = readout_index(token_ids, mode, valid)
    return nx.take(hidden, (np.arange(len(idx)), idx))


def recommendation_loss(
    h: nx.Tensor,
    targets: np.ndarray,
    item_emb: nx.Tensor,
    negatives: np.ndarray | None = None,
) -> nx.Tensor:
    """Cross-entropy of cosine scores between user vectors and item embeddings.

    Parameters
    ----------
    h : (N, r) user vectors
    targets : (N,) catalog item indices
    item_emb : (|V|, r) item embedding table
    negatives : (N, k) item indices, optional
        When given, each row is scored against ``{target} + negatives``;
        otherwise against the full catalog.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if h.shape[0] == 0:
        raise ValueError("empty batch")
    if targets.min() < 0 or targets.max() >= item_emb.shape[0]:
        raise IndexError("target outside the catalog")
    scores = nx.cosine_scores(h, item_emb)
    if negatives is None:
        return nx.softmax_cross_entropy(scores, targets)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(targets), -1)
    if np.any(negatives == targets[:, None]):
        raise ValueError("negatives must exclude the target")
    cand = np.concatenate([targets[:, None], negatives], axis=1)
    return nx.softmax_cross_entropy(scores, np.zeros(len(targets), dtype=np.int64), cand)


def static_combined_loss(l_rec: nx.Tensor, l_cd: nx.Tensor, alpha_rec: float, alpha_cd: float) -> nx.Tensor:
    """Fixed-weight sum ``alpha_rec * l_rec + alpha_cd * l_cd``."""
    if alpha_rec < 0 or alpha_cd < 0:
        raise ValueError("loss weights must be non-negative")
    if alpha_cd == 0.0:
        return nx.scale(l_rec, alpha_rec) if alpha_rec != 1.0 else l_rec
    if alpha_rec == 0.0:
        return nx.scale(l_cd, alpha_cd) if alpha_cd != 1.0 else l_cd
    return nx.add(nx.scale(l_rec, alpha_rec), nx.scale(l_cd, alpha_cd))


# ---------------------------------------------------------------- checkpoints


def _encode_array(a: np.ndarray) -> dict:
    le = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))
    return {
        "dtype": le.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(le.tobytes()).decode("ascii"),
    }


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype=np.dtype(d["dtype"])).reshape(d["shape"]).astype(
        np.dtype(d["dtype"]).newbyteorder("="), copy=True
    )


def save_checkpoint(path: str | Path, state: EncoderState, meta: dict | None = None) -> None:
    """Write a JSON container: config, metadata and little-endian base64 tensors."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(state.config),
        "meta": meta or {},
        "tensors": {k: _encode_array(v.data) for k, v in state.params.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> tuple[EncoderState, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    cfg = ModelConfig(**doc["model_config"])
    params = {k: nx.parameter(_decode_array(v), k) for k, v in doc["tensors"].items()}
    return EncoderState(cfg, params), doc.get("meta", {})


def mask_tokens(token_ids: np.ndarray, probability: float, rng: np.random.Generator):
    """Replace content tokens by MASK with the given probability.

    Every row with content gets at least one masked position (its last
    content token if the draw selected none). Returns ``(masked_ids, where)``.
    """
    token_ids = np.asarray(token_ids)
    valid = token_ids != PAD_ID
    where = (rng.random(token_ids.shape) < probability) & valid
    empty = ~where.any(axis=1) & valid.any(axis=1)
    if np.any(empty):
        last = readout_index(token_ids[empty], CAUSAL)
        where[np.flatnonzero(empty), last] = True
    out = token_ids.copy()
    out[where] = MASK_ID
    return out, where
