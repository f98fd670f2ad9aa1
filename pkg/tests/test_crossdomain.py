import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autocdsr import numerics as nx
from autocdsr.crossdomain import (
    IB_DOMAIN,
    PAD_DOMAIN,
    IBLayout,
    attention_mass,
    attention_penalty,
    build_ib_batch,
    combine_ib,
    cross_domain_attention_score,
    cross_domain_indicator,
    ib_cross_domain_score,
    ib_indicator,
    stitch,
)
from autocdsr.model import MASKED, ModelConfig, encode, init_state

from oracles import brute_cross_domain, brute_ib_score


def random_attention(g, layers, heads, M, valid=None):
    a = g.random((layers, heads, M, M)) + 1e-3
    if valid is not None:
        a = a * valid[None, None, :] * valid[None, None, :, None]
    s = a.sum(-1, keepdims=True)
    return np.divide(a, s, out=np.zeros_like(a), where=s > 0)


def uniform(M, layers=1, heads=1):
    return np.full((layers, heads, M, M), 1.0 / M)


# ------------------------------------------------------------------ stitch


def test_stitch_single_domain_is_identity():
    items, doms, ts = stitch({3: ([7, 8, 9], [1.0, 2.0, 2.0])})
    np.testing.assert_array_equal(items, [7, 8, 9])
    np.testing.assert_array_equal(doms, [3, 3, 3])


def test_stitch_merges_by_time():
    items, doms, _ = stitch({0: ([10, 11], [1, 3]), 1: ([20], [2])})
    np.testing.assert_array_equal(items, [10, 20, 11])
    np.testing.assert_array_equal(doms, [0, 1, 0])


def test_stitch_tie_break_exhaustive():
    # every split of three items over two domains with every ordered timestamp choice
    for assign in itertools.product((0, 1), repeat=3):
        for times in itertools.product((0.0, 1.0), repeat=3):
            per = {}
            for k, (d, t) in enumerate(zip(assign, times)):
                per.setdefault(d, ([], []))
                per[d][0].append(k)
                per[d][1].append(t)
            if any(np.any(np.diff(v[1]) < 0) for v in per.values()):
                continue
            keyed = [(t, d, k) for k, (d, t) in enumerate(zip(assign, times))]
            want = [k for _, _, k in sorted(keyed)]
            items, _, _ = stitch(per)
            assert items.tolist() == want


def test_stitch_rejects_unordered_domain():
    with pytest.raises(ValueError):
        stitch({0: ([1, 2], [2.0, 1.0])})


# ---------------------------------------------------------- cross-domain mass


def test_cross_domain_examples():
    assert cross_domain_attention_score(uniform(3), np.array([0, 0, 0])) == 0.0
    assert cross_domain_attention_score(uniform(2), np.array([0, 1])) == pytest.approx(1.0, abs=1e-15)
    assert cross_domain_attention_score(uniform(3), np.array([0, 0, 1])) == pytest.approx(4 / 3, abs=1e-15)


def test_cross_domain_rejects_mismatch():
    with pytest.raises(ValueError):
        cross_domain_attention_score(uniform(3), np.array([0, 1]))


def test_pad_and_bottleneck_positions_never_count():
    ind = cross_domain_indicator(np.array([0, 1, PAD_DOMAIN, IB_DOMAIN]))
    assert ind[:, 2:].sum() == 0 and ind[2:].sum() == 0
    assert ind[0, 1] == ind[1, 0] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_matches_double_loop_and_bounds(layers, heads, M, seed):
    g = np.random.default_rng(seed)
    dom = g.integers(-1, 3, size=M)
    att = random_attention(g, layers, heads, M, (dom >= 0).astype(float))
    got = cross_domain_attention_score(att, dom)
    assert abs(got - brute_cross_domain(att, dom)) < 1e-12
    assert 0.0 <= got <= M + 1e-12
    # depends only on the equality pattern of labels
    perm = g.permutation(3)
    relabel = np.where(dom >= 0, perm[np.maximum(dom, 0)], dom)
    assert cross_domain_attention_score(att, relabel) == pytest.approx(got, abs=1e-12)
    # complement: single-domain mass is what remains of the content mass
    assert attention_mass(att, dom) >= got - 1e-12


def test_batched_form_and_differentiable_penalty():
    g = np.random.default_rng(4)
    B, layers, heads, M = 3, 2, 2, 5
    dom = g.integers(0, 2, size=(B, M))
    att = np.stack([random_attention(g, layers, heads, M) for _ in range(B)])
    batched = cross_domain_attention_score(att, dom)
    for b in range(B):
        assert batched[b] == pytest.approx(brute_cross_domain(att[b], dom[b]), abs=1e-12)
    per_layer = [nx.constant(att[:, l]) for l in range(layers)]
    pen = attention_penalty(per_layer, cross_domain_indicator(dom))
    np.testing.assert_allclose(pen.data, batched, atol=1e-12)


# --------------------------------------------------------------- bottleneck


def test_ib_layout_sizes_and_mask():
    ib = build_ib_batch([{0: [1, 2, 3], 1: [4, 5]}], ib_tokens=1, num_special=6)
    assert ib.token_ids.shape == (1, 7)
    lay = ib.layouts[0]
    assert [(d, s, n) for d, s, n in lay.blocks] == [(0, 0, 3), (1, 4, 2)]
    blk = lay.block_ids()
    assert blk.tolist() == [0, 0, 0, 0, 1, 1, 1]
    same = blk[:, None] == blk[None, :]
    np.testing.assert_array_equal(ib.allowed[0], same)
    assert lay.domain_map().tolist() == [IB_DOMAIN, 0, 0, 0, IB_DOMAIN, 1, 1]
    assert ib.positions[0].tolist() == [0, 1, 2, 3, 0, 1, 2]


def test_ib_batch_errors():
    with pytest.raises(ValueError):
        build_ib_batch([{0: [1]}], ib_tokens=0, num_special=4)
    with pytest.raises(ValueError):
        build_ib_batch([{0: [1], 1: []}], ib_tokens=1, num_special=4)
    with pytest.raises(ValueError):
        build_ib_batch([{0: [1, 2, 3]}], ib_tokens=1, num_special=4, max_len=3)


def test_ib_score_examples():
    lay = IBLayout(1, [(0, 0, 2)])
    assert ib_cross_domain_score(uniform(3), lay) == pytest.approx(2 / 3, abs=1e-15)
    eye = np.eye(3)[None, None]
    assert ib_cross_domain_score(eye, lay) == 0.0
    two = IBLayout(1, [(0, 0, 2), (1, 3, 2)])
    att = np.zeros((1, 1, 6, 6))
    att[..., :3, :3] = 1 / 3
    att[..., 3:, 3:] = 1 / 3
    assert ib_cross_domain_score(att, two) == pytest.approx(2 * ib_cross_domain_score(uniform(3), lay), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_ib_score_matches_triple_loop(T, lengths, seed):
    g = np.random.default_rng(seed)
    blocks, start = [], 0
    for d, n in enumerate(lengths):
        blocks.append((d, start, n))
        start += T + n
    lay = IBLayout(T, blocks)
    att = random_attention(g, 2, 2, lay.length)
    want = brute_ib_score(att, [(s, n) for _, s, n in blocks], T)
    assert abs(ib_cross_domain_score(att, lay) - want) < 1e-12
    # the indicator marks exactly the item-row, bottleneck-column entries
    assert ib_indicator([lay], lay.length).sum() == T * sum(lengths)


def test_combine_examples():
    v = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(combine_ib([v]), v)
    np.testing.assert_array_equal(combine_ib([v, -v]), np.zeros((2, 3)))
    w = np.ones((2, 3))
    np.testing.assert_array_equal(combine_ib([v, w]), combine_ib([w, v]))
    with pytest.raises(ValueError):
        combine_ib([v, np.ones((3, 3))])


def ib_model(seed=0, layers=2):
    cfg = ModelConfig(vocab_size=20, max_seq_len=8, embed_dim=4, num_layers=layers, num_heads=2,
                      objective=MASKED, num_domains=2, ib_tokens=2)
    s = init_state(cfg, np.random.default_rng(seed))
    return s.with_arrays({k: v * (25.0 if k.endswith("_emb") else 1.0) for k, v in s.arrays().items()})


def run_ib(state, per_domain, combine):
    cfg = state.config
    ib = build_ib_batch(per_domain, cfg.ib_tokens, cfg.num_special, max_len=cfg.max_seq_len)
    out = encode(ib.token_ids, state, valid=ib.valid, allowed=ib.allowed, positions=ib.positions,
                 combine=ib.combine if combine else None)
    return out.hidden.data, ib


def test_isolation_without_combine():
    s = ib_model()
    both, ib = run_ib(s, [{0: [1, 2, 3], 1: [11, 12]}], combine=False)
    alone, _ = run_ib(s, [{0: [1, 2, 3]}], combine=False)
    np.testing.assert_allclose(both[0, :5], alone[0, :5], atol=1e-12)
    other, _ = run_ib(s, [{1: [11, 12]}], combine=False)
    np.testing.assert_allclose(both[0, 5:], other[0], atol=1e-12)


def test_combine_sums_bottleneck_states_between_layers():
    s = ib_model(layers=1)
    per = [{0: [1, 2, 3], 1: [11, 12]}]
    plain, ib = run_ib(s, per, combine=False)
    mixed, _ = run_ib(s, per, combine=True)
    T = 2
    starts = [st_ for _, st_, _ in ib.layouts[0].blocks]
    for t in range(T):
        want = combine_ib([plain[0, s0 + t] for s0 in starts])
        for s0 in starts:
            np.testing.assert_allclose(mixed[0, s0 + t], want, atol=1e-12)
    items = ib.layouts[0].domain_map() >= 0
    np.testing.assert_array_equal(mixed[0, items], plain[0, items])


def test_combine_lets_information_cross_blocks():
    s = ib_model()
    a, _ = run_ib(s, [{0: [1, 2, 3], 1: [11, 12]}], combine=True)
    b, _ = run_ib(s, [{0: [1, 2, 3], 1: [14, 12]}], combine=True)
    assert np.max(np.abs(a[0, :5] - b[0, :5])) > 1e-6
