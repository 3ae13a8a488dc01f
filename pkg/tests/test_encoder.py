import itertools

import numpy as np
import pytest

from gctf import tensor as T
from gctf.encoder import (
    SPATIAL_FIRST,
    TEMPORAL_FIRST,
    BlockParams,
    TokenSequence,
    Tokenizer,
    block_forward,
    branch_forward,
    direction_path,
    order_permutation,
    reorder,
    tokenize,
    visit_order,
)
from gctf.ssm import selective_scan_reference
from gctf.tensor import Parameter, Tensor

GRIDS = list(itertools.product(range(1, 5), repeat=3))


# -- orderings -----------------------------------------------------------------------

def test_visit_orders_2_1_2():
    assert visit_order((2, 1, 2), SPATIAL_FIRST) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert visit_order((2, 1, 2), TEMPORAL_FIRST) == [(0, 0), (1, 0), (0, 1), (1, 1)]


@pytest.mark.parametrize("order", [SPATIAL_FIRST, TEMPORAL_FIRST])
def test_permutations_are_bijections(order):
    for grid in GRIDS:
        perm = order_permutation(grid, order)
        L = int(np.prod(grid))
        assert sorted(perm.tolist()) == list(range(L))
        seq = TokenSequence(Tensor(np.zeros((L + 1, 1))), grid, order)
        np.testing.assert_array_equal(seq.permutation[seq.inverse], np.arange(L))


def test_index_formulas():
    for t, h, w in GRIDS:
        hw = h * w
        tf = visit_order((t, h, w), TEMPORAL_FIRST)
        for k, (ti, s) in enumerate(tf):
            assert k == s * t + ti
        for k, (ti, s) in enumerate(visit_order((t, h, w), SPATIAL_FIRST)):
            assert k == ti * hw + s


def test_reorder_roundtrip_bit_identical(rng):
    for grid in GRIDS:
        L = int(np.prod(grid))
        tokens = rng.normal(size=(L + 1, 3))
        seq = TokenSequence(Tensor(tokens), grid)
        tf = reorder(seq, TEMPORAL_FIRST)
        np.testing.assert_array_equal(tf.tokens.data[0], tokens[0])
        back = reorder(tf, SPATIAL_FIRST)
        np.testing.assert_array_equal(back.tokens.data, tokens)
        np.testing.assert_array_equal(tf.natural_patches().data, tokens[1:])


def test_reorder_places_tokens_by_visit_order():
    grid = (2, 1, 2)
    tokens = np.arange(5.0)[:, None]          # CLS=0, natural patches 1..4
    tf = reorder(TokenSequence(Tensor(tokens), grid), TEMPORAL_FIRST)
    # natural index of (t, s) is t*2 + s; temporal-first visits (0,0),(1,0),(0,1),(1,1)
    np.testing.assert_array_equal(tf.tokens.data[:, 0], [0, 1, 3, 2, 4])


# -- tokenizer ------------------------------------------------------------------------

def test_tokenize_minimal_video(rng):
    tok = Tokenizer.init(4, 1, (8, 8), (1, 8, 8), rng)
    seq = tokenize(rng.uniform(size=(3, 1, 8, 8)), tok)
    assert seq.tokens.shape == (2, 4)
    assert seq.grid == (1, 1, 1)


def test_tokenize_zero_video_is_embeddings(rng):
    tok = Tokenizer.init(5, 2, (4, 4), (1, 2, 2), rng)
    seq = tokenize(np.zeros((3, 2, 4, 4)), tok)
    ps, pt = tok.pos_spatial.data, tok.pos_temporal.data
    expect = [ps[0]] + [ps[1 + s] + pt[t] for t in range(2) for s in range(4)]
    np.testing.assert_array_equal(seq.tokens.data, np.array(expect))


def test_tokenize_grid_shape(rng):
    tok = Tokenizer.init(3, 4, (32, 32), (1, 16, 16), rng)
    seq = tokenize(np.zeros((3, 4, 32, 32)), tok)
    assert seq.grid == (4, 2, 2)
    assert seq.tokens.shape == (17, 3)


def test_tokenize_indivisible(rng):
    with pytest.raises(ValueError):
        Tokenizer.init(3, 2, (10, 8), (1, 8, 8), rng)
    tok = Tokenizer.init(3, 2, (8, 8), (1, 8, 8), rng)
    with pytest.raises(ValueError):
        tokenize(np.zeros((3, 2, 12, 8)), tok)


def test_tokenize_batched_matches_single(rng):
    tok = Tokenizer.init(4, 2, (4, 4), (1, 2, 2), rng)
    videos = rng.uniform(size=(3, 3, 2, 4, 4))
    batch = tokenize(videos, tok).tokens.data
    for i in range(3):
        np.testing.assert_allclose(batch[i], tokenize(videos[i], tok).tokens.data, atol=1e-15)


# -- block ------------------------------------------------------------------------------------

def _block(rng, C=8, **kw):
    return BlockParams.init(C, rng, "blk", **kw)


def _conv_ref(x, w, b):
    L, D = x.shape
    K = w.shape[1]
    out = np.tile(b, (L, 1))
    for i in range(L):
        for k in range(K):
            if i - k >= 0:
                out[i] += w[:, k] * x[i - k]
    return out


def _silu(v):
    return v / (1.0 + np.exp(-v))


def _block_ref(x, p):
    """Straight-line block: norm, projections, conv, SiLU, scan, gate, residual."""
    u = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + 1e-5) * p.norm.data
    xz = u @ p.in_proj.data
    xi, z = xz[:, :p.inner], xz[:, p.inner:]
    out = np.zeros_like(xi)
    for d, rev in ((p.fwd, False), (p.bwd, True)):
        seq = xi[::-1] if rev else xi
        c = _silu(_conv_ref(seq, d.conv_w.data, d.conv_b.data))
        y = selective_scan_reference(Tensor(c), d.proj).data
        out += (y[::-1] if rev else y) * _silu(z)
    return x + out @ p.out_proj.data


def test_block_compositional_oracle(rng):
    p = _block(rng, C=6, d_state=4)
    x = rng.normal(size=(7, 6))
    got = block_forward(TokenSequence(Tensor(x), (1, 2, 3)), p).tokens.data
    np.testing.assert_allclose(got, _block_ref(x, p), atol=1e-10)


def test_block_residual_dominance(rng):
    p = _block(rng)
    for q in p.parameters():
        q.data[...] = 0.0
    p.out_proj.data[...] = np.eye(p.inner, 8)
    x = rng.normal(size=(5, 8))
    out = block_forward(TokenSequence(Tensor(x), (1, 2, 2)), p).tokens.data
    np.testing.assert_array_equal(out, x)


def test_single_token_directions_agree(rng):
    p = _block(rng)
    xi = Tensor(rng.normal(size=(1, p.inner)))
    f = direction_path(xi, p.fwd, reverse=False).data
    b = direction_path(xi, p.fwd, reverse=True).data
    np.testing.assert_array_equal(f, b)


def test_direction_symmetry(rng):
    p = _block(rng)
    x = rng.normal(size=(6, p.inner))
    bwd = direction_path(Tensor(x), p.bwd, reverse=True).data
    fwd_on_reversed = direction_path(Tensor(x[::-1].copy()), p.bwd, reverse=False).data[::-1]
    np.testing.assert_allclose(bwd, fwd_on_reversed, atol=1e-14)


def test_block_directions_independent(rng):
    p = _block(rng)
    names = [q.name for q in p.fwd.parameters()] + [q.name for q in p.bwd.parameters()]
    assert len(set(names)) == len(names)
    assert all(a is not b for a, b in zip(p.fwd.parameters(), p.bwd.parameters()))


def test_block_channel_mismatch(rng):
    with pytest.raises(ValueError):
        block_forward(TokenSequence(Tensor(np.ones((3, 5))), (1, 1, 2)), _block(rng))


def test_block_stack_gradient_check(rng):
    blocks = [BlockParams.init(8, rng, f"b{i}") for i in range(2)]
    x = Parameter(rng.normal(size=(6, 8)), "x")
    w = Tensor(rng.normal(size=(6, 8)))
    seq = lambda: TokenSequence(x, (1, 1, 5))
    f = lambda: T.tsum(branch_forward(seq(), blocks)[0].tokens * w)
    params = [x] + [q for b in blocks for q in b.parameters()]
    err = T.finite_diff_check(f, params, eps=1e-3, richardson=True, max_coords=12, rng=np.random.default_rng(0))
    assert err < 1e-4


# -- branch ----------------------------------------------------------------------------------------

def test_branch_no_blocks(rng):
    seq = TokenSequence(Tensor(rng.normal(size=(3, 4))), (1, 1, 2))
    out, cls = branch_forward(seq, [])
    assert cls == []
    np.testing.assert_array_equal(out.tokens.data, seq.tokens.data)


def _zero_blocks(rng, n):
    blocks = [_block(rng) for _ in range(n)]
    for b in blocks:
        for q in b.parameters():
            q.data[...] = 0.0
    return blocks


@pytest.mark.parametrize("n", [1, 2])
def test_branch_skips_inactive_below_three_blocks(n, rng):
    seq = TokenSequence(Tensor(rng.normal(size=(5, 8))), (1, 2, 2))
    on, _ = branch_forward(seq, _zero_blocks(rng, n), skips=True)
    off, _ = branch_forward(seq, _zero_blocks(rng, n), skips=False)
    np.testing.assert_array_equal(on.tokens.data, off.tokens.data)


def test_branch_skips_with_identity_blocks(rng):
    # zero blocks are identities: states x, x, x + x, 2x + x
    x = rng.normal(size=(5, 8))
    seq = TokenSequence(Tensor(x), (1, 2, 2))
    off, _ = branch_forward(seq, _zero_blocks(rng, 4), skips=False)
    on, cls = branch_forward(seq, _zero_blocks(rng, 4), skips=True)
    np.testing.assert_array_equal(off.tokens.data, x)
    np.testing.assert_array_equal(on.tokens.data, 3 * x)
    np.testing.assert_array_equal(np.stack([c.data for c in cls]), np.outer([1, 1, 2, 3], x[0]))


def test_branch_cls_list(rng):
    blocks = [_block(rng) for _ in range(4)]
    seq = TokenSequence(Tensor(rng.normal(size=(5, 8))), (1, 2, 2))
    out, cls = branch_forward(seq, blocks, skips=True)
    assert len(cls) == 4
    assert all(c.shape == (8,) for c in cls)
    np.testing.assert_array_equal(cls[-1].data, out.tokens.data[0])


def test_branch_skip_adds_block_l_minus_2(rng):
    blocks = [_block(rng) for _ in range(3)]
    seq = TokenSequence(Tensor(rng.normal(size=(5, 8))), (1, 2, 2))
    s0 = block_forward(seq, blocks[0])
    s1 = block_forward(s0, blocks[1])
    s2 = block_forward(s1, blocks[2]).tokens.data + s0.tokens.data
    out, _ = branch_forward(seq, blocks, skips=True)
    np.testing.assert_allclose(out.tokens.data, s2, atol=1e-14)
