import numpy as np
import numpy.testing as npt
import pytest

from picoweave import nn
from picoweave import tensor as pt
from picoweave.tensor import Tensor


def make_mha(dim=8, heads=2, seed=0, dtype=np.float32):
    return nn.MultiHeadAttention(dim, heads, np.random.default_rng(seed), dtype=dtype)


class TestMultiHeadAttention:
    def test_single_key_returns_value_projection(self):
        mha = make_mha(dim=6, heads=1, seed=3)
        tok = Tensor(np.random.default_rng(1).normal(size=(1, 6)).astype(np.float32))
        out = mha(tok, tok, tok)
        expected = mha.wo(mha.wv(tok))
        npt.assert_allclose(out.data, expected.data, atol=1e-6)

    def test_uniform_logits_average_values(self):
        # zeroing wq makes every logit 0 -> uniform attention over 4 keys
        mha = make_mha(dim=4, heads=2, seed=5)
        mha.wq.w.data[:] = 0.0
        mha.wq.b.data[:] = 0.0
        rng = np.random.default_rng(2)
        keys = Tensor(rng.normal(size=(4, 4)).astype(np.float32))
        q = Tensor(rng.normal(size=(1, 4)).astype(np.float32))
        out = mha(q, keys, keys)
        vmean = Tensor(mha.wv(keys).data.mean(axis=0, keepdims=True))
        npt.assert_allclose(out.data, mha.wo(vmean).data, atol=1e-6)

    def test_causal_mask_blocks_future_exactly(self):
        mha = make_mha(dim=8, heads=2, seed=7)
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 8)).astype(np.float32)
        mask = np.tril(np.ones((5, 5), dtype=bool))

        out1 = mha(Tensor(x), Tensor(x), Tensor(x), mask=mask).data.copy()
        x2 = x.copy()
        x2[4] += 10.0  # only position 4 changes; queries 0..3 must not see it
        out2 = mha(Tensor(x2), Tensor(x2), Tensor(x2), mask=mask).data
        npt.assert_array_equal(out1[:4], out2[:4])
        assert not np.array_equal(out1[4], out2[4])

    def test_fully_masked_row_is_error(self):
        mha = make_mha()
        x = Tensor(np.zeros((3, 8), dtype=np.float32))
        mask = np.tril(np.ones((3, 3), dtype=bool))
        mask[1, :] = False
        with pytest.raises(ValueError, match="no attendable key"):
            mha(x, x, x, mask=mask)

    def test_attention_rows_sum_to_one(self):
        mha = make_mha(dim=8, heads=2, seed=9)
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(6, 8)).astype(np.float32))
        mask = np.tril(np.ones((6, 6), dtype=bool))
        qh = nn._split_heads(mha.wq(x), 2)
        kh = nn._split_heads(mha.wk(x), 2)
        perm = (0, 2, 1)
        logits = pt.scale(pt.matmul(qh, pt.transpose(kh, perm)), 0.5)
        attn = pt.softmax(pt.masked_fill(logits, ~mask[None, :, :]), axis=-1)
        npt.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)
        # masked entries carry exactly zero weight
        assert (attn.data[:, ~mask] == 0.0).all()


class TestTransformerBlock:
    def test_zero_layer_scale_is_identity(self):
        cfg = nn.BlockConfig(hidden_dim=8, num_heads=2, layer_scale_init=0.0)
        block = nn.TransformerBlock(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(4, 8)).astype(np.float32))
        out = block(x)
        npt.assert_array_equal(out.data, x.data)

    def test_full_drop_path_is_identity(self):
        cfg = nn.BlockConfig(hidden_dim=8, num_heads=2, drop_path_rate=0.2, layer_scale_init=1.0)
        block = nn.TransformerBlock(cfg, np.random.default_rng(0))
        block.cfg.drop_path_rate = 1.0  # exercise the degenerate rate directly
        x = Tensor(np.random.default_rng(1).normal(size=(4, 8)).astype(np.float32))
        out = block(x, training=True, rng=np.random.default_rng(2))
        npt.assert_array_equal(out.data, x.data)

    def test_eval_mode_bitwise_repeatable(self):
        cfg = nn.BlockConfig(hidden_dim=8, num_heads=2, drop_path_rate=0.2, layer_scale_init=1.0)
        block = nn.TransformerBlock(cfg, np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).normal(size=(4, 8)).astype(np.float32))
        a = block(x, training=False).data
        b = block(x, training=False).data
        assert a.tobytes() == b.tobytes()

    def test_drop_path_config_ceiling(self):
        with pytest.raises(ValueError, match="drop_path_rate"):
            nn.BlockConfig(hidden_dim=8, num_heads=2, drop_path_rate=0.5)

    def test_drop_path_eval_identity_any_rate(self):
        x = Tensor(np.ones((3, 4), dtype=np.float32))
        out = nn.drop_path(x, 0.9, training=False, rng=None)
        assert out is x

    def test_drop_path_schedule_linear(self):
        rates = nn.drop_path_schedule(0.2, 5)
        npt.assert_allclose(rates, [0.0, 0.05, 0.1, 0.15, 0.2])


def pooled_by_hand(pool: nn.AttentionPool, tokens: np.ndarray, heads: int) -> np.ndarray:
    """Single-query attention with explicit loops, as an independent oracle."""
    d = tokens.shape[1]
    dh = d // heads
    q = pool.query.data @ pool.attn.wq.w.data + pool.attn.wq.b.data
    k = tokens @ pool.attn.wk.w.data  # no key bias: softmax is shift-invariant
    v = tokens @ pool.attn.wv.w.data + pool.attn.wv.b.data
    merged = np.zeros(d)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        logits = np.array([float(q[0, sl] @ k[j, sl]) / np.sqrt(dh) for j in range(tokens.shape[0])])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        merged[sl] = sum(w[j] * v[j, sl] for j in range(tokens.shape[0]))
    return merged @ pool.attn.wo.w.data + pool.attn.wo.b.data


class TestAttentionPool:
    def test_single_token(self):
        pool = nn.AttentionPool(8, 2, np.random.default_rng(0))
        tok = Tensor(np.random.default_rng(1).normal(size=(1, 8)).astype(np.float32))
        out = pool(tok)
        expected = pool.attn.wo(pool.attn.wv(tok))
        npt.assert_allclose(out.data, expected.data.reshape(-1), atol=1e-6)

    def test_identical_tokens_match_single(self):
        pool = nn.AttentionPool(8, 2, np.random.default_rng(0))
        row = np.random.default_rng(1).normal(size=(1, 8)).astype(np.float32)
        one = pool(Tensor(row))
        many = pool(Tensor(np.repeat(row, 5, axis=0)))
        npt.assert_allclose(many.data, one.data, atol=1e-5)

    def test_matches_hand_rolled_loops(self):
        pool = nn.AttentionPool(8, 2, np.random.default_rng(3), dtype=np.float64)
        tokens = np.random.default_rng(4).normal(size=(5, 8))
        out = pool(Tensor(tokens, dtype=np.float64))
        npt.assert_allclose(out.data, pooled_by_hand(pool, tokens, heads=2), atol=1e-10)

    def test_permutation_invariance(self):
        pool = nn.AttentionPool(8, 4, np.random.default_rng(5))
        rng = np.random.default_rng(6)
        tokens = rng.normal(size=(7, 8)).astype(np.float32)
        base = pool(Tensor(tokens)).data
        for seed in range(5):
            perm = np.random.default_rng(seed).permutation(7)
            out = pool(Tensor(tokens[perm])).data
            npt.assert_allclose(out, base, atol=1e-6)

    def test_empty_token_set_is_error(self):
        pool = nn.AttentionPool(8, 2, np.random.default_rng(0))
        with pytest.raises(ValueError, match="empty"):
            pool(Tensor(np.zeros((0, 8), dtype=np.float32)))

    def test_gradient_reaches_query_and_tokens(self):
        pool = nn.AttentionPool(8, 2, np.random.default_rng(0))
        tokens = Tensor(np.random.default_rng(1).normal(size=(3, 8)).astype(np.float32), requires_grad=True)
        pt.backward(pt.tsum(pool(tokens)))
        assert pool.query.grad is not None and np.abs(pool.query.grad).sum() > 0
        assert tokens.grad is not None and np.abs(tokens.grad).sum() > 0

    def test_batched_matches_loop(self):
        pool = nn.AttentionPool(8, 2, np.random.default_rng(9))
        batch = np.random.default_rng(10).normal(size=(3, 4, 8)).astype(np.float32)
        out = pool(Tensor(batch)).data
        for i in range(3):
            npt.assert_allclose(out[i], pool(Tensor(batch[i])).data, atol=1e-6)


class TestCausalStack:
    def test_stack_causality_exact(self):
        cfg = nn.BlockConfig(hidden_dim=8, num_heads=2, layer_scale_init=1.0)
        rng = np.random.default_rng(0)
        blocks = [nn.TransformerBlock(cfg, rng) for _ in range(3)]
        mask = np.tril(np.ones((6, 6), dtype=bool))

        def run(x):
            h = Tensor(x)
            for b in blocks:
                h = b(h, mask=mask)
            return h.data

        x = np.random.default_rng(1).normal(size=(6, 8)).astype(np.float32)
        base = run(x)
        x2 = x.copy()
        x2[4:] += 3.0
        out = run(x2)
        npt.assert_array_equal(base[:4], out[:4])
