"""Sequential encoder: sequence standardization, attention against a naive
per-head loop, causality at the bit level, pad neutrality, and pretraining."""

import math

import numpy as np
import pytest

from sasrecllm.gradcheck import gradcheck
from sasrecllm.optim import AdamW
from sasrecllm.rng import RngStream
from sasrecllm.sasrec import (
    InteractionSequence,
    SasrecConfig,
    SasrecModel,
    SequenceError,
    attention_block,
    attention_mask,
    encoding_sequence,
    ffn_pointwise,
    pretrain_step,
    residual_sublayer,
    standardize_sequence,
)
from sasrecllm.tensor import Parameter, Tensor, tsum


def tiny_model(num_items=6, d1=4, n=4, blocks=1, heads=2, dropout=0.0, seed=0):
    cfg = SasrecConfig(num_items=num_items, d1=d1, n=n, blocks=blocks,
                       heads=heads, dropout=dropout)
    return SasrecModel(cfg, RngStream(seed))


class TestStandardize:
    def test_shift_with_padding(self):
        seq = standardize_sequence([7, 3, 9], 4)
        assert seq.items.tolist() == [0, 0, 7, 3]
        assert seq.targets.tolist() == [0, 0, 3, 9]

    def test_single_event_rejected(self):
        with pytest.raises(SequenceError):
            standardize_sequence([5], 3)

    def test_empty_rejected(self):
        with pytest.raises(SequenceError):
            standardize_sequence([], 3)

    def test_long_history_keeps_most_recent(self):
        raw = list(range(1, 31))  # 30 events
        seq = standardize_sequence(raw, 25)
        assert seq.items.tolist() == raw[4:29]
        assert seq.targets.tolist() == raw[5:30]
        assert seq.targets[-1] == raw[-1]

    def test_pad_positions_agree(self):
        seq = standardize_sequence([1, 2], 5)
        assert ((seq.items == 0) == (seq.targets == 0)).all()
        # pads are a contiguous left prefix
        nz = np.nonzero(seq.items)[0]
        assert nz.tolist() == list(range(5 - len(nz), 5))


class TestEmbed:
    def test_all_pad_with_zero_positions_is_zero(self):
        model = tiny_model()
        model.pos_emb.data[:] = 0.0
        seq = encoding_sequence([], 4)
        assert np.all(model.embed_sequence(seq).data == 0.0)

    def test_one_hot_lookup(self):
        model = tiny_model(num_items=3, d1=4, n=2)
        model.item_emb.data[:] = np.eye(4, dtype=np.float32)
        model.pos_emb.data[:] = 0.0
        seq = encoding_sequence([2, 3], 2)
        out = model.embed_sequence(seq).data
        assert np.array_equal(out[0], np.eye(4)[2])
        assert np.array_equal(out[1], np.eye(4)[3])

    def test_matches_lookup_plus_add(self):
        model = tiny_model(seed=3)
        seq = standardize_sequence([1, 4, 2], 4)
        out = model.embed_sequence(seq).data
        expected = model.item_emb.data[seq.items] + model.pos_emb.data
        assert np.array_equal(out, expected)

    def test_out_of_range_id(self):
        model = tiny_model(num_items=3)
        bad = InteractionSequence(user=0, items=np.array([0, 0, 1, 7]),
                                  targets=np.zeros(4, dtype=np.int64))
        with pytest.raises(IndexError):
            model.embed_sequence(bad)


def attention_oracle(x, wq, wk, wv, heads, items):
    """Per-head python-loop attention with the causal/pad mask."""
    n, d1 = x.shape
    dh = d1 // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    out = np.zeros_like(x)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for t in range(n):
            scores = np.full(n, -np.inf)
            for j in range(n):
                if j <= t and items[j] != 0:
                    scores[j] = float(qh[t] @ kh[j]) / math.sqrt(dh)
            if np.all(np.isinf(scores)):
                continue  # fully masked row: value is irrelevant downstream
            e = np.exp(scores - scores[np.isfinite(scores)].max())
            w = e / e.sum()
            out[t, sl] = w @ vh
    return out


class TestAttention:
    def test_single_position_is_value_projection(self):
        rng = RngStream(1)
        model = tiny_model(n=1, seed=1)
        x = Tensor(rng.normal((1, 4)).astype(np.float64), dtype=np.float64)
        mask = attention_mask(np.array([2]))
        out = attention_block(x, model.blocks[0], heads=2, mask=mask)
        expected = x.data @ model.blocks[0].wv.data
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_matches_per_head_loop_oracle(self):
        rng = RngStream(2)
        d1, heads, n = 8, 2, 3
        model = tiny_model(d1=d1, heads=heads, n=n, seed=2)
        b = model.blocks[0]
        for p in (b.wq, b.wk, b.wv):
            p.astype_(np.float64)
        items = np.array([3, 1, 2])
        x = Tensor(rng.normal((n, d1)), dtype=np.float64)
        out = attention_block(x, b, heads, attention_mask(items))
        expected = attention_oracle(x.data, b.wq.data, b.wk.data, b.wv.data, heads, items)
        assert np.max(np.abs(out.data - expected)) < 1e-10

    def test_causality_bit_exact(self):
        model = tiny_model(n=4, seed=4)
        items = np.array([1, 2, 3, 4])
        mask = attention_mask(items)
        rng = RngStream(5)
        base = rng.normal((4, 4)).astype(np.float32)
        x1 = Tensor(base.copy())
        perturbed = base.copy()
        perturbed[3] += 10.0
        x2 = Tensor(perturbed)
        out1 = attention_block(x1, model.blocks[0], 2, mask)
        out2 = attention_block(x2, model.blocks[0], 2, mask)
        assert np.array_equal(out1.data[:3], out2.data[:3])

    def test_pad_keys_excluded(self):
        model = tiny_model(n=3, seed=6)
        items = np.array([0, 1, 2])
        mask = attention_mask(items)
        rng = RngStream(7)
        base = rng.normal((3, 4)).astype(np.float32)
        x1 = Tensor(base.copy())
        perturbed = base.copy()
        perturbed[0] += 5.0  # pad row
        out1 = attention_block(x1, model.blocks[0], 2, mask)
        out2 = attention_block(Tensor(perturbed), model.blocks[0], 2, mask)
        assert np.array_equal(out1.data[1:], out2.data[1:])


class TestFfn:
    def test_zero_weights_give_bias(self):
        d = 4
        w1 = Parameter(np.zeros((d, d), dtype=np.float32))
        b1 = Parameter(np.zeros(d, dtype=np.float32))
        w2 = Parameter(np.zeros((d, d), dtype=np.float32))
        b2 = Parameter(np.full(d, 3.0, dtype=np.float32))
        out = ffn_pointwise(Tensor(RngStream(8).normal((5, d)).astype(np.float32)), w1, b1, w2, b2)
        assert np.allclose(out.data, 3.0)

    def test_commutes_with_row_permutation(self):
        rng = RngStream(9)
        model = tiny_model(seed=9)
        b = model.blocks[0]
        x = rng.normal((4, 4)).astype(np.float32)
        perm = np.array([2, 0, 3, 1])
        out = ffn_pointwise(Tensor(x), b.w1, b.b1, b.w2, b.b2).data
        out_perm = ffn_pointwise(Tensor(x[perm]), b.w1, b.b1, b.w2, b.b2).data
        assert np.array_equal(out[perm], out_perm)

    def test_matches_per_row_loop(self):
        rng = RngStream(10)
        model = tiny_model(seed=10)
        b = model.blocks[0]
        for p in (b.w1, b.b1, b.w2, b.b2):
            p.astype_(np.float64)
        x = rng.normal((4, 4))
        out = ffn_pointwise(Tensor(x, dtype=np.float64), b.w1, b.b1, b.w2, b.b2).data
        for i in range(4):
            row = np.maximum(x[i] @ b.w1.data + b.b1.data, 0.0) @ b.w2.data + b.b2.data
            assert np.max(np.abs(out[i] - row)) < 1e-10


class TestResidual:
    def test_zero_sublayer_is_identity(self):
        gain = Parameter(np.ones(4, dtype=np.float32))
        bias = Parameter(np.zeros(4, dtype=np.float32))
        x = Tensor(RngStream(11).normal((3, 4)).astype(np.float32))
        out = residual_sublayer(x, lambda h: h * 0.0, gain, bias, 0.0, "eval", None)
        assert np.array_equal(out.data, x.data)

    def test_identity_sublayer_eval(self):
        from sasrecllm.tensor import layer_norm

        gain = Parameter(np.ones(4, dtype=np.float64))
        bias = Parameter(np.zeros(4, dtype=np.float64))
        x = Tensor(RngStream(12).normal((3, 4)), dtype=np.float64)
        out = residual_sublayer(x, lambda h: h, gain, bias, 0.5, "eval", None)
        expected = x.data + layer_norm(x, gain, bias).data
        assert np.allclose(out.data, expected, atol=1e-12)

    def test_gradcheck_through_wrapper(self):
        model = tiny_model(seed=13)
        b = model.blocks[0]
        x = Parameter(RngStream(14).normal((3, 4)))

        def f():
            out = residual_sublayer(
                x, lambda h: ffn_pointwise(h, b.w1, b.b1, b.w2, b.b2),
                b.ln1_gain, b.ln1_bias, 0.0, "eval", None)
            return tsum(out * out)

        err = gradcheck(f, [x, b.w1, b.b1, b.w2, b.b2, b.ln1_gain, b.ln1_bias])
        assert err < 1e-3


class TestForwardHidden:
    def test_zero_blocks_returns_embeddings(self):
        model = tiny_model(blocks=0, seed=15)
        seq = standardize_sequence([1, 2, 3], 4)
        out = model.forward_hidden(seq)
        assert np.array_equal(out.data, model.embed_sequence(seq).data)

    def test_end_to_end_causality(self):
        model = tiny_model(n=4, seed=16)
        s1 = standardize_sequence([1, 2, 3, 4, 5], 4)
        s2 = standardize_sequence([1, 2, 3, 4, 6], 4)  # same inputs? no: items differ at last
        assert s1.items[:3].tolist() == s2.items[:3].tolist()
        h1 = model.forward_hidden(s1).data
        h2 = model.forward_hidden(s2).data
        assert np.array_equal(h1[:3], h2[:3])

    def test_eval_determinism(self):
        model = tiny_model(seed=17, dropout=0.2)
        seq = standardize_sequence([1, 2, 3], 4)
        a = model.forward_hidden(seq, mode="eval").data
        b = model.forward_hidden(seq, mode="eval").data
        assert np.array_equal(a, b)


class TestPrediction:
    def test_relevance_one_hot(self):
        model = tiny_model(num_items=3, d1=4)
        model.item_emb.data[:] = np.eye(4, dtype=np.float32)
        scores = model.relevance_scores(Tensor(np.eye(4, dtype=np.float32)[2]))
        assert scores.data.tolist() == [0.0, 1.0, 0.0]

    def test_relevance_matches_matmul(self):
        model = tiny_model(seed=18)
        h = Tensor(RngStream(19).normal((4,)).astype(np.float32))
        scores = model.relevance_scores(h).data
        expected = model.item_emb.data[1:] @ h.data
        assert np.allclose(scores, expected, atol=1e-6)

    def test_relevance_bilinearity(self):
        model = tiny_model(seed=20)
        model.item_emb.astype_(np.float64)
        h = RngStream(21).normal((4,))
        before = model.relevance_scores(Tensor(h, dtype=np.float64)).data.copy()
        c = 0.37
        model.item_emb.data[2] += c * h
        after = model.relevance_scores(Tensor(h, dtype=np.float64)).data
        assert after[1] - before[1] == pytest.approx(c * float(h @ h), rel=1e-9)

    def test_encode_item_one_hot(self):
        model = tiny_model(num_items=3, d1=4)
        model.item_emb.data[:] = np.eye(4, dtype=np.float32)
        assert np.array_equal(model.encode_item(2).data, np.eye(4)[2])

    def test_encode_user_deterministic(self):
        model = tiny_model(seed=22)
        a = model.encode_user([1, 2, 3]).data
        b = model.encode_user([1, 2, 3]).data
        assert np.array_equal(a, b)

    def test_encode_user_equals_last_hidden(self):
        model = tiny_model(seed=23)
        hist = [2, 4, 1]
        u = model.encode_user(hist).data
        seq = encoding_sequence(hist, model.config.n)
        hidden = model.forward_hidden(seq).data
        assert np.array_equal(u, hidden[-1])

    def test_cold_fallback_is_all_pad_encoding(self):
        model = tiny_model(seed=24)
        cold = model.encode_user([]).data
        pad_seq = encoding_sequence([], model.config.n)
        assert np.array_equal(cold, model.forward_hidden(pad_seq).data[-1])
        assert np.array_equal(model.encode_user_by_id(12345).data, cold)


class TestGradients:
    def test_block_plus_bce_gradcheck(self):
        from sasrecllm.tensor import bce_loss, sigmoid

        model = tiny_model(num_items=6, d1=4, n=4, blocks=1, heads=2, seed=25)
        seq = standardize_sequence([1, 2, 3, 4], 4)

        def f():
            loss, _ = model.sequence_loss(seq, mode="eval", rng=RngStream(1))
            return loss

        err = gradcheck(f, model.parameters())
        assert err < 1e-3

    def test_pad_embedding_gets_zero_gradient(self):
        model = tiny_model(seed=26)
        seq = standardize_sequence([1, 2], 4)  # two pad positions
        for p in model.parameters():
            p.zero_grad()
        loss, _ = model.sequence_loss(seq, mode="eval", rng=RngStream(2))
        loss.backward()
        assert np.all(model.item_emb.grad[0] == 0.0)


class TestPretrain:
    def test_reproducible_loss_sequence(self):
        def run():
            model = tiny_model(num_items=8, seed=27)
            opt = AdamW(model.parameters(), lr=1e-2)
            rng = RngStream(3)
            seqs = [standardize_sequence([1, 2, 3, 4], 4),
                    standardize_sequence([5, 6, 7], 4)]
            return [pretrain_step(seqs, model, opt, rng) for _ in range(4)]

        assert run() == run()

    def test_init_loss_near_two_ln2(self):
        model = tiny_model(num_items=50, d1=8, n=6, seed=28)
        opt = AdamW(model.parameters(), lr=0.0)
        seqs = [standardize_sequence(list(range(1, 7)), 6) for _ in range(8)]
        loss = pretrain_step(seqs, model, opt, RngStream(4))
        assert abs(loss - 2.0 * math.log(2.0)) < 0.05

    def test_learns_cyclic_pattern(self):
        # items 1..20 arranged in a cycle: i is always followed by i+1
        num_items = 20
        cfg = SasrecConfig(num_items=num_items, d1=16, n=8, blocks=1, heads=2, dropout=0.0)
        model = SasrecModel(cfg, RngStream(29))
        rng = RngStream(5)
        seqs = []
        for start in range(num_items):
            raw = [(start + k) % num_items + 1 for k in range(8)]
            seqs.append(standardize_sequence(raw, 8))
        opt = AdamW(model.parameters(), lr=5e-3)
        for _ in range(200):
            pretrain_step(seqs, model, opt, rng)
        hits = 0
        for start in range(num_items):
            raw = [(start + k) % num_items + 1 for k in range(7)]
            u = model.encode_user(raw)
            scores = model.relevance_scores(u).data
            predicted_item = int(np.argmax(scores)) + 1
            expected = (start + 7) % num_items + 1
            hits += int(predicted_item == expected)
        assert hits / num_items > 0.9
