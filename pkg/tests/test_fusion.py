"""Mapping MLP, byte-exact prompt rendering, and the spliced encoding."""

from pathlib import Path

import numpy as np
import pytest

from sasrecllm.fusion import (
    HISTORY_TITLE_LIMIT,
    ITEM_PROVENANCE,
    TEXT_PROVENANCE,
    USER_PROVENANCE,
    ItemSlot,
    MappingConfig,
    MappingLayer,
    PromptError,
    TextSpan,
    UserSlot,
    build_prompt,
    hybrid_encode,
    textual_encode,
)
from sasrecllm.gradcheck import gradcheck
from sasrecllm.llm import ContextError, LlmConfig, TinyDecoder, Vocab, tokenize
from sasrecllm.rng import RngStream
from sasrecllm.sasrec import SasrecConfig, SasrecModel
from sasrecllm.tensor import Tensor, tsum

FIXTURES = Path(__file__).parent / "fixtures"


def tiny_system(num_items=6, d1=4, d2=6, ptn=1, seed=0, vocab_texts=()):
    sasrec = SasrecModel(SasrecConfig(num_items=num_items, d1=d1, n=4, blocks=1,
                                      heads=2, dropout=0.0), RngStream(seed))
    vocab = Vocab.build(list(vocab_texts) + [
        "#Question: A user has given high ratings to the following items: none. "
        "Additionally, user preferences are encoded in the feature . Using all "
        "available information, predict whether the user would enjoy the item "
        'titled with the feature ? Answer with "Yes" or "No". #Answer:',
    ])
    llm = TinyDecoder(LlmConfig(vocab_size=len(vocab), d2=d2, layers=1, heads=2,
                                context_len=96), RngStream(seed + 1))
    mapping = MappingLayer(MappingConfig(d1=d1, d2=d2, proj_token_num=ptn), RngStream(seed + 2))
    return sasrec, mapping, llm, vocab


class TestMappingLayer:
    def test_zero_weights_give_bias_slices(self):
        cfg = MappingConfig(d1=3, d2=4, proj_token_num=2)
        layer = MappingLayer(cfg, RngStream(0))
        layer.w1.data[:] = 0.0
        layer.w2.data[:] = 0.0
        layer.b2.data[:] = np.arange(8, dtype=np.float32)
        out = layer.map_embedding(Tensor(np.ones(3, dtype=np.float32)))
        assert out.shape == (2, 4)
        assert np.array_equal(out.data, np.arange(8, dtype=np.float32).reshape(2, 4))

    def test_single_token_base_case(self):
        layer = MappingLayer(MappingConfig(d1=3, d2=5), RngStream(1))
        out = layer.map_embedding(Tensor(RngStream(2).normal(3).astype(np.float32)))
        assert out.shape == (1, 5)

    def test_matches_two_matmul_oracle(self):
        cfg = MappingConfig(d1=4, d2=6, d_exp=7, proj_token_num=3)
        layer = MappingLayer(cfg, RngStream(3))
        for p in layer.parameters():
            p.astype_(np.float64)
        x = RngStream(4).normal(4)
        out = layer.map_embedding(Tensor(x, dtype=np.float64)).data
        hidden = np.maximum(x @ layer.w1.data + layer.b1.data, 0.0)
        expected = (hidden @ layer.w2.data + layer.b2.data).reshape(3, 6)
        assert np.max(np.abs(out - expected)) < 1e-10

    def test_reshape_is_bijective(self):
        cfg = MappingConfig(d1=3, d2=4, proj_token_num=2)
        layer = MappingLayer(cfg, RngStream(5))
        out = layer.map_embedding(Tensor(RngStream(6).normal(3).astype(np.float32)))
        assert out.data.reshape(-1).shape == (8,)

    def test_dimension_error(self):
        layer = MappingLayer(MappingConfig(d1=3, d2=4), RngStream(7))
        with pytest.raises(ValueError, match="expects"):
            layer.map_embedding(Tensor(np.ones(5, dtype=np.float32)))

    def test_requires_d1_below_d2(self):
        with pytest.raises(ValueError):
            MappingConfig(d1=8, d2=8)


class TestBuildPrompt:
    def test_two_title_golden(self):
        p = build_prompt(["The Matrix", "Inception"], "Blade Runner", user=7, item=42)
        golden = (FIXTURES / "prompt_two_titles_hybrid.txt").read_text(encoding="utf-8")
        assert p.render(include_ids=True) == golden

    def test_textual_golden(self):
        p = build_prompt(["The Matrix", "Inception"], "Blade Runner", user=7, item=42)
        golden = (FIXTURES / "prompt_two_titles_textual.txt").read_text(encoding="utf-8")
        assert p.render(include_ids=False) == golden

    def test_empty_history_golden(self):
        p = build_prompt([], "Blade Runner", user=7, item=42)
        golden = (FIXTURES / "prompt_empty_history_hybrid.txt").read_text(encoding="utf-8")
        assert p.render(include_ids=True) == golden

    def test_slots_once_each_in_order(self):
        p = build_prompt(["A"], "B", user=1, item=2)
        slots = [s for s in p.segments if isinstance(s, (UserSlot, ItemSlot))]
        assert len(slots) == 2
        assert isinstance(slots[0], UserSlot) and slots[0].user == 1
        assert isinstance(slots[1], ItemSlot) and slots[1].item == 2

    def test_empty_target_title_rejected(self):
        with pytest.raises(PromptError):
            build_prompt(["A"], "", user=1, item=2)

    def test_title_list_truncated_to_most_recent(self):
        titles = [f"t{i}" for i in range(15)]
        p = build_prompt(titles, "x", user=1, item=2)
        text = p.render()
        assert "t4" not in text.split("items:")[1].split(".")[0]
        assert text.count("t14") == 1
        assert f"t{15 - HISTORY_TITLE_LIMIT}" in text

    def test_ends_with_answer_anchor(self):
        p = build_prompt(["A"], "B", user=1, item=2)
        assert p.render().endswith("#Answer:")
        assert isinstance(p.segments[p.answer_anchor], TextSpan)


class TestHybridEncode:
    def test_length_is_text_plus_two(self):
        sasrec, mapping, llm, vocab = tiny_system()
        p = build_prompt(["none"], "none", user=1, item=2, history_items=[1, 2])
        seq = hybrid_encode(p, sasrec, mapping, llm, vocab)
        n_text = sum(len(tokenize(s.text, vocab)) for s in p.segments if isinstance(s, TextSpan))
        assert len(seq) == n_text + 2
        counts = seq.counts()
        assert counts[USER_PROVENANCE] == 1 and counts[ITEM_PROVENANCE] == 1
        assert counts[TEXT_PROVENANCE] == n_text

    def test_proj_token_num_scales_collab_positions(self):
        sasrec, mapping, llm, vocab = tiny_system(ptn=3)
        p = build_prompt([], "none", user=1, item=2)
        seq = hybrid_encode(p, sasrec, mapping, llm, vocab)
        counts = seq.counts()
        assert counts[USER_PROVENANCE] == 3 and counts[ITEM_PROVENANCE] == 3

    def test_text_positions_match_embedding_lookup(self):
        sasrec, mapping, llm, vocab = tiny_system()
        p = build_prompt([], "none", user=1, item=2)
        seq = hybrid_encode(p, sasrec, mapping, llm, vocab)
        ids = [t for kind, t in seq.provenance if kind == TEXT_PROVENANCE]
        rows = [i for i, (kind, _) in enumerate(seq.provenance) if kind == TEXT_PROVENANCE]
        expected = llm.embed_tokens(ids).data
        assert np.array_equal(seq.embeddings.data[rows], expected)

    def test_provenance_partition(self):
        sasrec, mapping, llm, vocab = tiny_system()
        p = build_prompt(["none"], "none", user=3, item=4, history_items=[2])
        seq = hybrid_encode(p, sasrec, mapping, llm, vocab)
        assert sum(seq.counts().values()) == len(seq)

    def test_context_overflow(self):
        sasrec, mapping, llm, vocab = tiny_system()
        long_titles = ["word " * 40]
        p = build_prompt(long_titles, "none", user=1, item=2)
        with pytest.raises(ContextError):
            hybrid_encode(p, sasrec, mapping, llm, vocab)

    def test_gradient_reaches_sasrec_and_mapping(self):
        from sasrecllm.llm import predict_yes_prob
        from sasrecllm.tensor import bce_loss

        sasrec, mapping, llm, vocab = tiny_system(seed=11)
        p = build_prompt(["none"], "none", user=1, item=2, history_items=[1, 3])

        def f():
            seq = hybrid_encode(p, sasrec, mapping, llm, vocab)
            return bce_loss(predict_yes_prob(seq.embeddings, llm), 1.0)

        params = [sasrec.item_emb, sasrec.blocks[0].wq, mapping.w1, mapping.b2]
        err = gradcheck(f, params, max_coords_per_param=8, rng=RngStream(12),
                        promote=sasrec.parameters() + mapping.parameters() + llm.parameters())
        assert err < 1e-3
        # and the gradients are actually nonzero
        for p_ in (sasrec.blocks[0].wq, mapping.w1):
            p_.zero_grad()
        f().backward()
        assert np.abs(sasrec.blocks[0].wq.grad).sum() > 0
        assert np.abs(mapping.w1.grad).sum() > 0


class TestTextualEncode:
    def test_no_collab_positions(self):
        sasrec, mapping, llm, vocab = tiny_system()
        p = build_prompt(["none"], "none", user=1, item=2, history_items=[1])
        seq = textual_encode(p, llm, vocab)
        counts = seq.counts()
        assert counts[USER_PROVENANCE] == 0 and counts[ITEM_PROVENANCE] == 0

    def test_identical_regardless_of_ids(self):
        sasrec, mapping, llm, vocab = tiny_system()
        p1 = build_prompt(["none"], "none", user=1, item=2)
        p2 = build_prompt(["none"], "none", user=9, item=5)
        s1 = textual_encode(p1, llm, vocab)
        s2 = textual_encode(p2, llm, vocab)
        assert np.array_equal(s1.embeddings.data, s2.embeddings.data)

    def test_equals_hybrid_on_stripped_template(self):
        sasrec, mapping, llm, vocab = tiny_system()
        p = build_prompt(["none"], "none", user=1, item=2)
        textual = textual_encode(p, llm, vocab)
        stripped = p.render(include_ids=False)
        ids = tokenize(stripped, vocab)
        assert [t for _, t in textual.provenance] == ids
        assert np.array_equal(textual.embeddings.data, llm.embed_tokens(ids).data)
