"""Causal LM: masking, adapter gating, decoding, hint extraction, partition."""

import numpy as np
import pytest

from vlmloop import data as D
from vlmloop import language as L
from vlmloop import pipeline as P
from vlmloop import vision as V
from vlmloop.config import ModelConfig
from vlmloop.errors import ContractError
from vlmloop.language import SequenceLayout, Span
from vlmloop.model import (build_params, param_budget, param_shapes,
                           set_trainable_partition)
from vlmloop.rng import Stream
from vlmloop.tensor import Tensor


@pytest.fixture(scope="module")
def setup():
    cfg = ModelConfig()
    params = build_params(cfg, Stream(31), adapters=True, lora=True)
    return cfg, params


def image_tokens(cfg, params, seed=0):
    rng = Stream(seed).child("img").generator()
    img = V.ImageGrid(rng.random((36, 48, cfg.channels)).astype(np.float32))
    _, tokens, grid = V.encode_image(params, cfg, img)
    return tokens, grid


def text_layout(cfg, n=10, seed=1):
    rng = Stream(seed).child("ids").generator()
    ids = rng.integers(6, cfg.vocab_size, size=n)
    return SequenceLayout(ids.astype(np.int64), [])


class TestCausality:
    def test_future_tokens_do_not_change_past_logits(self, setup):
        cfg, params = setup
        layout = text_layout(cfg, n=12)
        logits_a, _ = L.forward(params, cfg, layout, [], lora_enabled=False)
        ids2 = layout.ids.copy()
        ids2[8:] = (ids2[8:] + 17) % cfg.vocab_size
        logits_b, _ = L.forward(params, cfg, SequenceLayout(ids2, []), [],
                                lora_enabled=False)
        assert logits_a.data[:8].tobytes() == logits_b.data[:8].tobytes()
        assert not np.array_equal(logits_a.data[8:], logits_b.data[8:])


class TestLora:
    def test_fresh_adapter_is_noop_bitwise(self, setup):
        cfg, params = setup
        layout = text_layout(cfg)
        on, _ = L.forward(params, cfg, layout, [], lora_enabled=True)
        off, _ = L.forward(params, cfg, layout, [], lora_enabled=False)
        assert on.data.tobytes() == off.data.tobytes()

    def test_disabled_equals_model_without_adapters(self, setup):
        cfg, params = setup
        bare = build_params(cfg, Stream(31), adapters=False, lora=False)
        layout = text_layout(cfg)
        with_adapters, _ = L.forward(params, cfg, layout, [], lora_enabled=False)
        without, _ = L.forward(bare, cfg, layout, [], lora_enabled=False)
        assert with_adapters.data.tobytes() == without.data.tobytes()

    def test_trained_adapter_changes_enabled_logits_only(self, setup):
        cfg, params = setup
        rng = Stream(32).child("lora").generator()
        name = "lora.block0.q.up.w"
        saved = params[name].data.copy()
        params[name].data = (rng.standard_normal(saved.shape) * 0.1).astype(saved.dtype)
        try:
            layout = text_layout(cfg)
            on, _ = L.forward(params, cfg, layout, [], lora_enabled=True)
            off, _ = L.forward(params, cfg, layout, [], lora_enabled=False)
            assert not np.array_equal(on.data, off.data)
            bare = build_params(cfg, Stream(31), adapters=False, lora=False)
            base, _ = L.forward(bare, cfg, layout, [], lora_enabled=False)
            assert off.data.tobytes() == base.data.tobytes()
        finally:
            params[name].data = saved


class TestSpans:
    def test_unfilled_span_rejected(self, setup):
        cfg, params = setup
        ids = np.zeros(16, dtype=np.int64)
        layout = SequenceLayout(ids, [Span(0, 12, "original")])
        with pytest.raises(ContractError):
            L.forward(params, cfg, layout, [], lora_enabled=False)

    def test_wrong_span_width_rejected(self, setup):
        cfg, params = setup
        ids = np.zeros(16, dtype=np.int64)
        layout = SequenceLayout(ids, [Span(0, 12, "original")])
        bad = Tensor(np.zeros((12, cfg.d_llm + 1), dtype=np.float32))
        with pytest.raises(ContractError):
            L.forward(params, cfg, layout, [bad], lora_enabled=False)

    def test_overlapping_spans_rejected(self):
        with pytest.raises(ContractError):
            SequenceLayout(np.zeros(10, dtype=np.int64),
                           [Span(0, 6, "original"), Span(4, 4, "reasoned")])


class TestExtractHint:
    def test_rows_returned_in_order(self, setup):
        cfg, params = setup
        tokens, _ = image_tokens(cfg, params)
        t = tokens.shape[0]
        layout = P.pass1_layout(D.tokenize("what color is the square"), t, False)
        _, hidden = L.forward(params, cfg, layout, [tokens], lora_enabled=False)
        hint = L.extract_hint(hidden, layout)
        assert hint.shape == (t, cfg.d_llm)
        np.testing.assert_array_equal(hint.data, hidden.data[0:t])

    def test_prompt_context_changes_hint(self, setup):
        cfg, params = setup
        tokens, _ = image_tokens(cfg, params)
        t = tokens.shape[0]
        l1 = P.pass1_layout(D.tokenize("what color is the square"), t, True)
        l2 = P.pass1_layout(D.tokenize("what shape is the red object"), t, True)
        _, h1 = L.forward(params, cfg, l1, [tokens], lora_enabled=False)
        _, h2 = L.forward(params, cfg, l2, [tokens], lora_enabled=False)
        z1, z2 = L.extract_hint(h1, l1), L.extract_hint(h2, l2)
        assert not np.array_equal(z1.data, z2.data)

    def test_hint_shape_for_any_prompt_length(self, setup):
        cfg, params = setup
        tokens, _ = image_tokens(cfg, params)
        t = tokens.shape[0]
        for words in ("describe", "what color is the square",
                      "what color is the shape left of the diamond"):
            layout = P.pass1_layout(D.tokenize(words), t, False)
            _, hidden = L.forward(params, cfg, layout, [tokens], lora_enabled=False)
            assert L.extract_hint(hidden, layout).shape == (t, cfg.d_llm)

    def test_multiple_original_spans_rejected(self, setup):
        cfg, params = setup
        tokens, _ = image_tokens(cfg, params)
        t = tokens.shape[0]
        layout = P.pass2_layout(np.array([7, 8]), t, "duplicate_image_baseline",
                                False, None)
        _, hidden = L.forward(params, cfg, layout, [tokens, tokens], lora_enabled=False)
        with pytest.raises(ContractError):
            L.extract_hint(hidden, layout)


class TestGreedyDecode:
    def test_deterministic(self, setup):
        cfg, params = setup
        layout = text_layout(cfg, n=6)
        a = L.greedy_decode(params, cfg, layout, [], 6, D.EOS_ID)
        b = L.greedy_decode(params, cfg, layout, [], 6, D.EOS_ID)
        assert a == b

    def test_runaway_eos_stops_generation(self, setup):
        cfg, params = setup
        saved = params["lm.norm.b"].data.copy()
        # bias the final hidden state so the EOS logit dominates everywhere
        params["lm.norm.b"].data = (params["lm.tok"].data[D.EOS_ID] * 50.0)
        try:
            layout = text_layout(cfg, n=6)
            out = L.greedy_decode(params, cfg, layout, [], 10, D.EOS_ID)
            assert out == [D.EOS_ID]
        finally:
            params["lm.norm.b"].data = saved

    def test_tie_breaks_to_lowest_id(self, setup):
        cfg, params = setup
        saved_tok = params["lm.tok"].data.copy()
        params["lm.tok"].data = np.zeros_like(saved_tok)  # all logits exactly tie
        try:
            layout = text_layout(cfg, n=4)
            out = L.greedy_decode(params, cfg, layout, [], 1, D.EOS_ID)
            assert out == [0]
        finally:
            params["lm.tok"].data = saved_tok

    def test_max_new_respected(self, setup):
        cfg, params = setup
        layout = text_layout(cfg, n=5)
        out = L.greedy_decode(params, cfg, layout, [], 3, eos_id=-1)
        assert len(out) == 3


class TestPartition:
    def test_trainable_set_is_adapters_only(self, setup):
        cfg, params = setup
        report = set_trainable_partition(params)
        trainables = {n for n, p in params.items() if p.requires_grad}
        assert trainables == {n for n in params if n.split(".")[0]
                              in ("reasoner", "unmerger", "lora")}
        assert report["trainable"] + report["frozen"] == \
            sum(p.data.size for p in params.values())

    def test_partition_counts_match_analytic_budget(self, setup):
        cfg, params = setup
        report = set_trainable_partition(params)
        budget = param_budget(cfg, lora=True)
        assert report["trainable"] == budget["trainable"]
        assert report["frozen"] == budget["backbone"]

    def test_without_lora_trainables_shrink(self):
        cfg = ModelConfig()
        with_lora = param_budget(cfg, lora=True)["trainable"]
        without = param_budget(cfg, lora=False)["trainable"]
        assert without < with_lora

    def test_shape_table_matches_instantiation(self, setup):
        cfg, params = setup
        table = dict(param_shapes(cfg, adapters=True, lora=True))
        assert set(table) == set(params)
        for name, shape in table.items():
            assert params[name].data.shape == tuple(shape)
