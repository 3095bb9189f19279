"""Binary checkpoint format: round-trips, hash guard, merge arithmetic."""

import numpy as np
import pytest

from vlmloop import checkpoint as C
from vlmloop import pipeline as P
from vlmloop.config import ModelConfig, micro_config
from vlmloop.errors import CheckpointError, ContractError
from vlmloop.model import build_params
from vlmloop.rng import Stream


def make_ckpt(seed=1, cfg=None):
    cfg = cfg or micro_config()
    params = build_params(cfg, Stream(seed), adapters=True, lora=True)
    rng = Stream(seed).child("randomize").generator()
    for name, p in params.items():
        if name.startswith(("reasoner.", "unmerger.", "lora.")):
            p.data = rng.standard_normal(p.data.shape).astype(np.float32)
    return C.from_params(params, cfg.hash64(), step=7)


class TestRoundTrip:
    def test_save_load_save_bitwise(self, tmp_path):
        ckpt = make_ckpt()
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        C.save(ckpt, p1)
        loaded = C.load(p1)
        C.save(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()
        assert loaded.step == 7
        for name, arr in ckpt.tensors.items():
            assert loaded.tensors[name].tobytes() == arr.tobytes()

    def test_optimizer_state_round_trips(self, tmp_path):
        cfg = micro_config()
        pcfg = P.PipelineConfig(seed=3)
        state = P.new_state(cfg, pcfg)
        from vlmloop.verify import micro_sample
        P.train_step(state, micro_sample(cfg))
        ckpt = P.state_checkpoint(state, with_optimizer=True)
        C.save(ckpt, tmp_path / "o.ckpt")
        loaded = C.load(tmp_path / "o.ckpt")
        assert loaded.opt_step == 1
        assert set(loaded.opt_tensors) == set(ckpt.opt_tensors)

    def test_magic_guard(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            C.load(path)

    def test_truncation_guard(self, tmp_path):
        ckpt = make_ckpt()
        path = tmp_path / "t.ckpt"
        C.save(ckpt, path)
        path.write_bytes(path.read_bytes()[:50])
        with pytest.raises(CheckpointError):
            C.load(path)

    def test_hash_mismatch_refused_unless_forced(self, tmp_path):
        ckpt = make_ckpt()
        path = tmp_path / "h.ckpt"
        C.save(ckpt, path)
        with pytest.raises(CheckpointError):
            C.load(path, expect_hash=ckpt.config_hash + 1)
        loaded = C.load(path, expect_hash=ckpt.config_hash + 1, force=True)
        assert loaded.config_hash == ckpt.config_hash

    def test_float64_narrowing_refused_by_default(self, tmp_path):
        ckpt = make_ckpt()
        ckpt.tensors["reasoner.gate.w"] = ckpt.tensors["reasoner.gate.w"].astype(np.float64)
        with pytest.raises(CheckpointError):
            C.save(ckpt, tmp_path / "n.ckpt")
        C.save(ckpt, tmp_path / "n.ckpt", allow_narrowing=True)


class TestMerge:
    def test_merge_identical_is_bitwise_identity(self):
        a = make_ckpt(seed=4)
        b = make_ckpt(seed=4)
        merged = P.merge_checkpoints(a, b, 0.5)
        for name, arr in a.tensors.items():
            assert merged.tensors[name].tobytes() == arr.tobytes()

    def test_midpoint(self):
        a, b = make_ckpt(seed=5), make_ckpt(seed=5)
        a.tensors["reasoner.gate.w"] = np.full_like(a.tensors["reasoner.gate.w"], 1.0)
        b.tensors["reasoner.gate.w"] = np.full_like(b.tensors["reasoner.gate.w"], 3.0)
        merged = P.merge_checkpoints(a, b, 0.5)
        assert np.all(merged.tensors["reasoner.gate.w"] == 2.0)

    def test_weight_symmetry(self):
        a, b = make_ckpt(seed=6), make_ckpt(seed=7)
        # align backbones: merge requires identical frozen tensors
        for name in b.tensors:
            if not name.startswith(("reasoner.", "unmerger.", "lora.")):
                b.tensors[name] = a.tensors[name].copy()
        m1 = P.merge_checkpoints(a, b, 0.25)
        m2 = P.merge_checkpoints(b, a, 0.75)
        for name in m1.tensors:
            assert m1.tensors[name].tobytes() == m2.tensors[name].tobytes()

    def test_exact_mean_to_machine_precision(self):
        a, b = make_ckpt(seed=8), make_ckpt(seed=9)
        for name in b.tensors:
            if not name.startswith(("reasoner.", "unmerger.", "lora.")):
                b.tensors[name] = a.tensors[name].copy()
        merged = P.merge_checkpoints(a, b, 0.5)
        for name in merged.tensors:
            if name.startswith(("reasoner.", "unmerger.", "lora.")):
                expected = ((a.tensors[name].astype(np.float64)
                             + b.tensors[name].astype(np.float64)) / 2).astype(np.float32)
                np.testing.assert_array_equal(merged.tensors[name], expected)

    def test_hash_mismatch_rejected(self):
        a, b = make_ckpt(seed=10), make_ckpt(seed=10)
        b.config_hash += 1
        with pytest.raises(CheckpointError):
            P.merge_checkpoints(a, b)

    def test_table_mismatch_rejected(self):
        a, b = make_ckpt(seed=11), make_ckpt(seed=11)
        del b.tensors["reasoner.gate.w"]
        with pytest.raises(CheckpointError):
            P.merge_checkpoints(a, b)

    def test_backbone_divergence_rejected(self):
        a, b = make_ckpt(seed=12), make_ckpt(seed=12)
        b.tensors["lm.tok"] = b.tensors["lm.tok"] + 1.0
        with pytest.raises(CheckpointError):
            P.merge_checkpoints(a, b)

    def test_weight_out_of_range(self):
        a = make_ckpt(seed=13)
        with pytest.raises(ContractError):
            P.merge_checkpoints(a, a, weight=1.5)
