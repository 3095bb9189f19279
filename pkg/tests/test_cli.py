"""CLI: config strictness, exit codes, datagen/merge subcommands, determinism
of file outputs."""

import json
from pathlib import Path

import numpy as np
import pytest

from vlmloop import checkpoint as C
from vlmloop import cli
from vlmloop import data as D
from vlmloop.config import parse_config_text
from vlmloop.errors import ConfigError


def run_cli(*argv):
    return cli.main(list(argv))


class TestConfigFormat:
    def test_typed_values(self):
        text = "seed = 3\nlr = 1e-3\nlora = true\nvariant = no_mlp\n"
        values = parse_config_text(text)
        assert values == {"seed": 3, "lr": 1e-3, "lora": True, "variant": "no_mlp"}

    def test_comments_and_blanks(self):
        values = parse_config_text("# header\n\nseed = 1  # trailing\n")
        assert values == {"seed": 1}

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("seed 1\n")

    def test_unknown_key_fails_closed(self):
        with pytest.raises(ConfigError, match="unknown config keys: sede"):
            cli.make_run_config({"sede": 1, "seed": 1}, {})

    def test_seed_mandatory(self):
        with pytest.raises(ConfigError, match="seed"):
            cli.make_run_config({"out": "x"}, {})

    def test_type_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            cli.make_run_config({"seed": 1, "steps": "many"}, {})

    def test_int_accepted_for_float_field(self):
        cfg = cli.make_run_config({"seed": 1, "lr": 1}, {})
        assert cfg.lr == 1.0 and isinstance(cfg.lr, float)


class TestExitCodes:
    def test_unknown_config_key_exits_2(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 1\nbogus_key = 2\n")
        assert run_cli("datagen", "--config", str(cfg)) == 2

    def test_missing_dataset_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"seed = 1\nout = {tmp_path / 'out'}\n")
        code = run_cli("pretrain", "--config", str(cfg))
        assert code == 2
        assert "dataset" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, tmp_path):
        assert run_cli("train", "--config", str(tmp_path / "nope.cfg")) == 2

    def test_missing_seed_exits_2(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("out = somewhere\n")
        assert run_cli("datagen", "--config", str(cfg)) == 2


class TestDatagen:
    def test_writes_all_artifacts(self, tmp_path):
        out = tmp_path / "data"
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"seed = 5\nout = {out}\nsamples = 24\nval_samples = 8\nevents = 12\n")
        assert run_cli("datagen", "--config", str(cfg)) == 0
        train = D.read_samples(out / "train.jsonl")
        assert len(train) == 24
        assert len(D.read_samples(out / "val.jsonl")) == 8
        captions = D.read_captions(out / "captions.jsonl")
        assert len(captions) == 12
        items = D.read_mcq(out / "mcq.jsonl")
        assert len(items) == 24  # two per event

    def test_deterministic_files(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cfg = tmp_path / f"{name}.cfg"
            cfg.write_text(f"seed = 9\nout = {out}\nsamples = 12\nval_samples = 4\nevents = 8\n")
            assert run_cli("datagen", "--config", str(cfg)) == 0
            outs.append(out)
        for fname in ("train.jsonl", "val.jsonl", "captions.jsonl", "mcq.jsonl"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes(), fname

    def test_seed_changes_content(self, tmp_path):
        blobs = []
        for seed in (1, 2):
            out = tmp_path / f"s{seed}"
            cfg = tmp_path / f"s{seed}.cfg"
            cfg.write_text(f"seed = {seed}\nout = {out}\nsamples = 12\nval_samples = 4\nevents = 8\n")
            run_cli("datagen", "--config", str(cfg))
            blobs.append((out / "train.jsonl").read_bytes())
        assert blobs[0] != blobs[1]


class TestMerge:
    def make_ckpt(self, path, seed=1):
        from vlmloop.config import micro_config
        from vlmloop.model import build_params
        from vlmloop.rng import Stream

        cfg = micro_config()
        params = build_params(cfg, Stream(seed), adapters=True, lora=True)
        C.save(C.from_params(params, cfg.hash64(), step=1), path)

    def test_merge_identical_reproduces_input_tensors(self, tmp_path):
        a = tmp_path / "a.ckpt"
        self.make_ckpt(a)
        out = tmp_path / "m.ckpt"
        assert run_cli("merge", str(a), str(a), "--out-file", str(out)) == 0
        ca, cm = C.load(a), C.load(out)
        for name in ca.tensors:
            assert ca.tensors[name].tobytes() == cm.tensors[name].tobytes()

    def test_merge_missing_file_fails(self, tmp_path):
        a = tmp_path / "a.ckpt"
        self.make_ckpt(a)
        assert run_cli("merge", str(a), str(tmp_path / "nope.ckpt"),
                       "--out-file", str(tmp_path / "m.ckpt")) == 2


class TestGradcheckCommand:
    def test_exits_zero_and_prints_both_precisions(self, capsys):
        assert run_cli("gradcheck", "--seed", "4") == 0
        out = capsys.readouterr().out
        assert "float64" in out and "float32" in out
        assert "ok" in out
