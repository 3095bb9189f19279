"""Shared fixtures.

The toy backbone is pretrained once and cached on disk under tests/_cache so
repeated suite runs skip the multi-minute stage-0 job.  Bump CACHE_VERSION
whenever a change affects pretraining output (init rules, data rendering,
optimizer schedule); the model-config hash, seed, and step count are already
part of the key.
"""

from dataclasses import dataclass
from pathlib import Path

import pytest

from vlmloop import checkpoint as C
from vlmloop import data as D
from vlmloop import experiments as X
from vlmloop import navsim as N
from vlmloop.config import ModelConfig
from vlmloop.rng import Stream

CACHE_VERSION = 3
PRETRAIN_SEED = 42
PRETRAIN_STEPS = 100000
TRAIN_SAMPLES = 4000
VAL_SAMPLES = 64

TASK_MIX = ("describe", "describe", "describe", "describe", "describe",
            "vqa_color", "vqa_relation", "vqa_shape", "mcq", "navigate")


def generate_mixture(stream: Stream, count: int) -> list[D.Sample]:
    out = []
    for i in range(count):
        kind = TASK_MIX[i % len(TASK_MIX)]
        if kind == "navigate":
            out.append(N.gen_nav_sample(stream.child(f"s{i}")))
        else:
            out.append(D.gen_scene(stream.child(f"s{i}"), kind))
    return out


@dataclass
class ToyBundle:
    mcfg: ModelConfig
    backbone: C.Checkpoint
    backbone_path: Path
    train_samples: list[D.Sample]
    val_samples: list[D.Sample]
    train_path: Path
    val_path: Path
    captions_path: Path
    mcq_path: Path


@pytest.fixture(scope="session")
def toy_bundle() -> ToyBundle:
    mcfg = ModelConfig()
    cache = Path(__file__).parent / "_cache"
    cache.mkdir(exist_ok=True)
    tag = f"v{CACHE_VERSION}_{mcfg.hash64():016x}_s{PRETRAIN_SEED}_n{PRETRAIN_STEPS}"
    ckpt_path = cache / f"backbone_{tag}.ckpt"
    train_path = cache / f"train_{tag}.jsonl"
    val_path = cache / f"val_{tag}.jsonl"
    captions_path = cache / f"captions_{tag}.jsonl"
    mcq_path = cache / f"mcq_{tag}.jsonl"

    if not train_path.exists():
        root = Stream(PRETRAIN_SEED)
        D.write_samples(train_path, generate_mixture(root.child("mix"), TRAIN_SAMPLES))
        D.write_samples(val_path, generate_mixture(root.child("val_mix"), VAL_SAMPLES))
        caps = D.gen_captions(root.child("events"), 188)
        D.write_captions(captions_path, caps)
        D.write_mcq(mcq_path, D.build_mcq(caps, root.child("mcq")))
    train_samples = D.read_samples(train_path)
    val_samples = D.read_samples(val_path)

    if not ckpt_path.exists():
        params, _ = X.pretrain(mcfg, PRETRAIN_SEED, train_samples, PRETRAIN_STEPS)
        ckpt = C.Checkpoint(config_hash=mcfg.hash64(), step=PRETRAIN_STEPS,
                            tensors={n: p.data.copy() for n, p in params.items()})
        C.save(ckpt, ckpt_path)
    backbone = C.load(ckpt_path, expect_hash=mcfg.hash64())

    return ToyBundle(mcfg=mcfg, backbone=backbone, backbone_path=ckpt_path,
                     train_samples=train_samples, val_samples=val_samples,
                     train_path=train_path, val_path=val_path,
                     captions_path=captions_path, mcq_path=mcq_path)
