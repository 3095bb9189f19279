"""Named parameter store for the full model.

One shape table drives both the instantiated parameter build and the analytic
parameter budget, so the two can never drift apart.  Naming convention:
`.w` weight matrix, `.b` bias vector, `.g` layernorm gain.

Groups:
  enc.*        vision encoder + patch merger      (backbone, frozen after stage 0)
  proj.*       encoder-to-LM token projector      (backbone)
  lm.*         causal language model              (backbone)
  reasoner.*   gated MLP of the feedback loop     (trainable)
  unmerger.*   token-to-patch back-projection     (trainable)
  lora.*       low-rank attention adapters        (trainable)
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .config import ModelConfig
from .rng import Stream
from .tensor import Tensor

BACKBONE_PREFIXES = ("enc.", "proj.", "lm.")
TRAINABLE_PREFIXES = ("reasoner.", "unmerger.", "lora.")

LORA_TARGETS = ("q", "v")

# Matrices that start at zero so the feedback path is exactly inert at step 0
# (the gated-MLP output) and the adapters are exact no-ops (LoRA up factors).
_ZERO_INIT_SUFFIXES = ("reasoner.down.w",)


def _block_shapes(prefix: str, d: int, d_ff: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (f"{prefix}.ln1.g", (d,)),
        (f"{prefix}.ln1.b", (d,)),
        (f"{prefix}.attn.wq", (d, d)),
        (f"{prefix}.attn.wk", (d, d)),
        (f"{prefix}.attn.wv", (d, d)),
        (f"{prefix}.attn.wo", (d, d)),
        (f"{prefix}.ln2.g", (d,)),
        (f"{prefix}.ln2.b", (d,)),
        (f"{prefix}.mlp.win.w", (d, d_ff)),
        (f"{prefix}.mlp.wgate.w", (d, d_ff)),
        (f"{prefix}.mlp.wout.w", (d_ff, d)),
    ]


def param_shapes(cfg: ModelConfig, adapters: bool = True, lora: bool = True,
                 ) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table for every tensor the model owns."""
    p2c = cfg.patch_size * cfg.patch_size * cfg.channels
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("enc.patch.w", (p2c, cfg.d_embed)),
        ("enc.patch.b", (cfg.d_embed,)),
        ("enc.pos", (cfg.max_patches, cfg.d_embed)),
    ]
    for i in range(cfg.n_enc_blocks):
        shapes += _block_shapes(f"enc.block{i}", cfg.d_embed, cfg.enc_d_ff)
    shapes += [
        ("enc.merge.w", (cfg.merge * cfg.d_embed, cfg.d_llm)),
        ("enc.merge.b", (cfg.d_llm,)),
        ("proj.w", (cfg.d_llm, cfg.d_llm)),
        ("proj.b", (cfg.d_llm,)),
        ("lm.tok", (cfg.vocab_size, cfg.d_llm)),
        ("lm.pos", (cfg.max_seq, cfg.d_llm)),
    ]
    for i in range(cfg.n_lm_blocks):
        shapes += _block_shapes(f"lm.block{i}", cfg.d_llm, cfg.d_ff)
    shapes += [
        ("lm.norm.g", (cfg.d_llm,)),
        ("lm.norm.b", (cfg.d_llm,)),
    ]
    if not cfg.tied_head:
        shapes.append(("lm.head.w", (cfg.d_llm, cfg.vocab_size)))
    if adapters:
        d = cfg.d_llm
        shapes += [
            ("reasoner.gate.w", (d, d)),
            ("reasoner.up.w", (d, 2 * d)),
            ("reasoner.mid.w", (2 * d, 2 * d)),
            ("reasoner.down.w", (2 * d, d)),
            ("unmerger.w", (d, cfg.merge * cfg.d_embed)),
        ]
        if lora:
            for i in range(cfg.n_lm_blocks):
                for t in LORA_TARGETS:
                    shapes.append((f"lora.block{i}.{t}.down.w", (d, cfg.lora_rank)))
                    shapes.append((f"lora.block{i}.{t}.up.w", (cfg.lora_rank, d)))
    return shapes



def _init_std(name: str, shape: tuple[int, ...]) -> float:
    """Zero for the inert matrices (feedback output projection, LoRA up
    factors), small flat for the token table and the feedback gate, stronger
    flat for positional tables (position info must stay visible next to
    unit-norm image tokens), fan-in scaled for everything else.  A flat tiny
    std attenuates every matmul by sigma*sqrt(d) at desk-scale widths; on the
    feedback value path that compounds to a ~1e4x dead channel, so only the
    gate keeps the small flat init."""
    if name in _ZERO_INIT_SUFFIXES or (name.startswith("lora.") and name.endswith(".up.w")):
        return 0.0
    if name in ("lm.tok", "reasoner.gate.w"):
        return 0.02
    if name in ("lm.pos", "enc.pos"):
        return 0.1
    return 1.0 / float(np.sqrt(shape[0]))


def build_params(cfg: ModelConfig, stream: Stream, adapters: bool = True,
                 lora: bool = True) -> dict[str, Tensor]:
    """Instantiate all parameters with seeded per-tensor substreams.

    Biases are zero, gains one; weight matrices draw from a per-tensor
    normal (see `_init_std`).  A freshly built model behaves exactly like
    its backbone: the feedback output projection and the LoRA up factors
    are zero."""
    dt = cfg.np_dtype
    init = stream.child("init")
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg, adapters=adapters, lora=lora):
        if name.endswith(".g"):
            data = np.ones(shape, dtype=dt)
        elif name.endswith(".b"):
            data = np.zeros(shape, dtype=dt)
        else:
            std = _init_std(name, shape)
            if std == 0.0:
                data = np.zeros(shape, dtype=dt)
            else:
                g = init.child(name).generator()
                data = (g.standard_normal(shape) * std).astype(dt)
        params[name] = Tensor(data, requires_grad=False)
    return params


def attach_adapters(params: dict[str, Tensor], cfg: ModelConfig, stream: Stream,
                    lora: bool = True) -> None:
    """Add freshly initialized feedback-module and adapter tensors to a
    backbone-only parameter store."""
    fresh = build_params(cfg, stream, adapters=True, lora=lora)
    for name, t in fresh.items():
        if name.startswith(TRAINABLE_PREFIXES) and name not in params:
            params[name] = t


def set_trainable_partition(params: dict[str, Tensor]) -> dict:
    """Freeze the backbone, mark the feedback module + adapters trainable.

    Returns per-group tensor and scalar counts; the two partitions always sum
    to the whole store.
    """
    report = {"trainable": 0, "frozen": 0, "trainable_tensors": 0,
              "frozen_tensors": 0, "groups": {}}
    for name, t in params.items():
        trainable = name.startswith(TRAINABLE_PREFIXES)
        t.requires_grad = trainable
        group = name.split(".", 1)[0]
        report["groups"].setdefault(group, 0)
        report["groups"][group] += t.data.size
        if trainable:
            report["trainable"] += t.data.size
            report["trainable_tensors"] += 1
        else:
            report["frozen"] += t.data.size
            report["frozen_tensors"] += 1
    return report


def trainable_items(params: dict[str, Tensor]) -> Iterable[tuple[str, Tensor]]:
    return ((n, t) for n, t in params.items() if t.requires_grad)


def param_budget(cfg: ModelConfig, lora: bool = True) -> dict:
    """Analytic parameter counts from dimensions alone (nothing instantiated).

    `ratio` is trainable size relative to the base model (backbone), the
    quantity the extra-parameter claim is stated against.
    """
    backbone = 0
    trainable = 0
    for name, shape in param_shapes(cfg, adapters=True, lora=lora):
        n = int(np.prod(shape))
        if name.startswith(TRAINABLE_PREFIXES):
            trainable += n
        else:
            backbone += n
    return {
        "trainable": trainable,
        "backbone": backbone,
        "total": backbone + trainable,
        "ratio": trainable / backbone,
    }
