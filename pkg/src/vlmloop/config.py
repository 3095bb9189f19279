"""Model dimensions and the strict key-value config file format."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Every dimension, count, and switch for the backbone + feedback module."""

    # language model
    vocab_size: int = 512
    d_llm: int = 64
    n_lm_blocks: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq: int = 256
    tied_head: bool = True
    # vision encoder
    d_embed: int = 32
    patch_size: int = 6
    channels: int = 3
    n_enc_blocks: int = 2
    enc_heads: int = 4
    enc_d_ff: int = 64
    merge: int = 4
    max_patches: int = 128
    image_height: int = 36
    # adapters
    lora_rank: int = 4
    lora_alpha: float = 8.0
    reasoner_dropout: float = 0.1
    # numerics
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_llm % self.n_heads != 0:
            raise ConfigError(f"d_llm={self.d_llm} not divisible by n_heads={self.n_heads}")
        if self.d_embed % self.enc_heads != 0:
            raise ConfigError(f"d_embed={self.d_embed} not divisible by enc_heads={self.enc_heads}")
        if self.merge < 1:
            raise ConfigError("merge factor must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if not 0.0 <= self.reasoner_dropout < 1.0:
            raise ConfigError(f"reasoner_dropout must be in [0, 1), got {self.reasoner_dropout}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def canonical(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))

    def hash64(self) -> int:
        digest = hashlib.sha256(self.canonical().encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")


def micro_config() -> ModelConfig:
    """Smallest config on which the full two-pass graph is finite-difference
    checkable in seconds: 8-wide everywhere, one block per tower, 4 image
    tokens.  The vocabulary stays at full size so real tokenized text fits."""
    return ModelConfig(
        vocab_size=512, d_llm=8, n_lm_blocks=1, n_heads=2, d_ff=16, max_seq=96,
        d_embed=8, patch_size=4, n_enc_blocks=1, enc_heads=2, enc_d_ff=16,
        merge=2, max_patches=16, image_height=8, lora_rank=2, lora_alpha=4.0,
    )


def reference_7b_config() -> ModelConfig:
    """Dimension stand-in for a production ~7B multimodal stack; used only for
    analytic parameter and FLOP accounting, never instantiated."""
    return ModelConfig(
        vocab_size=152064, d_llm=3584, n_lm_blocks=28, n_heads=28, d_ff=18944,
        max_seq=32768, tied_head=False,
        d_embed=1280, patch_size=14, n_enc_blocks=32, enc_heads=16, enc_d_ff=5120,
        merge=4, max_patches=4096, image_height=360, lora_rank=4, lora_alpha=8.0,
    )


def parse_config_text(text: str) -> dict[str, object]:
    """Parse the flat `key = value` config format.

    Values are typed: booleans (true/false), ints, floats, otherwise strings.
    Blank lines and `#` comments are ignored.  Duplicate keys are rejected.
    """
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _typed(value)
    return out


def _typed(value: str) -> object:
    low = value.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        pass
    return value
