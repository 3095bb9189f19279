"""Transformer building blocks shared by the vision encoder and the LM.

Both towers use the same pre-norm block: attention with a residual, then a
gated (GELU) MLP with a residual.  The LM passes a causal mask and may
splice low-rank adapters onto its query/value projections; the encoder
attends bidirectionally and never carries adapters.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = T.matmul(x, w)
    if b is not None:
        out = T.add(out, b)
    return out


def lora_delta(x: Tensor, down: Tensor, up: Tensor, alpha: float, rank: int) -> Tensor:
    return T.scale(T.matmul(T.matmul(x, down), up), alpha / rank)


def transformer_block(params: dict[str, Tensor], prefix: str, x: Tensor,
                      n_heads: int, mask: np.ndarray | None,
                      adapters: dict[str, tuple[Tensor, Tensor, float, int]] | None = None,
                      ) -> Tensor:
    """One pre-norm block.  `adapters` maps 'q'/'v' to (down, up, alpha, rank)
    factors added onto the corresponding projection output."""
    h = T.layernorm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    q = T.matmul(h, params[f"{prefix}.attn.wq"])
    k = T.matmul(h, params[f"{prefix}.attn.wk"])
    v = T.matmul(h, params[f"{prefix}.attn.wv"])
    if adapters:
        if "q" in adapters:
            q = T.add(q, lora_delta(h, *adapters["q"]))
        if "v" in adapters:
            v = T.add(v, lora_delta(h, *adapters["v"]))
    attn = T.matmul(T.attention(q, k, v, n_heads, mask), params[f"{prefix}.attn.wo"])
    x = T.add(x, attn)

    h = T.layernorm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    gated = T.mul(T.gelu(T.matmul(h, params[f"{prefix}.mlp.win.w"])),
                  T.matmul(h, params[f"{prefix}.mlp.wgate.w"]))
    return T.add(x, T.matmul(gated, params[f"{prefix}.mlp.wout.w"]))


def causal_mask(n: int, dtype) -> np.ndarray:
    """Additive mask: position i may attend to positions <= i."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = T.MASK_VALUE
    return m
