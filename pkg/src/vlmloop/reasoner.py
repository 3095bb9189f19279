"""Language-to-vision feedback module.

A bias-free gated MLP transforms the LM's image-token hidden states row by
row — sigmoid gate times a GELU value path whose hidden width is exactly
twice the LM width — and the unmerger projects each output row back into
`merge` consecutive patch-embedding rows (the counting inverse of the patch
merger).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .model import param_budget  # re-exported: budget lives with the shape table
from .rng import Stream
from .tensor import Tensor

__all__ = ["reason", "unmerge", "param_budget"]


def reason(params: dict[str, Tensor], cfg: ModelConfig, z: Tensor,
           training: bool, stream: Stream | None = None) -> Tensor:
    """Gated MLP over hint rows: sigmoid(z Wg) * ((dropout((gelu(z W1)) W2)) Wp).

    Dropout is live only when training; eval calls are deterministic.
    """
    if z.shape[1] != cfg.d_llm:
        raise ContractError(f"hint width {z.shape[1]} != d_llm {cfg.d_llm}")
    gate = T.sigmoid(T.matmul(z, params["reasoner.gate.w"]))
    h = T.gelu(T.matmul(z, params["reasoner.up.w"]))
    h = T.matmul(h, params["reasoner.mid.w"])
    if training and cfg.reasoner_dropout > 0.0:
        if stream is None:
            raise ContractError("training-mode dropout needs a random stream")
        h = T.dropout(h, cfg.reasoner_dropout, True, stream.child("reasoner_dropout").generator())
    value = T.matmul(h, params["reasoner.down.w"])
    return T.mul(gate, value)


def unmerge(params: dict[str, Tensor], cfg: ModelConfig, r_out: Tensor,
            grid: tuple[int, int]) -> Tensor:
    """Map each of T token rows back to its `merge` patch-space rows, the
    counting inverse of the merger's window grouping:
    [T, d_llm] -> [T*merge, d_embed] in row-major patch order."""
    from .vision import window_order

    t = r_out.shape[0]
    num_patches = grid[0] * grid[1]
    if t * cfg.merge != num_patches:
        raise ContractError(
            f"{t} tokens * merge {cfg.merge} != {num_patches} patches of the current image")
    wide = T.matmul(r_out, params["unmerger.w"])
    rows = T.reshape(wide, (num_patches, cfg.d_embed))
    order = window_order(grid, cfg.merge)
    if np.array_equal(order, np.arange(num_patches)):
        return rows
    inverse = np.empty_like(order)
    inverse[order] = np.arange(num_patches)
    return T.embed(rows, inverse)
