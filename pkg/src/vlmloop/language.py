"""Toy causal decoder LM over interleaved text and image tokens.

Sequences are described by a `SequenceLayout`: token ids plus the image spans
whose embedding rows are supplied externally (projected encoder tokens).
LoRA adapters sit on the query/value projections and are applied only when a
forward pass explicitly enables them; disabled passes never touch the adapter
tensors, so the gate is identity by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ContractError
from .nn import causal_mask, transformer_block
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class Span:
    start: int
    length: int
    source: str  # "original" | "reasoned"

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class SequenceLayout:
    """Token ids with image spans; span positions hold placeholder ids that
    are never embedded (their rows come from the vision side)."""

    ids: np.ndarray
    spans: list[Span] = field(default_factory=list)
    label_start: int | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        prev_stop = 0
        for s in sorted(self.spans, key=lambda s: s.start):
            if s.start < prev_stop or s.stop > len(self.ids):
                raise ContractError(f"span {s} overlaps or exceeds sequence of {len(self.ids)}")
            prev_stop = s.stop
            if s.source not in ("original", "reasoned"):
                raise ContractError(f"unknown span source {s.source!r}")

    def __len__(self) -> int:
        return len(self.ids)


def _adapters(params: dict[str, Tensor], cfg: ModelConfig, block: int):
    out = {}
    for t in ("q", "v"):
        down = params.get(f"lora.block{block}.{t}.down.w")
        up = params.get(f"lora.block{block}.{t}.up.w")
        if down is not None and up is not None:
            out[t] = (down, up, cfg.lora_alpha, cfg.lora_rank)
    return out or None


def forward(params: dict[str, Tensor], cfg: ModelConfig, layout: SequenceLayout,
            span_values: list[Tensor], lora_enabled: bool) -> tuple[Tensor, Tensor]:
    """Causal forward pass.  Returns (logits [S, V], final hidden states [S, d]).

    `span_values` must supply one [length, d_llm] tensor per layout span, in
    span order.
    """
    n = len(layout)
    if n > cfg.max_seq:
        raise ContractError(f"sequence of {n} exceeds max_seq={cfg.max_seq}")
    spans = sorted(layout.spans, key=lambda s: s.start)
    if len(span_values) != len(spans):
        raise ContractError(f"{len(spans)} spans but {len(span_values)} filled")

    segments: list[Tensor] = []
    cursor = 0
    for s, val in zip(spans, span_values):
        if val.shape != (s.length, cfg.d_llm):
            raise ContractError(f"span at {s.start} expects ({s.length}, {cfg.d_llm}), got {val.shape}")
        if s.start > cursor:
            segments.append(T.embed(params["lm.tok"], layout.ids[cursor:s.start]))
        segments.append(val)
        cursor = s.stop
    if cursor < n:
        segments.append(T.embed(params["lm.tok"], layout.ids[cursor:n]))

    x = segments[0] if len(segments) == 1 else T.concat_rows(segments)
    x = T.add(x, T.slice_rows(params["lm.pos"], 0, n))

    mask = causal_mask(n, cfg.np_dtype)
    for i in range(cfg.n_lm_blocks):
        adapters = _adapters(params, cfg, i) if lora_enabled else None
        x = transformer_block(params, f"lm.block{i}", x, cfg.n_heads, mask, adapters)

    hidden = T.layernorm(x, params["lm.norm.g"], params["lm.norm.b"])
    if cfg.tied_head:
        logits = T.matmul(hidden, T.transpose(params["lm.tok"]))
    else:
        logits = T.matmul(hidden, params["lm.head.w"])
    return logits, hidden


def extract_hint(hidden: Tensor, layout: SequenceLayout) -> Tensor:
    """The final-layer rows at the (single) original image span, in order."""
    originals = [s for s in layout.spans if s.source == "original"]
    if len(originals) != 1:
        raise ContractError(f"hint extraction needs exactly one original span, found {len(originals)}")
    s = originals[0]
    return T.slice_rows(hidden, s.start, s.stop)


def greedy_decode(params: dict[str, Tensor], cfg: ModelConfig, layout: SequenceLayout,
                  span_values: list[Tensor], max_new: int, eos_id: int,
                  lora_enabled: bool = False) -> list[int]:
    """Argmax generation; ties resolve to the lowest token id; stops at EOS
    or after max_new tokens."""
    if max_new < 1:
        raise ContractError("max_new must be >= 1")
    ids = list(layout.ids)
    out: list[int] = []
    with no_grad():
        for _ in range(max_new):
            cur = SequenceLayout(np.asarray(ids, dtype=np.int64), list(layout.spans))
            logits, _ = forward(params, cfg, cur, span_values, lora_enabled)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            ids.append(nxt)
            if nxt == eos_id:
                break
    return out
