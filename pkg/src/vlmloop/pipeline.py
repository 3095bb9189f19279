"""Two-pass orchestration.

Pass 1 runs the LM (adapters enabled when configured) over the query and the
image tokens and extracts the hidden rows of the image span.  The feedback
module turns those rows into an additive patch-space perturbation; a second
encoder pass under that perturbation produces a second set of image tokens,
and the LM — adapters always off, hard-wired at the call site — consumes the
query plus both image blocks.  The label cross-entropy of this second pass is
the only loss; pass 1 stays inside the gradient graph so adapter gradients
flow through the extracted hint.

Variants: full_method, no_original_image (second pass sees only the feedback
image), no_mlp (hint projected straight through the unmerger), image_first /
prompt_first (input ordering), duplicate_image_baseline (same encoding twice,
no feedback), plain_baseline (single pass).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from . import language as L
from . import reasoner as R
from . import tensor as T
from . import vision as V
from .checkpoint import Checkpoint
from .config import ModelConfig
from .errors import CheckpointError, ConfigError, ContractError, DivergenceError
from .language import SequenceLayout, Span
from .model import (TRAINABLE_PREFIXES, attach_adapters, build_params,
                    set_trainable_partition, trainable_items)
from .optim import AdamW
from .rng import Stream
from .tensor import Tensor, no_grad

VARIANTS = (
    "full_method",
    "no_original_image",
    "no_mlp",
    "image_first",
    "prompt_first",
    "duplicate_image_baseline",
    "plain_baseline",
)

BASELINE_VARIANTS = ("duplicate_image_baseline", "plain_baseline")

SWEEP_LRS = (1e-2, 10.0 ** -2.5, 1e-3, 10.0 ** -3.5, 1e-4, 10.0 ** -4.5, 1e-5)


@dataclass
class PipelineConfig:
    variant: str = "full_method"
    lora: bool = True
    lr: float = 1e-3
    steps: int = 0  # 0 means one epoch over the training set
    seed: int = 0
    ordering: str = "auto"  # auto | image_first | prompt_first
    weight_decay: float = 0.01

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.ordering not in ("auto", "image_first", "prompt_first"):
            raise ConfigError(f"bad ordering {self.ordering!r}")

    @property
    def uses_hint(self) -> bool:
        return self.variant not in BASELINE_VARIANTS

    @property
    def prompt_first(self) -> bool:
        if self.ordering != "auto":
            return self.ordering == "prompt_first"
        return self.variant == "prompt_first"

    @property
    def trains(self) -> bool:
        return self.uses_hint


@dataclass
class PipelineState:
    mcfg: ModelConfig
    pcfg: PipelineConfig
    params: dict[str, Tensor]
    optimizer: AdamW
    stream: Stream
    step: int = 0
    partition: dict = field(default_factory=dict)
    last_trace: dict = field(default_factory=dict)


def new_state(mcfg: ModelConfig, pcfg: PipelineConfig,
              backbone: Checkpoint | None = None,
              stream: Stream | None = None) -> PipelineState:
    """Build a run state: backbone (loaded or fresh), feedback module and
    adapters per variant, frozen/trainable partition, optimizer.  A caller
    may pass a derived stream (sweep arms, for instance) instead of the
    default one rooted at the run seed."""
    if stream is None:
        stream = Stream(pcfg.seed)
    with_adapters = pcfg.uses_hint
    with_lora = with_adapters and pcfg.lora
    params = build_params(mcfg, stream, adapters=with_adapters, lora=with_lora)
    if pcfg.variant == "no_mlp":
        for name in [n for n in params if n.startswith("reasoner.")]:
            del params[name]
    if backbone is not None:
        ckpt_io.load_into(params, backbone)
    partition = set_trainable_partition(params)
    opt = AdamW(lr=pcfg.lr, weight_decay=pcfg.weight_decay)
    return PipelineState(mcfg=mcfg, pcfg=pcfg, params=params, optimizer=opt,
                         stream=stream, partition=partition)


def has_lora(params: dict[str, Tensor]) -> bool:
    return any(n.startswith("lora.") for n in params)


# --------------------------------------------------------------------------
# sequence templates
# --------------------------------------------------------------------------


def _img_block(t: int) -> list[int]:
    return [D.IMG_ID] * t


def pass1_layout(query_ids: np.ndarray, t: int, prompt_first: bool) -> SequenceLayout:
    q = list(query_ids)
    if prompt_first:
        ids = q + _img_block(t) + [D.IMG_SEP_ID]
        span = Span(len(q), t, "original")
    else:
        ids = _img_block(t) + [D.IMG_SEP_ID] + q
        span = Span(0, t, "original")
    return SequenceLayout(np.array(ids, dtype=np.int64), [span])


def pass2_layout(query_ids: np.ndarray, t: int, variant: str, prompt_first: bool,
                 label_ids: np.ndarray | None) -> SequenceLayout:
    """Second-pass template.  Appends the answer marker and, when training,
    the label tokens; `label_start` points at the first label position."""
    q = list(query_ids)

    if variant == "no_original_image":
        blocks = [("reasoned", t)]
    elif variant == "duplicate_image_baseline":
        blocks = [("original", t), ("original", t)]
    elif variant == "plain_baseline":
        blocks = [("original", t)]
    else:
        blocks = [("original", t), ("reasoned", t)]

    ids: list[int] = []
    spans: list[Span] = []
    if prompt_first:
        ids.extend(q)
    for source, length in blocks:
        spans.append(Span(len(ids), length, source))
        ids.extend(_img_block(length))
        ids.append(D.IMG_SEP_ID)
    if not prompt_first:
        ids.extend(q)
    ids.append(D.ANS_ID)
    label_start = None
    if label_ids is not None and len(label_ids):
        label_start = len(ids)
        ids.extend(int(i) for i in label_ids)
    return SequenceLayout(np.array(ids, dtype=np.int64), spans, label_start=label_start)


def span_fill(layout: SequenceLayout, original: Tensor,
              reasoned: Tensor | None) -> list[Tensor]:
    values = []
    for s in sorted(layout.spans, key=lambda s: s.start):
        if s.source == "original":
            values.append(original)
        else:
            if reasoned is None:
                raise ContractError("layout has a reasoned span but no reasoned tokens")
            values.append(reasoned)
    return values


# --------------------------------------------------------------------------
# the two passes
# --------------------------------------------------------------------------


def _label_loss(logits: Tensor, layout: SequenceLayout) -> Tensor:
    if layout.label_start is None:
        raise ContractError("layout carries no label positions")
    n = len(layout)
    rows = T.slice_rows(logits, 0, n - 1)
    targets = layout.ids[1:]
    keep = np.arange(1, n) >= layout.label_start
    return T.softmax_ce(rows, targets, keep)


def _first_pass(state: PipelineState, pe: Tensor, orig_tokens: Tensor,
                grid: tuple[int, int], query_ids: np.ndarray, training: bool,
                step_stream: Stream) -> tuple[Tensor, Tensor, dict]:
    """Hint extraction and feedback: returns (reasoned_tokens, hint, trace)."""
    mcfg, pcfg, params = state.mcfg, state.pcfg, state.params
    t = orig_tokens.shape[0]
    l1 = pass1_layout(query_ids, t, pcfg.prompt_first)
    lora_on = pcfg.lora and has_lora(params)
    _, hidden = L.forward(params, mcfg, l1, [orig_tokens], lora_enabled=lora_on)
    z = L.extract_hint(hidden, l1)
    if pcfg.variant == "no_mlp":
        r_out = z
    else:
        r_out = R.reason(params, mcfg, z, training=training, stream=step_stream)
    delta = R.unmerge(params, mcfg, r_out, grid)
    reasoned = V.reencode(params, mcfg, pe, delta, grid)
    trace = {
        "pass1_lora": lora_on,
        "reason_identity": r_out is z,
        "hint_rms": float(np.sqrt(np.mean(z.data.astype(np.float64) ** 2))),
        "delta_rms": float(np.sqrt(np.mean(delta.data.astype(np.float64) ** 2))),
    }
    return reasoned, z, trace


def _gate_stats(state: PipelineState, z: Tensor | None) -> str:
    if z is None or "reasoner.gate.w" not in state.params:
        return "no gate in this variant"
    g = 1.0 / (1.0 + np.exp(-np.clip(z.data @ state.params["reasoner.gate.w"].data, -60, 60)))
    return f"gate mean={g.mean():.4f} min={g.min():.4f} max={g.max():.4f}"


def train_step(state: PipelineState, sample: D.Sample,
               trace_hook=None) -> dict:
    """One optimization step on one sample.  Backbone tensors never receive
    gradients; the adapters are updated through the second-pass loss alone."""
    mcfg, pcfg, params = state.mcfg, state.pcfg, state.params
    step_stream = state.stream.child(f"step{state.step}")
    query_ids = D.tokenize(sample.query)
    label_ids = np.concatenate([D.tokenize(sample.label), [D.EOS_ID]])

    pe, orig_tokens, grid = V.encode_image(params, mcfg, sample.image)
    t = orig_tokens.shape[0]

    z = None
    reasoned = None
    trace: dict = {"variant": pcfg.variant, "step": state.step}
    if pcfg.uses_hint:
        reasoned, z, t1 = _first_pass(state, pe, orig_tokens, grid, query_ids,
                                      training=True, step_stream=step_stream)
        trace.update(t1)

    layout2 = pass2_layout(query_ids, t, pcfg.variant, pcfg.prompt_first, label_ids)
    trace["pass2_spans"] = [s.source for s in layout2.spans]
    # Second pass always runs the base LM: this call site has no adapter toggle.
    logits2, _ = L.forward(params, mcfg, layout2, span_fill(layout2, orig_tokens, reasoned),
                           lora_enabled=False)
    loss = _label_loss(logits2, layout2)

    if not np.isfinite(loss.data):
        raise DivergenceError(
            f"non-finite loss at step {state.step} (variant {pcfg.variant}); "
            + _gate_stats(state, z))

    T.backward(loss)
    grads: dict[str, np.ndarray] = {}
    norms: dict[str, float] = {}
    for name, p in trainable_items(params):
        if p.grad is not None:
            grads[name] = p.grad
            group = name.split(".", 1)[0]
            norms[group] = norms.get(group, 0.0) + float(np.sum(p.grad.astype(np.float64) ** 2))
    state.optimizer.step(params, grads)
    for _, p in trainable_items(params):
        p.grad = None

    state.step += 1
    trace["loss"] = float(loss.data)
    state.last_trace = trace
    if trace_hook is not None:
        trace_hook(trace)
    return {"loss": float(loss.data),
            "grad_norms": {k: float(np.sqrt(v)) for k, v in norms.items()},
            "trace": trace}


def eval_loss(state: PipelineState, sample: D.Sample) -> float:
    """Label cross-entropy of the full pipeline in eval mode (no dropout,
    no gradients)."""
    mcfg, pcfg, params = state.mcfg, state.pcfg, state.params
    with no_grad():
        query_ids = D.tokenize(sample.query)
        label_ids = np.concatenate([D.tokenize(sample.label), [D.EOS_ID]])
        pe, orig_tokens, grid = V.encode_image(params, mcfg, sample.image)
        reasoned = None
        if pcfg.uses_hint:
            reasoned, _, _ = _first_pass(state, pe, orig_tokens, grid, query_ids,
                                         training=False, step_stream=state.stream)
        layout2 = pass2_layout(query_ids, orig_tokens.shape[0], pcfg.variant,
                               pcfg.prompt_first, label_ids)
        logits2, _ = L.forward(params, mcfg, layout2,
                               span_fill(layout2, orig_tokens, reasoned),
                               lora_enabled=False)
        return float(_label_loss(logits2, layout2).data)


def infer(state: PipelineState, image: V.ImageGrid, query: str,
          max_new: int = 8, trace_hook=None) -> dict:
    """Greedy two-pass inference: hint, feedback encoding, then decoding over
    the query plus both image blocks.  Baselines skip the feedback pass."""
    mcfg, pcfg, params = state.mcfg, state.pcfg, state.params
    with no_grad():
        query_ids = D.tokenize(query)
        pe, orig_tokens, grid = V.encode_image(params, mcfg, image)
        t = orig_tokens.shape[0]
        reasoned = None
        trace: dict = {"variant": pcfg.variant}
        hint_stats: dict = {}
        if pcfg.uses_hint:
            reasoned, z, t1 = _first_pass(state, pe, orig_tokens, grid, query_ids,
                                          training=False, step_stream=state.stream)
            trace.update(t1)
            hint_stats = {"hint_rms": t1["hint_rms"], "delta_rms": t1["delta_rms"]}
        layout2 = pass2_layout(query_ids, t, pcfg.variant, pcfg.prompt_first, None)
        trace["pass2_spans"] = [s.source for s in layout2.spans]
        answer = L.greedy_decode(params, mcfg, layout2,
                                 span_fill(layout2, orig_tokens, reasoned),
                                 max_new=max_new, eos_id=D.EOS_ID, lora_enabled=False)
    state.last_trace = trace
    if trace_hook is not None:
        trace_hook(trace)
    return {"answer_ids": answer, "answer_text": D.detokenize(answer),
            "hint_stats": hint_stats, "trace": trace}


# --------------------------------------------------------------------------
# analytic FLOP accounting (forward, matmul-dominant terms only)
# --------------------------------------------------------------------------


def flop_report(cfg: ModelConfig, num_patches: int, query_len: int,
                label_len: int = 0) -> dict:
    """Forward FLOPs (2*m*n*k per matmul; softmax/normalization ignored) for
    the one-pass baseline versus the two-pass method at matched sizes."""
    if num_patches % cfg.merge:
        raise ConfigError(f"{num_patches} patches not divisible by merge {cfg.merge}")
    t = num_patches // cfg.merge
    d, v = cfg.d_llm, cfg.vocab_size

    def lm_flops(s: int) -> float:
        per_block = 8 * s * d * d + 4 * s * s * d + 6 * s * d * cfg.d_ff
        return cfg.n_lm_blocks * per_block + 2 * s * d * v

    def ve_flops(p: int) -> float:
        de = cfg.d_embed
        patch = 2 * p * (cfg.patch_size ** 2 * cfg.channels) * de
        per_block = 8 * p * de * de + 4 * p * p * de + 6 * p * de * cfg.enc_d_ff
        merge = 2 * (p // cfg.merge) * (cfg.merge * de) * d
        proj = 2 * (p // cfg.merge) * d * d
        return patch + cfg.n_enc_blocks * per_block + merge + proj

    reason_flops = 18 * t * d * d
    unmerge_flops = 2 * t * d * (cfg.merge * cfg.d_embed)

    s_plain = t + 1 + query_len + 1 + label_len
    s1 = t + 1 + query_len
    s2 = 2 * t + 2 + query_len + 1 + label_len

    baseline = ve_flops(num_patches) + lm_flops(s_plain)
    pass1 = ve_flops(num_patches) + lm_flops(s1) + reason_flops + unmerge_flops
    pass2 = ve_flops(num_patches) + lm_flops(s2)
    method = pass1 + pass2
    return {
        "baseline": baseline,
        "pass1": pass1,
        "pass2": pass2,
        "method": method,
        "ratio": method / baseline,
        "feedback_share": (reason_flops + unmerge_flops) / method,
    }


# --------------------------------------------------------------------------
# checkpoint interpolation
# --------------------------------------------------------------------------


def merge_checkpoints(a: Checkpoint, b: Checkpoint, weight: float = 0.5) -> Checkpoint:
    """Elementwise convex combination over the trainable tensors (the
    feedback module and adapters; backbones must match bitwise).  Computed in
    float64 so merge(x, x) reproduces x exactly."""
    if not 0.0 <= weight <= 1.0:
        raise ContractError(f"merge weight must lie in [0, 1], got {weight}")
    if a.config_hash != b.config_hash:
        raise CheckpointError("cannot merge checkpoints with different config hashes")
    if set(a.tensors) != set(b.tensors):
        raise CheckpointError("cannot merge checkpoints with different tensor tables")
    merged: dict[str, np.ndarray] = {}
    for name, ta in a.tensors.items():
        tb = b.tensors[name]
        if ta.shape != tb.shape:
            raise CheckpointError(f"{name}: shape {ta.shape} != {tb.shape}")
        if name.startswith(TRAINABLE_PREFIXES):
            mixed = weight * ta.astype(np.float64) + (1.0 - weight) * tb.astype(np.float64)
            merged[name] = mixed.astype(ta.dtype)
        else:
            if not np.array_equal(ta, tb):
                raise CheckpointError(f"backbone tensor {name} differs between checkpoints")
            merged[name] = ta.copy()
    return Checkpoint(config_hash=a.config_hash, step=max(a.step, b.step),
                      tensors=merged)


def state_checkpoint(state: PipelineState, with_optimizer: bool = False) -> Checkpoint:
    return ckpt_io.from_params(state.params, state.mcfg.hash64(), state.step,
                               state.optimizer if with_optimizer else None)
