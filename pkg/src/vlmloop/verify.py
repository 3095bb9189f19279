"""End-to-end gradient verification of the two-pass loss.

Builds the micro model, takes one synthetic sample, and compares the analytic
gradient of the second-pass label loss with central finite differences for
every feedback-module, unmerger, and adapter tensor.  The check runs at a
generic parameter point: the zero-initialized matrices are nudged to small
random values first, otherwise both gradient routes are identically zero and
the comparison is vacuous.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import data as D
from . import language as L
from . import pipeline as P
from . import tensor as T
from . import vision as V
from .config import ModelConfig, micro_config
from .gradcheck import numeric_grad, relative_error
from .rng import Stream
from .tensor import Tensor


def micro_sample(mcfg: ModelConfig, seed: int = 5) -> D.Sample:
    """A tiny patch-aligned scene matched to the micro config's image size."""
    rng = Stream(seed).child("micro_image").generator()
    h = mcfg.image_height
    w = 2 * h  # 8x16 at the default micro config: 8 patches, 4 tokens
    pixels = rng.random((h, w, mcfg.channels)).astype(np.float32)
    return D.Sample(V.ImageGrid(pixels), "what color is the square", "red", "vqa", {})


def _two_pass_loss(state: P.PipelineState, sample: D.Sample,
                   loss_stream: Stream) -> Tensor:
    """The training-mode two-pass loss with a pinned dropout stream, so the
    function is smooth and repeatable across perturbed evaluations."""
    mcfg, params = state.mcfg, state.params
    query_ids = D.tokenize(sample.query)
    label_ids = np.concatenate([D.tokenize(sample.label), [D.EOS_ID]])
    pe, orig_tokens, grid = V.encode_image(params, mcfg, sample.image)
    reasoned, _, _ = P._first_pass(state, pe, orig_tokens, grid, query_ids,
                                   training=True, step_stream=loss_stream)
    layout2 = P.pass2_layout(query_ids, orig_tokens.shape[0], state.pcfg.variant,
                             state.pcfg.prompt_first, label_ids)
    logits2, _ = L.forward(params, mcfg, layout2,
                           P.span_fill(layout2, orig_tokens, reasoned),
                           lora_enabled=False)
    return P._label_loss(logits2, layout2)


def _conditioned_state(dtype: str, seed: int) -> P.PipelineState:
    """A generic, well-conditioned check point.

    The training initialization is useless for gradient measurement: its zero
    matrices put the loss at a stationary point of the trainable set, and the
    0.02-std backbone attenuates the feedback chain below finite-difference
    resolution.  Correctness of the backward pass is point-independent, so the
    check reinitializes every tensor at fan-in scale (times two, to keep the
    long two-tower chain from shrinking gradients).
    """
    mcfg = replace(micro_config(), dtype=dtype)
    pcfg = P.PipelineConfig(variant="full_method", lora=True, seed=seed)
    state = P.new_state(mcfg, pcfg)
    point = Stream(seed).child("check_point")
    for name, p in state.params.items():
        g = point.child(name).generator()
        if name.endswith(".w"):
            std = 2.0 / np.sqrt(p.data.shape[0])
        elif name in ("lm.tok", "lm.pos", "enc.pos"):
            std = 1.0
        elif name.endswith(".b"):
            std = 0.1
        else:
            continue  # layernorm gains stay at one
        p.data = (g.standard_normal(p.data.shape) * std).astype(p.data.dtype)
    return state


def two_pass_gradcheck(dtype: str = "float64", seed: int = 11,
                       eps: float = 1e-4) -> dict:
    """Per-tensor worst relative errors of the full two-pass gradient on the
    micro config.  Returns {"max_err": float, "per_tensor": {name: err}}.

    The analytic gradient is computed in `dtype`.  The central-difference
    reference is always evaluated on a float64 twin of the identical point
    (same values, same dropout stream): differencing a float32 forward cannot
    resolve gradients that sit many orders below the loss, so the float32
    mode checks the 32-bit analytic path against the well-resolved reference.
    """
    state = _conditioned_state(dtype, seed)
    sample = micro_sample(state.mcfg)
    loss_stream = state.stream.child("gradcheck_loss")

    loss = _two_pass_loss(state, sample, loss_stream)
    T.backward(loss)
    analytic = {name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for name, p in state.params.items() if p.requires_grad}
    for _, p in state.params.items():
        p.grad = None

    if dtype == "float64":
        ref_state, ref_stream = state, loss_stream
    else:
        ref_state = _conditioned_state("float64", seed)
        ref_stream = ref_state.stream.child("gradcheck_loss")
        for name, p in state.params.items():
            ref_state.params[name].data = p.data.astype(np.float64)
    ref_sample = micro_sample(ref_state.mcfg)

    per_tensor: dict[str, float] = {}
    for name in analytic:
        p = ref_state.params[name]

        def f(x: np.ndarray, _p=p) -> float:
            saved = _p.data
            _p.data = x
            try:
                with T.no_grad():
                    return float(_two_pass_loss(ref_state, ref_sample, ref_stream).data)
            finally:
                _p.data = saved

        numeric = numeric_grad(f, p.data, eps)
        per_tensor[name] = relative_error(analytic[name], numeric)
    return {"max_err": max(per_tensor.values()), "per_tensor": per_tensor}
