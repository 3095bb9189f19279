"""Training loops, learning-rate sweep, ablation matrix, and benchmark runs.

Stage 0 pretrains the backbone (encoder, projector, LM) jointly on the
synthetic tasks, mixing single-image and duplicated-image templates so the
two-block sequence layout of the second pass is in-distribution; the
checkpoint it saves is what every later run freezes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from . import language as L
from . import navsim as N
from . import pipeline as P
from . import tensor as T
from . import vision as V
from .checkpoint import Checkpoint
from .config import ModelConfig
from .errors import DivergenceError
from .model import build_params
from .optim import AdamW
from .rng import Stream
from .tensor import no_grad


# --------------------------------------------------------------------------
# stage 0: backbone pretraining
# --------------------------------------------------------------------------


def _pretrain_forward(params, mcfg, sample: D.Sample, mode: str,
                      twin: D.Sample | None = None):
    """One stage-0 forward.

    Modes: `plain` (one image block), `dup` (the same encoding twice),
    `override` (second block is the refined twin, label follows the twin),
    `second` (first block is an unrelated scene, label follows the second
    block — the queried image).  The two twin modes make the second image
    block load-bearing, which is the leverage the feedback loop steers
    through later."""
    query_ids = D.tokenize(sample.query)
    label = twin.label if mode == "override" else sample.label
    label_ids = np.concatenate([D.tokenize(label), [D.EOS_ID]])
    _, tokens, _ = V.encode_image(params, mcfg, sample.image)
    if mode == "plain":
        layout = P.pass2_layout(query_ids, tokens.shape[0], "plain_baseline",
                                prompt_first=False, label_ids=label_ids)
        values = [tokens]
    else:
        layout = P.pass2_layout(query_ids, tokens.shape[0],
                                "duplicate_image_baseline",
                                prompt_first=False, label_ids=label_ids)
        if mode == "override":
            _, second, _ = V.encode_image(params, mcfg, twin.image)
            values = [tokens, second]
        elif mode == "second":
            _, first, _ = V.encode_image(params, mcfg, twin.image)
            values = [first, tokens]
        else:
            values = [tokens, tokens]
    logits, _ = L.forward(params, mcfg, layout, values, lora_enabled=False)
    return P._label_loss(logits, layout)


PRETRAIN_PHASE_SPLIT = 0.6  # grounding phase fraction (plain/dup only)


def draw_pretrain_modes(stream: Stream, steps: int,
                        phase_split: float = PRETRAIN_PHASE_SPLIT):
    """Per-step layout modes: visual grounding first (single/duplicated
    blocks only), twin modes afterwards.  Introducing disagreeing blocks
    from step 0 keeps the model at the text-marginal optimum, so the twin
    phase starts only once grounding has had time to form."""
    mix = stream.child("layout_mix").generator()
    u = mix.random(steps)
    rewrite = mix.random(steps) < 0.5
    distractor = mix.integers(0, 1 << 30, size=steps)
    cut = int(phase_split * steps)
    modes = []
    for i in range(steps):
        if i < cut:
            modes.append("plain" if u[i] < 0.6 else "dup")
        elif u[i] < 0.25:
            modes.append("plain")
        elif u[i] < 0.40:
            modes.append("dup")
        else:
            modes.append("twin")
    return modes, rewrite, distractor


def pretrain(mcfg: ModelConfig, seed: int, samples: list[D.Sample], steps: int,
             lr: float = 1e-3, on_step=None) -> tuple[dict, list[tuple[int, float]]]:
    """Joint backbone training on the synthetic tasks with cosine-decayed
    AdamW; returns the parameter store (no adapters) and the loss history.

    A grounding phase (single/duplicated blocks) runs first; the remaining
    steps mix in twin layouts that make the second block answer-bearing —
    the leverage the feedback loop later steers through."""
    stream = Stream(seed)
    params = build_params(mcfg, stream, adapters=False, lora=False)
    for p in params.values():
        p.requires_grad = True
    opt = AdamW(lr=lr)
    history: list[tuple[int, float]] = []
    order = _epoch_order(stream, len(samples), steps)
    modes, rewrite_coin, distractor = draw_pretrain_modes(stream, steps)
    for i in range(steps):
        sample = samples[order[i]]
        mode = modes[i]
        twin = None
        if mode == "twin":
            # half queried-attribute rewrites (when the task supports them),
            # half unrelated-first-block; both make block 2 answer-bearing
            if rewrite_coin[i]:
                twin = D.override_sample(sample, stream.child(f"twin{i}"))
            if twin is not None:
                mode = "override"
            else:
                twin = samples[int(distractor[i]) % len(samples)]
                mode = "second"
        loss = _pretrain_forward(params, mcfg, sample, mode, twin)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"pretraining diverged at step {i}")
        T.backward(loss)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        opt.lr = lr * (0.1 + 0.9 * 0.5 * (1.0 + np.cos(np.pi * i / steps)))
        opt.step(params, grads)
        for p in params.values():
            p.grad = None
        history.append((i, float(loss.data)))
        if on_step is not None:
            on_step(i, float(loss.data))
    return params, history


def pretrain_eval_loss(params, mcfg: ModelConfig, samples: list[D.Sample]) -> float:
    with no_grad():
        losses = [float(_pretrain_forward(params, mcfg, s, duplicate=False).data)
                  for s in samples]
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# adapter training
# --------------------------------------------------------------------------


def _epoch_order(stream: Stream, n: int, steps: int) -> np.ndarray:
    """Concatenated per-epoch shuffles covering `steps` draws."""
    chunks = []
    epoch = 0
    while sum(len(c) for c in chunks) < steps:
        rng = stream.child(f"epoch{epoch}").generator()
        chunks.append(rng.permutation(n))
        epoch += 1
    return np.concatenate(chunks)[:steps]


@dataclass
class TrainResult:
    losses: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    trained: bool = True


def train_run(state: P.PipelineState, samples: list[D.Sample], steps: int,
              ckpt_dir=None, ckpt_every: int = 200, on_step=None,
              trace_hook=None) -> TrainResult:
    """Run `steps` ticks of the two-pass step over shuffled epochs; baseline
    variants have nothing to train and return immediately."""
    if not state.pcfg.trains:
        return TrainResult(trained=False)
    result = TrainResult()
    order = _epoch_order(state.stream.child("order"), len(samples), steps)
    for i in range(steps):
        out = P.train_step(state, samples[order[i]], trace_hook=trace_hook)
        result.losses.append((state.step - 1, out["loss"]))
        if on_step is not None:
            on_step(state.step - 1, out["loss"])
        if ckpt_dir is not None and (state.step % ckpt_every == 0 or i == steps - 1):
            path = str(ckpt_dir / f"step{state.step:06d}.ckpt")
            ckpt_io.save(P.state_checkpoint(state), path)
            result.checkpoints.append(path)
    return result


def mean_eval_loss(state: P.PipelineState, samples: list[D.Sample]) -> float:
    return float(np.mean([P.eval_loss(state, s) for s in samples]))


# --------------------------------------------------------------------------
# learning-rate sweep with top-2 interpolation
# --------------------------------------------------------------------------


def lr_sweep(mcfg: ModelConfig, pcfg: P.PipelineConfig, backbone: Checkpoint | None,
             train_samples: list[D.Sample], val_samples: list[D.Sample],
             steps: int = 0, on_arm=None) -> dict:
    """Seven runs at log-spaced rates over [1e-5, 1e-2] (exact endpoints),
    one (or `steps`) epoch each; the two best validation scores are merged by
    even linear interpolation.  A diverging arm is recorded, not fatal."""
    arm_steps = steps or len(train_samples)
    arms = []
    for i, lr in enumerate(P.SWEEP_LRS):
        arm_pcfg = replace(pcfg, lr=lr)
        state = P.new_state(mcfg, arm_pcfg, backbone)
        # arms share the init (comparable + mergeable) but draw their own
        # data order and dropout from a seed derived by arm index
        state.stream = Stream(pcfg.seed).child(f"arm{i}")
        record = {"arm": i, "lr": lr, "status": "ok", "val_loss": None,
                  "final_train_loss": None}
        try:
            result = train_run(state, train_samples, arm_steps)
            record["final_train_loss"] = result.losses[-1][1] if result.losses else None
            record["val_loss"] = mean_eval_loss(state, val_samples)
            record["checkpoint"] = P.state_checkpoint(state)
        except DivergenceError as e:
            record["status"] = "diverged"
            record["error"] = str(e)
        arms.append(record)
        if on_arm is not None:
            on_arm(record)

    ok = [a for a in arms if a["status"] == "ok"]
    ok.sort(key=lambda a: a["val_loss"])
    merged = None
    top = []
    if len(ok) >= 2:
        top = [ok[0], ok[1]]
        merged = P.merge_checkpoints(ok[0]["checkpoint"], ok[1]["checkpoint"], 0.5)
    elif len(ok) == 1:
        top = [ok[0]]
        merged = ok[0]["checkpoint"]
    return {"arms": arms, "top": [a["lr"] for a in top], "merged": merged,
            "best_lr": ok[0]["lr"] if ok else None}


# --------------------------------------------------------------------------
# benchmark evaluation
# --------------------------------------------------------------------------


@dataclass
class BenchmarkAssets:
    mcq_items: list[D.McqItem] = field(default_factory=list)
    describe_samples: list[D.Sample] = field(default_factory=list)
    nav_episodes: int = 8
    nav_max_steps: int = 50
    seed: int = 0


def observation_px(mcfg: ModelConfig) -> tuple[int, int]:
    """Model-facing render size: configured height, 4:3-ish patch-aligned width."""
    h = mcfg.image_height
    w = max((4 * h // 3) // mcfg.patch_size * mcfg.patch_size, mcfg.patch_size)
    return h, w


def fit_image(img: V.ImageGrid, mcfg: ModelConfig) -> V.ImageGrid:
    """Resize an arbitrary frame to the model's input geometry."""
    aligned = (img.height == mcfg.image_height
               and img.width % mcfg.patch_size == 0
               and img.patch_count(mcfg.patch_size) <= mcfg.max_patches)
    if aligned:
        return img
    return V.preprocess(img.pixels, mcfg.image_height, mcfg.patch_size)


def vlm_policy(state: P.PipelineState):
    def policy(obs: V.ImageGrid, instruction: str, nav_state) -> str:
        return P.infer(state, obs, instruction, max_new=8)["answer_text"]
    return policy


def eval_navigate(state: P.PipelineState, assets: BenchmarkAssets) -> tuple[float, list[dict]]:
    stream = Stream(assets.seed).child("nav_bench")
    policy = vlm_policy(state)
    obs_px = observation_px(state.mcfg)
    results = []
    for e in range(assets.nav_episodes):
        es = stream.child(f"episode{e}")
        world = N.make_world(es)
        start = N.make_episode(es, world, max_steps=assets.nav_max_steps)
        results.append(N.run_episode(start, world, policy, obs_px=obs_px))
    return N.mean_final_distance(results), results


def eval_mcq(state: P.PipelineState, assets: BenchmarkAssets) -> float:
    stream = Stream(assets.seed).child("mcq_bench")
    correct = 0
    for i, item in enumerate(assets.mcq_items):
        img = fit_image(D.mcq_image(item, stream.child(f"img{i}")), state.mcfg)
        out = P.infer(state, img, D.mcq_query(item), max_new=4)
        correct += bool(D.score_mcq(out["answer_text"], item))
    return correct / len(assets.mcq_items)


def eval_describe(state: P.PipelineState, assets: BenchmarkAssets) -> float:
    scores = []
    for s in assets.describe_samples:
        out = P.infer(state, fit_image(s.image, state.mcfg), s.query, max_new=24)
        scores.append(D.overlap_score(out["answer_text"], s.label))
    return float(np.mean(scores))


BENCHMARKS = ("navigate", "mcq", "describe")

_METRIC_NAME = {"navigate": "mean_final_distance", "mcq": "accuracy",
                "describe": "overlap_f1"}


def evaluate_benchmarks(state: P.PipelineState, assets: BenchmarkAssets,
                        benchmarks=BENCHMARKS) -> tuple[list[dict], dict]:
    """One aggregate record per benchmark; failures are isolated per
    benchmark (value None)."""
    records = []
    aux: dict = {}
    for name in benchmarks:
        rec = {"variant": state.pcfg.variant, "benchmark": name,
               "metric": _METRIC_NAME[name], "value": None,
               "step": state.step, "seed": state.pcfg.seed}
        try:
            if name == "navigate":
                value, traces = eval_navigate(state, assets)
                aux["nav_results"] = traces
            elif name == "mcq":
                value = eval_mcq(state, assets)
            else:
                value = eval_describe(state, assets)
            rec["value"] = float(value)
        except Exception as e:  # noqa: BLE001 - benchmark isolation
            rec["error"] = f"{type(e).__name__}: {e}"
        records.append(rec)
    return records, aux


# --------------------------------------------------------------------------
# ablation matrix
# --------------------------------------------------------------------------


def run_ablation_matrix(mcfg: ModelConfig, pcfg: P.PipelineConfig,
                        backbone: Checkpoint | None,
                        train_samples: list[D.Sample], steps: int,
                        assets: BenchmarkAssets, on_variant=None,
                        trace_hook=None) -> list[dict]:
    """Train and evaluate every variant under the shared seed: exactly
    len(VARIANTS) x 3 metric records, with per-variant failures isolated."""
    records: list[dict] = []
    for variant in P.VARIANTS:
        var_pcfg = replace(pcfg, variant=variant, ordering="auto")
        try:
            state = P.new_state(mcfg, var_pcfg, backbone)
            train_run(state, train_samples, steps, trace_hook=trace_hook)
            recs, _ = evaluate_benchmarks(state, assets)
        except Exception as e:  # noqa: BLE001 - variant isolation
            recs = [{"variant": variant, "benchmark": b, "metric": _METRIC_NAME[b],
                     "value": None, "step": 0, "seed": pcfg.seed,
                     "error": f"{type(e).__name__}: {e}"} for b in BENCHMARKS]
        records.extend(recs)
        if on_variant is not None:
            on_variant(variant, recs)
    return records
