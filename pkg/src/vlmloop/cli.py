"""Command-line entry point.

Subcommands: pretrain, train, eval, ablate, merge, gradcheck, datagen.
Run settings come from a strict flat `key = value` config file plus a small
set of overriding flags; unknown keys fail closed and the seed is mandatory.
All outputs (checkpoints, delimited metrics, PNG figures, traces) land under
the output directory and are fully determined by (config, seed).

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from . import experiments as X
from . import metrics as M
from . import navsim as N
from . import pipeline as P
from . import report
from .config import ModelConfig, parse_config_text
from .errors import ConfigError, DivergenceError, VlmError
from .model import param_budget
from .rng import Stream
from .verify import two_pass_gradcheck

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_RUNTIME = 3


@dataclass
class RunConfig:
    seed: int = -1  # mandatory; -1 means unset
    out: str = "out"
    # pipeline
    variant: str = "full_method"
    lora: bool = True
    lr: float = 1e-3
    steps: int = 0
    sweep: bool = False
    force: bool = False
    # files
    dataset: str = ""
    val_dataset: str = ""
    captions: str = ""
    mcq: str = ""
    backbone: str = ""
    checkpoint: str = ""
    # evaluation
    benchmark: str = "all"
    episodes: int = 8
    nav_max_steps: int = 50
    mcq_limit: int = 0
    describe_limit: int = 16
    # stage 0 / datagen
    pretrain_lr: float = 1e-3
    samples: int = 512
    val_samples: int = 64
    events: int = 188
    # model dimensions
    vocab_size: int = 512
    d_llm: int = 64
    n_lm_blocks: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_seq: int = 256
    tied_head: bool = True
    d_embed: int = 32
    patch_size: int = 6
    channels: int = 3
    n_enc_blocks: int = 2
    enc_heads: int = 4
    enc_d_ff: int = 64
    merge: int = 4
    max_patches: int = 128
    image_height: int = 36
    lora_rank: int = 4
    lora_alpha: float = 8.0
    reasoner_dropout: float = 0.1
    dtype: str = "float32"

    def model(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: getattr(self, k) for k in names})

    def pipeline(self) -> P.PipelineConfig:
        return P.PipelineConfig(variant=self.variant, lora=self.lora, lr=self.lr,
                                steps=self.steps, seed=self.seed)


_RUN_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def make_run_config(file_values: dict, overrides: dict) -> RunConfig:
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    unknown = sorted(set(merged) - set(_RUN_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {}
    for key, value in merged.items():
        want = _RUN_FIELDS[key]
        if want == "float" and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        expected = {"int": int, "float": float, "bool": bool, "str": str}[want]
        if not isinstance(value, expected) or (expected is int and isinstance(value, bool)):
            raise ConfigError(f"config key {key!r} expects {want}, got {value!r}")
        coerced[key] = value
    cfg = RunConfig(**coerced)
    if cfg.seed < 0:
        raise ConfigError("seed is mandatory (set `seed = N` or pass --seed)")
    return cfg


def load_run_config(args: argparse.Namespace) -> RunConfig:
    file_values: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(encoding="utf-8"))
    overrides = {
        "seed": args.seed, "out": args.out, "variant": args.variant,
        "benchmark": args.benchmark,
    }
    if getattr(args, "sweep", False):
        overrides["sweep"] = True
    return make_run_config(file_values, overrides)


def _require_file(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out_dirs(cfg: RunConfig) -> dict[str, Path]:
    out = Path(cfg.out)
    dirs = {"out": out, "figures": out / "figures", "checkpoints": out / "checkpoints"}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_datagen(cfg: RunConfig) -> int:
    dirs = _out_dirs(cfg)
    stream = Stream(cfg.seed).child("datagen")
    kinds = ["vqa_color", "vqa_relation", "vqa_shape", "mcq", "describe", "navigate"]
    weights = np.array([0.3, 0.15, 0.15, 0.2, 0.1, 0.1])

    def gen_split(name: str, count: int) -> list[D.Sample]:
        split = stream.child(name)
        rng = split.child("kinds").generator()
        picks = rng.choice(len(kinds), size=count, p=weights)
        out = []
        for i, ki in enumerate(picks):
            kind = kinds[int(ki)]
            if kind == "navigate":
                out.append(N.gen_nav_sample(split.child(f"s{i}")))
            else:
                out.append(D.gen_scene(split.child(f"s{i}"), kind))
        return out

    train = gen_split("train", cfg.samples)
    val = gen_split("val", cfg.val_samples)
    D.write_samples(dirs["out"] / "train.jsonl", train)
    D.write_samples(dirs["out"] / "val.jsonl", val)
    captions = D.gen_captions(stream.child("events"), cfg.events)
    D.write_captions(dirs["out"] / "captions.jsonl", captions)
    items = D.build_mcq(captions, stream.child("mcq_build"))
    D.write_mcq(dirs["out"] / "mcq.jsonl", items)
    print(f"wrote {len(train)} train / {len(val)} val samples, "
          f"{len(captions)} caption events, {len(items)} mcq items under {dirs['out']}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    dirs = _out_dirs(cfg)
    dataset = _require_file(cfg.dataset, "dataset")
    samples = D.read_samples(dataset)
    if cfg.val_dataset:
        val = D.read_samples(_require_file(cfg.val_dataset, "val_dataset"))
    else:
        held = max(1, len(samples) // 10)
        samples, val = samples[:-held], samples[-held:]
    mcfg = cfg.model()
    # visual grounding at desk scale needs many revisits of each sample
    steps = cfg.steps or 20 * len(samples)

    from .model import build_params
    init_params = build_params(mcfg, Stream(cfg.seed), adapters=False, lora=False)
    loss_before = X.pretrain_eval_loss(init_params, mcfg, val)

    params, history = X.pretrain(mcfg, cfg.seed, samples, steps, lr=cfg.pretrain_lr)
    loss_after = X.pretrain_eval_loss(params, mcfg, val)

    ckpt = ckpt_io.Checkpoint(config_hash=mcfg.hash64(), step=steps,
                              tensors={n: p.data for n, p in params.items()})
    ckpt_path = dirs["out"] / "backbone.ckpt"
    ckpt_io.save(ckpt, ckpt_path)

    records = [{"variant": "pretrain", "benchmark": "train", "metric": "loss",
                "value": loss, "step": step, "seed": cfg.seed}
               for step, loss in history]
    records.append({"variant": "pretrain", "benchmark": "heldout", "metric": "loss_before",
                    "value": loss_before, "step": 0, "seed": cfg.seed})
    records.append({"variant": "pretrain", "benchmark": "heldout", "metric": "loss_after",
                    "value": loss_after, "step": steps, "seed": cfg.seed})
    M.write_records(dirs["out"] / "metrics.jsonl", records)
    report.fig_loss_curve(history, dirs["figures"] / "pretrain_loss.png",
                          title="backbone pretraining loss")
    print(f"pretrained {steps} steps: heldout loss {loss_before:.4f} -> {loss_after:.4f}")
    print(f"backbone checkpoint: {ckpt_path}")
    if not loss_after < loss_before:
        print("check failure: heldout loss did not improve")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _load_backbone(cfg: RunConfig, mcfg: ModelConfig) -> ckpt_io.Checkpoint:
    path = _require_file(cfg.backbone, "backbone checkpoint")
    return ckpt_io.load(path, expect_hash=mcfg.hash64(), force=cfg.force)


def cmd_train(cfg: RunConfig) -> int:
    dirs = _out_dirs(cfg)
    mcfg = cfg.model()
    backbone = _load_backbone(cfg, mcfg)
    samples = D.read_samples(_require_file(cfg.dataset, "dataset"))
    val = (D.read_samples(_require_file(cfg.val_dataset, "val_dataset"))
           if cfg.val_dataset else samples[: max(1, len(samples) // 10)])
    pcfg = cfg.pipeline()
    records: list[dict] = []

    if cfg.sweep:
        sweep = X.lr_sweep(mcfg, pcfg, backbone, samples, val, steps=cfg.steps)
        for arm in sweep["arms"]:
            records.append({"variant": cfg.variant, "benchmark": "sweep",
                            "metric": "val_loss", "value": arm["val_loss"],
                            "step": arm["arm"], "seed": cfg.seed,
                            "lr": arm["lr"], "status": arm["status"]})
        if sweep["merged"] is None:
            M.write_records(dirs["out"] / "metrics.jsonl", records)
            print("all sweep arms diverged")
            return EXIT_RUNTIME
        merged_path = dirs["out"] / "merged.ckpt"
        ckpt_io.save(sweep["merged"], merged_path)
        M.write_records(dirs["out"] / "metrics.jsonl", records)
        report.fig_sweep(sweep["arms"], dirs["figures"] / "sweep.png")
        print(f"sweep complete; top rates {sweep['top']}; merged checkpoint: {merged_path}")
        return EXIT_OK

    state = P.new_state(mcfg, pcfg, backbone)
    steps = cfg.steps or len(samples)
    try:
        result = X.train_run(state, samples, steps, ckpt_dir=dirs["checkpoints"])
    except DivergenceError as e:
        print(f"training diverged: {e}")
        return EXIT_RUNTIME
    val_loss = X.mean_eval_loss(state, val)
    final_path = dirs["out"] / "trained.ckpt"
    ckpt_io.save(P.state_checkpoint(state), final_path)
    records += [{"variant": cfg.variant, "benchmark": "train", "metric": "loss",
                 "value": loss, "step": step, "seed": cfg.seed}
                for step, loss in result.losses]
    records.append({"variant": cfg.variant, "benchmark": "val", "metric": "loss",
                    "value": val_loss, "step": state.step, "seed": cfg.seed})
    M.write_records(dirs["out"] / "metrics.jsonl", records)
    report.fig_loss_curve(result.losses, dirs["figures"] / "train_loss.png")
    print(f"trained {steps} steps (variant {cfg.variant}); val loss {val_loss:.4f}")
    print(f"checkpoint: {final_path}")
    return EXIT_OK


def _benchmark_assets(cfg: RunConfig) -> X.BenchmarkAssets:
    assets = X.BenchmarkAssets(nav_episodes=cfg.episodes,
                               nav_max_steps=cfg.nav_max_steps, seed=cfg.seed)
    if cfg.mcq:
        items = D.read_mcq(_require_file(cfg.mcq, "mcq file"))
        assets.mcq_items = items[: cfg.mcq_limit] if cfg.mcq_limit else items
    if cfg.val_dataset or cfg.dataset:
        src = cfg.val_dataset or cfg.dataset
        pool = [s for s in D.read_samples(_require_file(src, "dataset"))
                if s.task == "describe"]
        assets.describe_samples = pool[: cfg.describe_limit]
    return assets


def _selected_benchmarks(cfg: RunConfig, assets: X.BenchmarkAssets) -> tuple[str, ...]:
    if cfg.benchmark != "all":
        if cfg.benchmark not in X.BENCHMARKS:
            raise ConfigError(f"unknown benchmark {cfg.benchmark!r}")
        return (cfg.benchmark,)
    names = ["navigate"]
    if assets.mcq_items:
        names.append("mcq")
    if assets.describe_samples:
        names.append("describe")
    return tuple(names)


def cmd_eval(cfg: RunConfig) -> int:
    dirs = _out_dirs(cfg)
    mcfg = cfg.model()
    ckpt = ckpt_io.load(_require_file(cfg.checkpoint, "checkpoint"),
                        expect_hash=mcfg.hash64(), force=cfg.force)
    state = P.new_state(mcfg, cfg.pipeline())
    ckpt_io.load_into(state.params, ckpt)
    assets = _benchmark_assets(cfg)
    benchmarks = _selected_benchmarks(cfg, assets)
    records, aux = X.evaluate_benchmarks(state, assets, benchmarks)
    M.write_records(dirs["out"] / "metrics.jsonl", records)
    if "nav_results" in aux and aux["nav_results"]:
        trace_rows = []
        for e, res in enumerate(aux["nav_results"]):
            for row in res["trace"]:
                trace_rows.append({"episode": e, **row})
        M.write_records(dirs["out"] / "nav_traces.jsonl", trace_rows)
        world = N.make_world(Stream(cfg.seed).child("nav_bench").child("episode0"))
        report.fig_nav_trace(aux["nav_results"][0], world,
                             dirs["figures"] / "nav_episode0.png")
    report.fig_benchmark_summary(records, dirs["figures"] / "benchmarks.png")
    for rec in records:
        val = "failed" if rec["value"] is None else f"{rec['value']:.4f}"
        print(f"{rec['benchmark']}: {rec['metric']} = {val}")
    return EXIT_OK if all(r["value"] is not None for r in records) else EXIT_RUNTIME


def cmd_ablate(cfg: RunConfig) -> int:
    dirs = _out_dirs(cfg)
    mcfg = cfg.model()
    backbone = _load_backbone(cfg, mcfg)
    samples = D.read_samples(_require_file(cfg.dataset, "dataset"))
    assets = _benchmark_assets(cfg)
    steps = cfg.steps or len(samples)
    records = X.run_ablation_matrix(mcfg, cfg.pipeline(), backbone, samples,
                                    steps, assets,
                                    on_variant=lambda v, r: print(f"variant {v} done"))
    M.write_records(dirs["out"] / "metrics.jsonl", records)
    report.fig_ablation(records, dirs["figures"] / "ablation.png")
    print(f"{len(records)} metric rows -> {dirs['out'] / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_merge(args: argparse.Namespace) -> int:
    a = ckpt_io.load(_require_file(args.checkpoint_a, "checkpoint"))
    b = ckpt_io.load(_require_file(args.checkpoint_b, "checkpoint"))
    merged = P.merge_checkpoints(a, b, weight=args.weight)
    out = Path(args.out_file)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_io.save(merged, out)
    print(f"merged checkpoint ({args.weight} * a + {1 - args.weight} * b): {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    budget = param_budget(cfg.model(), lora=cfg.lora)
    print(f"trainable parameters: {budget['trainable']} "
          f"({100 * budget['ratio']:.3f}% of the base model)")
    ok = True
    for dtype, threshold in (("float64", 1e-5), ("float32", 1e-3)):
        res = two_pass_gradcheck(dtype=dtype, seed=cfg.seed)
        status = "ok" if res["max_err"] < threshold else "FAIL"
        if res["max_err"] >= threshold:
            ok = False
        print(f"two-pass gradient check [{dtype}]: max rel err "
              f"{res['max_err']:.3e} (threshold {threshold:.0e}) {status}")
        worst = sorted(res["per_tensor"].items(), key=lambda kv: -kv[1])[:3]
        for name, err in worst:
            print(f"  {name}: {err:.3e}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vlmloop",
        description="Desk-scale VLM with a language-to-vision feedback loop")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--variant", default=None, choices=P.VARIANTS)
        p.add_argument("--benchmark", default=None,
                       choices=("all",) + X.BENCHMARKS)

    for name in ("pretrain", "train", "eval", "ablate", "gradcheck", "datagen"):
        p = sub.add_parser(name)
        common(p)
        if name == "train":
            p.add_argument("--sweep", action="store_true",
                           help="run the 7-rate sweep and merge the top 2")

    pm = sub.add_parser("merge")
    pm.add_argument("checkpoint_a")
    pm.add_argument("checkpoint_b")
    pm.add_argument("--weight", type=float, default=0.5)
    pm.add_argument("--out-file", default="merged.ckpt")
    return parser


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "datagen": cmd_datagen,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "merge":
            return cmd_merge(args)
        cfg = load_run_config(args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except VlmError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
