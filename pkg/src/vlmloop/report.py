"""Figure rendering for run reports.

Every CLI path that writes delimited metrics also drops PNG figures next to
them; everything here draws onto the Agg backend so headless runs work.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first
import numpy as np  # noqa: E402


def _save(fig, path: str | Path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def fig_loss_curve(losses: list[tuple[int, float]], path: str | Path,
                   title: str = "training loss") -> str:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if losses:
        steps, vals = zip(*losses)
        ax.plot(steps, vals, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def fig_sweep(arms: list[dict], path: str | Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ok = [a for a in arms if a.get("val_loss") is not None]
    bad = [a for a in arms if a.get("val_loss") is None]
    if ok:
        ax.plot([a["lr"] for a in ok], [a["val_loss"] for a in ok], "o-")
    for a in bad:
        ax.axvline(a["lr"], color="red", ls=":", alpha=0.6)
    ax.set_xscale("log")
    ax.set_xlabel("learning rate")
    ax.set_ylabel("validation loss")
    ax.set_title("learning-rate sweep")
    ax.grid(alpha=0.3, which="both")
    return _save(fig, path)


def fig_ablation(records: list[dict], path: str | Path) -> str:
    benchmarks = sorted({r["benchmark"] for r in records})
    variants = []
    for r in records:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    fig, axes = plt.subplots(1, len(benchmarks), figsize=(4 * len(benchmarks), 3.5))
    if len(benchmarks) == 1:
        axes = [axes]
    for ax, bench in zip(axes, benchmarks):
        vals = []
        for v in variants:
            match = [r for r in records if r["variant"] == v and r["benchmark"] == bench]
            vals.append(match[0]["value"] if match and match[0]["value"] is not None else np.nan)
        ax.bar(range(len(variants)), vals, color="tab:blue")
        ax.set_xticks(range(len(variants)))
        ax.set_xticklabels(variants, rotation=60, ha="right", fontsize=7)
        metric = next((r["metric"] for r in records if r["benchmark"] == bench), "")
        ax.set_title(f"{bench} ({metric})", fontsize=9)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def fig_nav_trace(result: dict, world, path: str | Path) -> str:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    xs = [p["pose"]["x"] for p in result["trace"]]
    ys = [p["pose"]["y"] for p in result["trace"]]
    if xs:
        ax.plot(xs, ys, "-", color="gray", lw=0.8)
        ax.plot(xs[0], ys[0], "go", label="start")
        ax.plot(xs[-1], ys[-1], "ko", label="end")
    for lm in world.landmarks:
        ax.plot(lm.x, lm.y, "s", color=lm.color if lm.color != "yellow" else "gold",
                ms=8, alpha=0.7)
    ax.plot(world.goal.x, world.goal.y, "r*", ms=14, label="goal")
    ax.set_xlim(0, world.size)
    ax.set_ylim(0, world.size)
    ax.set_aspect("equal")
    ax.legend(fontsize=7)
    ax.set_title(f"episode, final distance {result['final_distance']:.2f} m", fontsize=9)
    return _save(fig, path)


def fig_benchmark_summary(records: list[dict], path: str | Path) -> str:
    fig, ax = plt.subplots(figsize=(5, 3))
    labels = [f"{r['benchmark']}\n{r['metric']}" for r in records]
    vals = [r["value"] if r["value"] is not None else np.nan for r in records]
    ax.bar(range(len(records)), vals, color="tab:green")
    ax.set_xticks(range(len(records)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_title("benchmark results", fontsize=10)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)
