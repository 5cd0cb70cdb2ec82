"""Report figures: training losses, AP per friction level, per-stage latency.

Figures go through the Agg backend and are saved without the software or
date metadata so the same data gives byte-identical PNGs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PNG_METADATA = {"Software": None}
DPI = 100


def _style(ax) -> None:
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.grid(alpha=0.3, linewidth=0.5)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=DPI, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def loss_figure(rows: list[dict], path) -> Path:
    """Per-epoch loss terms and their total; epoch 0 is the initial weights."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    _style(ax)
    if rows:
        epochs = [r["epoch"] for r in rows]
        keys = ("heatmap_loss", "rotation_loss", "refine_loss")
        for key in keys:
            ax.plot(epochs, [r[key] for r in rows], ".-", label=key.replace("_loss", ""))
        ax.plot(epochs, [sum(r[k] for k in keys) for r in rows], "k.-", lw=1.5, label="total")
        ax.legend(frameon=False, fontsize=8)
    else:
        ax.text(0.5, 0.5, "no epochs", ha="center", va="center", transform=ax.transAxes)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    fig.tight_layout()
    return _save(fig, path)


def ap_figure(report: dict, path) -> Path:
    """Per-scene AP bars next to the mean AP at each friction coefficient."""
    scenes = report.get("per_scene", {})
    names = sorted(scenes)
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 3.2), gridspec_kw={"width_ratios": [2, 1]})
    for ax in (left, right):
        _style(ax)
        ax.set_ylim(0, 1.05)
    left.bar(np.arange(len(names)), [scenes[n]["ap"] for n in names], color="tab:blue")
    left.axhline(report.get("map", 0.0), color="k", lw=1, ls="--", label=f"mAP {report.get('map', 0.0):.3f}")
    left.set_xlabel("scene")
    left.set_ylabel("AP (top 50)")
    if len(names) <= 20:
        left.set_xticks(np.arange(len(names)), [n.split("_")[-1] for n in names], fontsize=7, rotation=90)
    left.legend(frameon=False, fontsize=8)
    mus = sorted({m for n in names for m in scenes[n].get("ap_mu", {})}, key=float)
    if mus:
        right.plot([float(m) for m in mus], [np.mean([scenes[n]["ap_mu"][m] for n in names]) for m in mus], "o-")
    right.set_xlabel("friction coefficient")
    right.set_ylabel("mean AP")
    fig.tight_layout()
    return _save(fig, path)


def latency_figure(report: dict, path) -> Path:
    """Median per-stage latency with p95 whiskers, plus the end-to-end line."""
    stages = list(report["stages"])
    med = np.array([report["stages"][s]["median_ms"] for s in stages])
    p95 = np.array([report["stages"][s]["p95_ms"] for s in stages])
    fig, ax = plt.subplots(figsize=(6, 3.2))
    _style(ax)
    y = np.arange(len(stages))
    ax.barh(y, med, xerr=[np.zeros_like(med), p95 - med], color="tab:orange", capsize=2)
    ax.set_yticks(y, stages, fontsize=8)
    ax.invert_yaxis()
    e2e = report["end_to_end"]
    ax.set_xlabel("ms (bar median, whisker p95)")
    ax.set_title(f"end-to-end mean {e2e['mean_ms']:.1f} ms, p95 {e2e['p95_ms']:.1f} ms", fontsize=9)
    fig.tight_layout()
    return _save(fig, path)
