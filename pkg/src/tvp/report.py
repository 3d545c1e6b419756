"""Matplotlib figure emission for predictions and evaluation reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _display(frame: np.ndarray) -> np.ndarray:
    return np.clip(frame, 0.0, 1.0).transpose(1, 2, 0)


def frame_strip(video: np.ndarray, path: str | Path, title: str | None = None) -> None:
    """One horizontal strip of every frame."""
    n = video.shape[0]
    fig, axes = plt.subplots(1, n, figsize=(1.1 * n, 1.4))
    axes = np.atleast_1d(axes)
    for i, ax in enumerate(axes):
        ax.imshow(_display(video[i]))
        ax.set_title(f"t={i}", fontsize=7)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def frame_grid(rows: dict[str, np.ndarray], path: str | Path,
               title: str | None = None, k: int | None = None) -> None:
    """Stacked strips, one labeled row per video (e.g. truth vs prediction)."""
    names = list(rows)
    n = max(v.shape[0] for v in rows.values())
    fig, axes = plt.subplots(len(names), n, figsize=(1.1 * n, 1.3 * len(names)), squeeze=False)
    for r, name in enumerate(names):
        video = rows[name]
        for i in range(n):
            ax = axes[r][i]
            ax.axis("off")
            if i < video.shape[0]:
                ax.imshow(_display(video[i]))
                if r == 0:
                    ref = k is not None and i < k
                    ax.set_title(f"t={i}" + (" (ref)" if ref else ""), fontsize=7)
        axes[r][0].set_ylabel(name, fontsize=8)
        axes[r][0].axis("on")
        axes[r][0].set_xticks([])
        axes[r][0].set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def eval_summary(report: dict, items: list[dict], path: str | Path) -> None:
    """Accuracy bar plus PSNR distributions for one evaluation run."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    acc = report["instruction_accuracy"]
    ax1.bar(["follows", "fails"], [acc, 1.0 - acc], color=["tab:green", "tab:red"])
    ax1.set_ylim(0, 1)
    ax1.set_title(f"instruction accuracy = {acc:.3f} (n={len(items)})", fontsize=9)
    cond = [it["cond_psnr"] for it in items if np.isfinite(it["cond_psnr"])]
    pred = [it["pred_psnr"] for it in items if np.isfinite(it["pred_psnr"])]
    if cond:
        ax2.hist(cond, bins=16, alpha=0.6, label=f"cond (mean {np.mean(cond):.1f} dB)")
    if pred:
        ax2.hist(pred, bins=16, alpha=0.6, label=f"pred (mean {np.mean(pred):.1f} dB)")
    ax2.set_xlabel("PSNR (dB)")
    ax2.legend(fontsize=8)
    ax2.set_title("frame fidelity", fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curve(losses: list[float], path: str | Path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(losses, lw=0.4, alpha=0.4, label="per step")
    w = max(1, min(100, len(losses) // 5 or 1))
    if len(losses) >= w:
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(len(smooth)) + w - 1, smooth, lw=1.5, label=f"mean({w})")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
