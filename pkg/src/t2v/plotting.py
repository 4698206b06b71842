"""Figures for training and evaluation reports (rendered off-screen to files)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DOMAIN_COLORS = {"image": "tab:orange", "video": "tab:blue"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(rows, path, window: int = 50) -> Path:
    """Per-step loss coloured by domain plus a running mean."""
    steps = np.array([r[0] for r in rows])
    losses = np.array([r[1] for r in rows], dtype=np.float64)
    domains = np.array([r[2] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for dom, color in DOMAIN_COLORS.items():
        sel = domains == dom
        if sel.any():
            ax.scatter(steps[sel], losses[sel], s=3, alpha=0.35, color=color, label=f"{dom} steps")
    if len(losses) >= window:
        run = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], run, color="black", lw=1.5, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("noise-prediction MSE")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def filmstrip(clip, path, title: str = "") -> Path:
    clip = np.clip(np.asarray(clip), 0, 1)
    F = len(clip)
    fig, axes = plt.subplots(1, F, figsize=(1.2 * F, 1.5), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.imshow(clip[i], interpolation="nearest")
        ax.set_axis_off()
        ax.set_title(str(i), fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    return _save(fig, path)


def filmstrips(clips, path) -> Path:
    """One row per (label, clip)."""
    n = len(clips)
    F = len(clips[0][1])
    fig, axes = plt.subplots(n, F, figsize=(1.0 * F, 1.1 * n), squeeze=False)
    for r, (label, clip) in enumerate(clips):
        for c in range(F):
            ax = axes[r, c]
            ax.imshow(np.clip(clip[c], 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r, 0].set_ylabel(label, fontsize=6, rotation=0, ha="right", va="center")
    return _save(fig, path)


def paired_bars(labels, values, path, ylabel: str, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(3.5, 3))
    ax.bar(range(len(values)), values, color=["tab:green", "tab:gray"][: len(values)])
    ax.set_xticks(range(len(values)))
    ax.set_xticklabels(labels)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title, fontsize=9)
    for i, v in enumerate(values):
        ax.annotate(f"{v:.4g}", (i, v), ha="center", va="bottom", fontsize=8)
    return _save(fig, path)
