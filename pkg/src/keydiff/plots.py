"""Static SVG figures (no display needed)."""
from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SVG = {"metadata": {"Date": None}}


def _save(fig, path) -> None:
    plt.rcParams["svg.hashsalt"] = "keydiff"
    fig.savefig(path, format="svg", **_SVG)
    plt.close(fig)


def in_batch_histograms(path, hists: Mapping[str, Sequence[int]]) -> None:
    """One bar panel per model: task counts over 10 in-batch success bins."""
    n = len(hists)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 2.8), squeeze=False, sharey=True)
    edges = np.linspace(0, 1, 11)
    for ax, (name, counts) in zip(axes[0], hists.items()):
        ax.bar(edges[:-1], counts, width=0.1, align="edge", edgecolor="black")
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("in-batch success rate")
    axes[0][0].set_ylabel("tasks")
    fig.tight_layout()
    _save(fig, path)


def loss_curve(path, losses: Sequence[float], label: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(4, 2.8))
    ax.plot(np.arange(len(losses)), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel(label)
    ax.set_yscale("log")
    fig.tight_layout()
    _save(fig, path)


def cloud_reconstruction(path, original: np.ndarray, recon: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(original[:, 0], original[:, 1], s=2, label="input")
    ax.scatter(recon[:, 0], recon[:, 1], s=4, marker="x", label="reconstruction")
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def joint_plans(path, plans: Mapping[str, np.ndarray]) -> None:
    """Per-joint traces of several plans against the step index."""
    first = next(iter(plans.values()))
    D = first.shape[1]
    fig, axes = plt.subplots(D, 1, figsize=(5, 1.4 * D), sharex=True, squeeze=False)
    for name, q in plans.items():
        for j in range(D):
            axes[j][0].plot(np.linspace(0, 1, len(q)), q[:, j], marker=".", label=name)
    for j in range(D):
        axes[j][0].set_ylabel(f"q{j + 1}")
    axes[0][0].legend(fontsize=7)
    axes[-1][0].set_xlabel("normalized progress")
    fig.tight_layout()
    _save(fig, path)
