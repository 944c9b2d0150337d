"""SVG figures: heatmaps, learning curves, and toy2d decision boundaries.

SVGs are rendered headless with a fixed hash salt and no date metadata, so
rerunning a config regenerates content-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import DomainPair
from .encoder import BackboneWeights
from .frontend import Example, PromptParameters
from .training import ModelBundle, predict_probs

_SAVEFIG = {"format": "svg", "metadata": {"Date": None}}


def _style(fig_hash: str):
    matplotlib.rcParams["svg.hashsalt"] = fig_hash


def heatmap_svg(matrix, row_labels, col_labels, path, title: str,
                fig_hash: str = "promptshift", fmt: str = "{:.2f}") -> None:
    _style(fig_hash)
    matrix = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 * matrix.shape[1] + 2,
                                    1.0 * matrix.shape[0] + 1.5))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(col_labels)), labels=[str(c) for c in col_labels])
    ax.set_yticks(range(len(row_labels)), labels=[str(r) for r in row_labels])
    mid = (matrix.max() + matrix.min()) / 2.0 if matrix.size else 0.5
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            color = "white" if matrix[i, j] < mid else "black"
            ax.text(j, i, fmt.format(matrix[i, j]), ha="center", va="center",
                    color=color, fontsize=9)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def learning_curves_svg(logs: dict[str, list[dict]], path, fig_hash: str,
                        metric: str = "val_accuracy") -> None:
    """One curve per method from line-delimited step records."""
    _style(fig_hash)
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    for method in sorted(logs):
        records = logs[method]
        steps = [r["step"] for r in records]
        ax_loss.plot(steps, [r["loss_total"] for r in records], label=method)
        evals = [(r["step"], r[metric]) for r in records if metric in r]
        if evals:
            ax_val.plot(*zip(*evals), marker="o", markersize=3, label=method)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("training loss")
    ax_val.set_xlabel("step")
    ax_val.set_ylabel(metric)
    for ax in (ax_loss, ax_val):
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)


def decision_boundary_svg(prompt: PromptParameters, backbone: BackboneWeights,
                          bundle: ModelBundle, pair: DomainPair, path,
                          fig_hash: str, resolution: int = 200,
                          extent: float = 3.0) -> None:
    """Grid-evaluate the classifier over [-extent, extent]^2, contour the
    argmax class, and overlay both domains' points."""
    xs = np.linspace(-extent, extent, resolution)
    ys = np.linspace(-extent, extent, resolution)
    grid = [Example(point=(float(x), float(y)))
            for y in ys for x in xs]
    probs = predict_probs(grid, prompt, bundle, backbone, batch_size=512)
    classes = np.argmax(probs, axis=1).reshape(resolution, resolution)

    _style(fig_hash)
    fig, ax = plt.subplots(figsize=(6, 6))
    n_classes = probs.shape[1]
    ax.contourf(xs, ys, classes, levels=np.arange(n_classes + 1) - 0.5,
                cmap="Pastel1", alpha=0.8)
    ax.contour(xs, ys, classes, levels=np.arange(n_classes + 1) - 0.5,
               colors="k", linewidths=0.6)
    src = np.array([ex.point for ex in pair.source_train[:400]])
    src_y = np.array([ex.label for ex in pair.source_train[:400]])
    tgt = np.array([ex.point for ex in pair.target_eval[:400]])
    tgt_y = np.array([ex.label for ex in pair.target_eval[:400]])
    for c in range(n_classes):
        ax.scatter(*src[src_y == c].T, marker="o", s=12,
                   label=f"source {bundle.labels[c]}")
        ax.scatter(*tgt[tgt_y == c].T, marker="x", s=14,
                   label=f"target {bundle.labels[c]}")
    ax.set_xlim(-extent, extent)
    ax.set_ylim(-extent, extent)
    ax.legend(fontsize=7, loc="upper right")
    ax.set_title("decision regions with source (o) and target (x) data")
    fig.tight_layout()
    fig.savefig(path, **_SAVEFIG)
    plt.close(fig)
