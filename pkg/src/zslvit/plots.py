"""Matplotlib renderings of the delimited report files."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ContractError
from .reporting import kept_patch_mask


def plot_training_curves(history, out_path):
    """Loss curves plus the harmonic-mean track where it was measured."""
    if not history:
        raise ContractError("empty training history")
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(7, 4.2))
    for col, style in (("l_set", "--"), ("l_pre", ":"), ("total", "-")):
        ax.plot(epochs, [r[col] for r in history], style, label=col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    h_pts = [(r["epoch"], r["H"]) for r in history if r.get("H") is not None]
    if h_pts:
        ax2 = ax.twinx()
        ax2.plot(*zip(*h_pts), "o-", color="tab:green", label="H", markersize=3)
        ax2.set_ylabel("harmonic mean", color="tab:green")
        ax2.set_ylim(0.0, 1.0)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_tau_sweep(rows, out_path):
    if not rows:
        raise ContractError("empty calibration sweep")
    taus = [r["tau"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col, marker in (("U", "o"), ("S", "s"), ("H", "^")):
        ax.plot(taus, [r[col] for r in rows], marker + "-", label=col, markersize=4)
    ax.set_xlabel("unseen-class score bonus tau")
    ax.set_ylabel("mean per-class accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_ablation(rows, out_path):
    """Bar of mean H per variant with individual seeds overlaid."""
    if not rows:
        raise ContractError("no ablation rows")
    by_variant = {}
    for row in rows:
        by_variant.setdefault(row["variant"], []).append(row["H"])
    variants = sorted(by_variant, key=lambda v: -float(np.mean(by_variant[v])))
    means = [float(np.mean(by_variant[v])) for v in variants]
    fig, ax = plt.subplots(figsize=(1.4 * len(variants) + 2, 4))
    xs = np.arange(len(variants))
    ax.bar(xs, means, width=0.6, color="tab:blue", alpha=0.7)
    for x, v in zip(xs, variants):
        ys = by_variant[v]
        ax.plot([x] * len(ys), ys, "k.", markersize=6)
    ax.set_xticks(xs)
    ax.set_xticklabels(variants, rotation=20)
    ax.set_ylabel("harmonic mean")
    ax.set_ylim(0.0, max(0.01, 1.05 * max(max(by_variant[v]) for v in variants)))
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_token_masks(records, grid, out_path, max_images=4):
    """Kept-token maps on the original patch grid, image rows x layer columns."""
    if not records:
        raise ContractError("no trace records")
    by_image = {}
    for rec in records:
        by_image.setdefault(rec["image"], []).append(rec)
    keys = sorted(by_image)[:max_images]
    layers = sorted({rec["layer"] for rec in records})
    nrows, ncols = len(keys), len(layers)
    fig, axes = plt.subplots(
        nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows), squeeze=False
    )
    for i, key in enumerate(keys):
        per_layer = {rec["layer"]: rec for rec in by_image[key]}
        for j, layer in enumerate(layers):
            ax = axes[i][j]
            ax.set_xticks([])
            ax.set_yticks([])
            rec = per_layer.get(layer)
            if rec is None:
                ax.axis("off")
                continue
            mask = kept_patch_mask(rec, grid * grid).reshape(grid, grid)
            ax.imshow(mask, cmap="Greys_r", vmin=0, vmax=1, interpolation="nearest")
            if i == 0:
                ax.set_title(f"layer {layer}", fontsize=9)
            if j == 0:
                ax.set_ylabel(key, fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
