"""Report figures (matplotlib, Agg backend)."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .encoding import composite, contribution_rgb, decode_row_to_color

COLORS = ["#0072b2", "#e69f00", "#009e72", "#d55c00", "#cc79a7", "#56b4e9"]

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "bcos",
}


def _save(fig, path):
    # no Software/date metadata so repeated runs give identical files
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def plot_localization(scores, path, baseline=None):
    """Box plot of per-cell localisation scores, one box per attribution method."""
    methods = list(scores)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(methods), 2.8))
        data = [scores[m].scores.ravel() for m in methods]
        bp = ax.boxplot(data, patch_artist=True, widths=0.6)
        ax.set_xticks(range(1, len(methods) + 1), methods)
        for patch, c in zip(bp["boxes"], COLORS * 3):
            patch.set_facecolor(c)
            patch.set_alpha(0.6)
        if baseline is not None:
            ax.axhline(baseline, color="0.4", ls="--", lw=0.8, label="uniform")
            ax.legend(loc="lower right", frameon=False)
        ax.set_ylim(0, 1.02)
        ax.set_ylabel("localisation")
        fig.tight_layout()
        _save(fig, path)


def plot_ablation(rows, path, baseline=None):
    bs = [r.B for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.6))
        ax.plot(bs, [r.localization for r in rows], "o-", color=COLORS[0], label="localisation")
        ax.plot(bs, [r.accuracy for r in rows], "s--", color=COLORS[1], label="test accuracy")
        if baseline is not None:
            ax.axhline(baseline, color="0.5", ls=":", lw=0.8, label="uniform map")
        ax.set_xlabel("B")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def plot_training(rows, path):
    ep = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(5.6, 2.4))
        a1.plot(ep, [r["loss"] for r in rows], color=COLORS[0])
        a1.set_yscale("log")
        a1.set_xlabel("epoch")
        a1.set_ylabel("loss")
        a2.plot(ep, [r["train_acc"] for r in rows], color=COLORS[1], label="train")
        if rows and rows[0].get("test_acc") is not None:
            a2.plot(ep, [r["test_acc"] for r in rows], color=COLORS[2], label="test")
            a2.legend(frameon=False)
        a2.set_xlabel("epoch")
        a2.set_ylabel("accuracy")
        fig.tight_layout()
        _save(fig, path)


def plot_explanation(image_rgb, row, contributions, path, title=None):
    """Input, decoded explanation row and signed contribution map side by side."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(6.0, 2.3))
        panels = [np.asarray(image_rgb).transpose(1, 2, 0),
                  composite(decode_row_to_color(row), background=0.0),
                  contribution_rgb(contributions)]
        for ax, img, name in zip(axes, panels, ["input", "W(x) row", "contributions"]):
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
            ax.set_title(name)
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)
