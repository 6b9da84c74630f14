"""SVG figures for reports.

Figures are written with a fixed hash salt and no timestamp so the same
data always gives the same bytes.
"""

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "svg.hashsalt": "spotkit",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "figure.figsize": (4.8, 3.4),
}


@contextmanager
def figure(path, ncols=1):
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, ncols, figsize=(4.8 * ncols, 3.4))
        try:
            yield fig, axes
            fig.tight_layout()
            fig.savefig(Path(path), format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)


def svg_path_for(path):
    """Figure file written next to a delimited report."""
    return Path(path).with_suffix(".svg")


def pr_curves(path, curves):
    """``curves``: label -> (thresholds, precisions, recalls, f1s)."""
    with figure(path, ncols=2) as (fig, (ax_pr, ax_f1)):
        for label, (ths, prec, rec, f1) in curves.items():
            ax_pr.plot(rec, prec, marker="o", markersize=2.5, label=label)
            ax_f1.plot(ths, f1, label=label)
        ax_pr.set_xlabel("recall")
        ax_pr.set_ylabel("precision")
        ax_pr.set_xlim(-0.02, 1.02)
        ax_pr.set_ylim(-0.02, 1.02)
        ax_pr.set_title("precision-recall")
        ax_f1.set_xlabel("detection threshold")
        ax_f1.set_ylabel("F1")
        ax_f1.set_ylim(-0.02, 1.02)
        ax_f1.set_title("F1 vs threshold")
        ax_pr.legend(loc="lower left", frameon=False)


def loss_curve(path, history):
    epochs = [r["epoch"] for r in history]
    with figure(path) as (fig, ax):
        ax.semilogy(epochs, [r["train_loss"] for r in history], label="train")
        val = [r["val_loss"] for r in history]
        if all(v == v for v in val):
            ax.semilogy(epochs, val, label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.legend(frameon=False)


def objective_trace(path, history):
    with figure(path) as (fig, ax):
        best = min(history)
        gap = [max(f - best, 1e-300) for f in history]
        ax.semilogy(range(len(history)), gap)
        ax.set_xlabel("iteration")
        ax.set_ylabel("objective - final")


def comparison_bars(path, rows):
    labels = [r["model"] for r in rows]
    metrics = ("precision", "recall", "f1")
    width = 0.8 / len(labels)
    with figure(path) as (fig, ax):
        for i, r in enumerate(rows):
            xs = [m + i * width for m in range(len(metrics))]
            ax.bar(xs, [r[m] for m in metrics], width=width, label=labels[i])
        ax.set_xticks([m + 0.4 - width / 2 for m in range(len(metrics))])
        ax.set_xticklabels(metrics)
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, loc="lower right")
