"""Report output: tab-delimited tables plus matplotlib figures written to files."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import AblationCurve, EvalReport  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "savefig.dpi": 150,
}


def write_tsv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def recall_rows(baseline: EvalReport, model: EvalReport):
    rows = []
    for k in sorted(model.recall_at_k):
        b, m = baseline.recall_at_k.get(k, float("nan")), model.recall_at_k[k]
        delta = (m - b) / b * 100 if b else float("nan")
        rows.append((k, f"{b:.4f}", f"{m:.4f}", f"{delta:+.1f}"))
    return rows


def ablation_rows(curves: Sequence[AblationCurve]):
    rows = []
    for c in curves:
        for (w, r), fb in zip(c.points, c.fallback_counts):
            rows.append((c.label or f"skip {c.model_skip_minutes:g} min", f"{c.model_skip_minutes:g}", f"{w:g}",
                         f"{r:.4f}", fb))
    return rows


def plot_recall(baseline: EvalReport, model: EvalReport, path) -> Path:
    """Grouped bars of Recall@k for the baseline and the model."""
    ks = sorted(model.recall_at_k)
    x = range(len(ks))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar([i - 0.2 for i in x], [baseline.recall_at_k[k] for k in ks], width=0.4,
               label=baseline.label or "RVI", color="0.6")
        ax.bar([i + 0.2 for i in x], [model.recall_at_k[k] for k in ks], width=0.4,
               label=model.label or "model", color="tab:blue")
        ax.set_xticks(list(x), [str(k) for k in ks])
        ax.set_xlabel("k")
        ax.set_ylabel("Recall@k")
        ax.set_ylim(0, 1)
        ax.legend(loc="upper left")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_ablation(curves: Sequence[AblationCurve], path, selected: int | None = None) -> Path:
    """Recall@20 against minutes of missing history, one line per training skip."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, c in enumerate(curves):
            xs = [p[0] for p in c.points]
            ys = [p[1] for p in c.points]
            label = c.label or f"trained with {c.model_skip_minutes:g} min skip"
            label += f" (AUC {c.auc():.2f})"
            ls = "--" if c.model_skip_minutes == 0 else "-"
            lw = 2.2 if i == selected else 1.2
            ax.plot(xs, ys, ls, marker="o", ms=3, lw=lw, label=label)
        ax.set_xlabel("minutes of history missing at prediction time")
        ax.set_ylabel("Recall@20")
        ax.set_ylim(bottom=0)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_training(metrics: Sequence[dict], path) -> Path:
    """Training loss and validation Recall@20 per epoch."""
    epochs = [m["epoch"] for m in metrics]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [m["train_loss"] for m in metrics], color="tab:red", marker="o", ms=3)
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss", color="tab:red")
        ax2 = ax.twinx()
        ax2.plot(epochs, [m["val_recall_at_20"] for m in metrics], color="tab:blue", marker="s", ms=3)
        ax2.set_ylabel("validation Recall@20", color="tab:blue")
        ax2.grid(False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
