"""Figure rendering for the report paths: every CSV/JSON artifact the CLI
emits gets a matching PNG next to it."""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .analysis import CorrHeatmap, PairFractionReport, WeightHistogram
from .benchmark import MemReport
from .evaluation import EvalReport
from .training import TrainHistory


def save_corr_heatmap(hm: CorrHeatmap, path: str | Path, title: str | None = None) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.5, 5.5))
    cmap = plt.get_cmap("RdBu_r").copy()
    cmap.set_bad("0.85")  # undefined (constant-patch) cells in grey
    masked = np.ma.masked_invalid(hm.values)
    im = ax.imshow(masked, cmap=cmap, vmin=-1.0, vmax=1.0, origin="lower", aspect="auto")
    ax.set_xlabel(f"patch index, variate {hm.variate_j}")
    ax.set_ylabel(f"patch index, variate {hm.variate_i}")
    ax.set_title(title or f"patch correlation ({hm.patch_len} steps per patch)")
    fig.colorbar(im, ax=ax, label="correlation")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_weight_histograms(hists: list[WeightHistogram], path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for h in hists:
        centers = 0.5 * (h.bin_edges[:-1] + h.bin_edges[1:])
        ax.step(centers, h.counts, where="mid", label=f"layer {h.layer}")
    ax.set_xlabel("multiplied attention weight")
    ax.set_ylabel("token pairs")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("attention weight distribution per layer")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_pair_fractions(report: PairFractionReport, path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [f"top {q:g}" if q < 1 else "all pairs" for q in report.quantiles]
    values = [100.0 * report.fractions[q] for q in report.quantiles]
    ax.bar(labels, values, color="tab:blue")
    ax.axhline(
        100.0 * report.structural_baseline,
        color="tab:red",
        linestyle="--",
        label="structural baseline",
    )
    ax.set_ylabel("% cross-variate cross-time pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_train_history(history: TrainHistory, path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.5, 4))
    epochs = [e.epoch for e in history.epochs]
    ax.plot(epochs, [e.train_loss for e in history.epochs], label="train")
    ax.plot(epochs, [e.val_loss for e in history.epochs], label="validation")
    if history.best_epoch >= 0:
        ax.axvline(history.epochs[history.best_epoch].epoch, color="0.6", linestyle=":", label="best epoch")
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_eval_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    ok = [r for r in report.rows if r.error is None]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    x = np.arange(len(ok))
    width = 0.38
    ax.bar(x - width / 2, [r.mse for r in ok], width, label="MSE")
    ax.bar(x + width / 2, [r.mae for r in ok], width, label="MAE")
    ax.set_xticks(x, [str(r.horizon) for r in ok])
    ax.set_xlabel("prediction length")
    ax.set_title(f"{report.dataset} ({report.protocol})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_forecast(
    x: np.ndarray, forecast: np.ndarray, variate_names: list[str], path: str | Path
) -> Path:
    """Lookback context and forecast per variate, small multiples."""
    path = Path(path)
    n = x.shape[0]
    ncols = min(3, n)
    nrows = (n + ncols - 1) // ncols
    fig, axes = plt.subplots(nrows, ncols, figsize=(4.2 * ncols, 2.6 * nrows), squeeze=False)
    lookback, horizon = x.shape[1], forecast.shape[1]
    for i in range(n):
        ax = axes[i // ncols][i % ncols]
        ax.plot(range(lookback), x[i], color="0.4", label="input")
        ax.plot(range(lookback, lookback + horizon), forecast[i], color="tab:red", label="forecast")
        ax.set_title(variate_names[i], fontsize=9)
    for j in range(n, nrows * ncols):
        axes[j // ncols][j % ncols].axis("off")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def save_memory_report(reports: list[MemReport], path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r.mode for r in reports]
    ax.bar(labels, [r.attn_map_elements for r in reports], color=["tab:green", "tab:orange"][: len(reports)])
    ax.set_ylabel("attention-map elements per forward")
    ax.set_yscale("log")
    for i, r in enumerate(reports):
        ax.text(i, r.attn_map_elements, f"{r.attn_map_elements:,}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
