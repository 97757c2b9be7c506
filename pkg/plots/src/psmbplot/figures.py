"""Figure builders, one per plot kind.

Builders return a live Figure so callers (and tests) can inspect artists;
`save_figure` owns serialization.  Rendering must be deterministic for fixed
inputs: PCA uses the full SVD solver, t-SNE takes an explicit seed, and SVG
output drops the date field that would otherwise change every run.
"""

from __future__ import annotations

from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

LOSS_FIELDS = ("total_loss", "loss_gm", "loss_gl", "loss_agree")
SCHEDULE_FIELDS = ("lambda1", "lambda2", "tau_t", "m")


def _series(records: Sequence[Dict], key: str) -> np.ndarray:
    return np.array([float(r.get(key, np.nan)) for r in records])


def curves_figure(records: Sequence[Dict]):
    """Losses on top, schedule values below, both against the step field."""
    steps = _series(records, "step")
    fig, (ax_loss, ax_sched) = plt.subplots(
        2, 1, figsize=(8, 6), sharex=True, constrained_layout=True)
    for key in LOSS_FIELDS:
        ax_loss.plot(steps, _series(records, key), label=key, linewidth=1.2)
    ax_loss.set_ylabel("loss")
    ax_loss.legend(loc="upper right", fontsize=8)
    ax_loss.grid(True, alpha=0.3)

    for key in SCHEDULE_FIELDS:
        ax_sched.plot(steps, _series(records, key), label=key, linewidth=1.2)
    ax_sched.set_xlabel("step")
    ax_sched.set_ylabel("schedule value")
    ax_sched.legend(loc="center right", fontsize=8)
    ax_sched.grid(True, alpha=0.3)
    fig.suptitle("training curves")
    return fig


def ablation_figure(rows: Sequence[Dict]):
    """One bar per configuration (mean accuracy) with per-seed points on top.

    Configurations keep their file order; seeds within a group spread on a
    fixed horizontal comb so reruns land points in identical positions.
    """
    configs: List[str] = []
    grouped: Dict[str, List[Dict]] = {}
    for row in rows:
        grouped.setdefault(row["config"], []).append(row)
        if row["config"] not in configs:
            configs.append(row["config"])

    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(configs), 4.5),
                           constrained_layout=True)
    xs = np.arange(len(configs))
    means = [float(np.mean([r["probe_acc"] for r in grouped[c]])) for c in configs]
    ax.bar(xs, means, width=0.6, color="#7aa6c2", edgecolor="#2f5d76",
           zorder=1)
    for i, c in enumerate(configs):
        group = grouped[c]
        offsets = np.linspace(-0.15, 0.15, len(group)) if len(group) > 1 else [0.0]
        accs = [r["probe_acc"] for r in group]
        ax.scatter(xs[i] + np.asarray(offsets), accs, s=24, color="#1d3c4f",
                   zorder=2, label="per-seed" if i == 0 else None)
    ax.set_xticks(xs)
    ax.set_xticklabels(configs, rotation=20, ha="right")
    ax.set_ylabel("probe accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    ax.legend(loc="lower right", fontsize=8)
    fig.suptitle("ablation probe accuracy")
    return fig


def _project(features: np.ndarray, method: str, seed: int) -> np.ndarray:
    if method == "pca":
        from sklearn.decomposition import PCA
        # full SVD: deterministic, and these exports are small
        return PCA(n_components=2, svd_solver="full").fit_transform(features)
    if method == "tsne":
        from sklearn.manifold import TSNE
        perplexity = min(30.0, max(2.0, (len(features) - 1) / 3.0))
        return TSNE(n_components=2, random_state=seed, init="pca",
                    perplexity=perplexity).fit_transform(features)
    raise ValueError(f"unknown projection method: {method}")


def embedding_figure(features: np.ndarray, labels: np.ndarray,
                     method: str = "pca", seed: int = 0):
    """2-D projection scatter with one legend entry per label value."""
    coords = _project(np.asarray(features, dtype=np.float64), method, seed)
    fig, ax = plt.subplots(figsize=(6, 5), constrained_layout=True)
    cmap = plt.get_cmap("tab10")
    for i, value in enumerate(np.unique(labels)):
        mask = labels == value
        name = "unlabeled" if value < 0 else f"class {value}"
        ax.scatter(coords[mask, 0], coords[mask, 1], s=18,
                   color=cmap(i % 10), label=name, alpha=0.8)
    ax.set_xlabel(f"{method} 1")
    ax.set_ylabel(f"{method} 2")
    ax.legend(loc="best", fontsize=8)
    fig.suptitle(f"embedding ({method})")
    return fig


def save_figure(fig, path: str) -> str:
    """Write the figure and release it.  SVG output drops its date stamp and
    pins the element-id hash salt so identical inputs give identical bytes."""
    if str(path).endswith(".svg"):
        with matplotlib.rc_context({"svg.hashsalt": "psmbplot"}):
            fig.savefig(path, metadata={"Date": None})
    else:
        fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
