"""Figure rendering for the report paths.

Everything draws to files through the Agg backend; no interactive windows.
Figures accompany the delimited outputs written next to them.
"""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import networkx as nx
import numpy as np


def save_training_curves(report_dict: Dict, path) -> None:
    """Loss and validation-AUC trajectories, one line per fold."""
    folds = report_dict["folds"]
    fig, (ax_loss, ax_auc) = plt.subplots(1, 2, figsize=(10, 4))
    for f in folds:
        epochs = np.arange(1, len(f["train_losses"]) + 1)
        ax_loss.plot(epochs, f["train_losses"], label=f"fold {f['fold']}")
        ax_auc.plot(np.arange(1, len(f["valid_aucs"]) + 1), f["valid_aucs"],
                    label=f"fold {f['fold']}")
        ax_auc.axvline(f["best_epoch"], color="gray", lw=0.5, ls=":")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_auc.set_xlabel("epoch")
    ax_auc.set_ylabel("validation AUC")
    ax_loss.grid(alpha=0.3)
    ax_auc.grid(alpha=0.3)
    if folds:
        ax_loss.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ablation_bars(rows: Sequence[Tuple[str, float, float]], path) -> None:
    """Mean AUC with std error bars per ablation cell (already sorted)."""
    names = [r[0] for r in rows]
    means = [r[1] for r in rows]
    stds = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), means, yerr=stds, capsize=4, color="#4878a8")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mean AUC")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_importance_figure(ma_share: List[float], sdc_share: List[float], path) -> None:
    """Stacked per-layer bars of the two attention branches' importance."""
    layers = np.arange(len(ma_share))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(layers, sdc_share, label="convolution branch", color="#c44e52")
    ax.bar(layers, ma_share, bottom=sdc_share, label="decay branch", color="#4878a8")
    ax.set_xlabel("encoder layer")
    ax.set_ylabel("importance share")
    ax.set_xticks(layers)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_profile_figure(distances: np.ndarray, mean_weight: np.ndarray, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(distances, mean_weight, marker=".", ms=3, lw=1)
    ax.set_xlabel("position distance |t - tau|")
    ax.set_ylabel("mean attention weight")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_graph_figure(edges: Sequence[Tuple[int, int, float]], path) -> None:
    """Directed concept-relevance graph; edge width tracks mean weight."""
    g = nx.DiGraph()
    for src, dst, weight in edges:
        g.add_edge(src, dst, weight=weight)
    fig, ax = plt.subplots(figsize=(6, 6))
    if g.number_of_nodes():
        pos = nx.spring_layout(g, seed=0)
        widths = [2.0 + 6.0 * g[u][v]["weight"] for u, v in g.edges]
        nx.draw_networkx_nodes(g, pos, ax=ax, node_size=300, node_color="#9ecae1")
        nx.draw_networkx_labels(g, pos, ax=ax, font_size=8)
        nx.draw_networkx_edges(g, pos, ax=ax, width=widths, edge_color="#555555",
                               arrowsize=12, connectionstyle="arc3,rad=0.08")
    else:
        ax.text(0.5, 0.5, "no edges above threshold", ha="center", va="center")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
