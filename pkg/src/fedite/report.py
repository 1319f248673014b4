"""Figure rendering for the report paths.

Figures are written next to the delimited outputs but never replace them;
the CSV files stay the machine-readable source of truth.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AttentionSnapshot
from .federation import RoundSummary
from .training import TraceRow


def render_round_history(history: Sequence[RoundSummary], path: str | Path) -> None:
    """Aggregate and per-site validation RMSE across communication rounds."""
    fig, ax = plt.subplots(figsize=(7, 4))
    rounds = [h.round_index for h in history]
    ax.plot(rounds, [h.aggregate_val_rmse for h in history],
            color="black", lw=2, label="aggregate")
    site_ids = sorted({sid for h in history for sid in h.site_val_rmse})
    for sid in site_ids:
        ax.plot(rounds, [h.site_val_rmse.get(sid, np.nan) for h in history],
                lw=1, alpha=0.7, label=f"site {sid}")
    ax.set_xlabel("communication round")
    ax.set_ylabel("validation RMSE (factual)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_loss_trace(trace: Sequence[TraceRow], path: str | Path) -> None:
    """Per-phase training losses over (round, epoch) steps, one line per site."""
    fig, ax = plt.subplots(figsize=(7, 4))
    sites = sorted({row.site_id for row in trace})
    for sid in sites:
        for phase, style in (("predictor", "--"), ("shared", "-")):
            rows = [r for r in trace
                    if r.site_id == sid and r.phase == phase and r.split == "train"]
            if rows:
                ax.plot(range(len(rows)), [r.loss for r in rows], style, lw=1,
                        label=f"site {sid} {phase}")
    ax.set_xlabel("local epoch (cumulative)")
    ax.set_ylabel("train MSE")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_attention_heatmap(matrix: np.ndarray, row_labels: Sequence[str],
                             col_labels: Sequence[str], title: str,
                             path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(col_labels)),
                                    max(3, 0.5 * len(row_labels))))
    im = ax.imshow(matrix, cmap="viridis", aspect="auto", vmin=0.0)
    ax.set_xticks(range(len(col_labels)), col_labels, rotation=90, fontsize=7)
    ax.set_yticks(range(len(row_labels)), row_labels, fontsize=7)
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_attention_snapshot(snapshot: AttentionSnapshot, out_dir: str | Path) -> None:
    """One heatmap per exported matrix, mirroring the delimited files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layers, heads = snapshot.self_attention.shape[:2]
    for layer in range(layers):
        for h in range(heads):
            render_attention_heatmap(
                snapshot.self_attention[layer, h], snapshot.labels, snapshot.labels,
                f"self-attention layer {layer} head {h}",
                out / f"self_l{layer}_h{h}.png")
    for arm, maps in snapshot.cross_attention.items():
        cross_layers, heads = maps.shape[:2]
        for layer in range(cross_layers):
            for h in range(heads):
                name = (f"cross_h{h}_t{arm}.png" if cross_layers == 1
                        else f"cross_l{layer}_h{h}_t{arm}.png")
                render_attention_heatmap(
                    maps[layer, h], ["treatment"], snapshot.labels,
                    f"cross-attention head {h}, treatment {arm}", out / name)


def render_zero_shot(reports: Mapping[int, tuple[float, float]], path: str | Path) -> None:
    """Paired bars: supervised vs zero-shot RMSE per held-out arm."""
    fig, ax = plt.subplots(figsize=(6, 4))
    arms = sorted(reports)
    x = np.arange(len(arms))
    sup = [reports[a][0] for a in arms]
    zs = [reports[a][1] for a in arms]
    ax.bar(x - 0.2, sup, width=0.4, label="supervised")
    ax.bar(x + 0.2, zs, width=0.4, label="zero-shot")
    ax.set_xticks(x, [f"arm {a}" for a in arms])
    ax.set_ylabel("test RMSE (factual)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
