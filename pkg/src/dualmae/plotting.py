"""PNG figures for the CLI report paths (headless Agg backend)."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .costmodel import pipeline_cost  # noqa: E402
from .masking import DualMaskConfig, MaskMap, loss_index_set  # noqa: E402
from .model import ModelConfig  # noqa: E402


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_masks(enc: MaskMap, dec: MaskMap, path: str | Path) -> Path:
    """One row per temporal slice; columns show encoder-visible, decoder-kept and loss positions."""
    loss = np.zeros(enc.grid.n_total, dtype=bool)
    loss[loss_index_set(enc, dec)] = True
    g = enc.grid
    panels = [("encoder visible", enc.per_slice()), ("decoder kept", dec.per_slice()),
              ("loss set", loss.reshape(g.t_tokens, g.h_tokens, g.w_tokens))]
    fig, axes = plt.subplots(g.t_tokens, 3, figsize=(6, 2 * g.t_tokens), squeeze=False)
    for t in range(g.t_tokens):
        for col, (title, arr) in enumerate(panels):
            ax = axes[t, col]
            ax.imshow(arr[t], cmap="Greys", vmin=0, vmax=1, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if t == 0:
                ax.set_title(title, fontsize=9)
            if col == 0:
                ax.set_ylabel(f"t={t}", fontsize=8)
    return _save(fig, path)


def plot_cost_sweep(cfg: ModelConfig, dual: DualMaskConfig, path: str | Path,
                    ratios: Sequence[float] = (0.0, 0.25, 0.5, 0.75)) -> Path:
    """Total GMACs and activation memory against the decoder masking ratio."""
    reports = [pipeline_cost(cfg, replace(dual, rho_d=r), decoder_masking=r > 0) for r in ratios]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ratios, [r.total_flops / 1e9 for r in reports], "o-", label="total GMACs")
    ax.set_xlabel("decoder masking ratio")
    ax.set_ylabel("GMACs")
    ax2 = ax.twinx()
    base = reports[0].activation_mem
    ax2.plot(ratios, [r.activation_mem / base for r in reports], "s--", color="tab:red", label="memory (rel.)")
    ax2.set_ylabel("activation memory / unmasked")
    ax.set_title(f"{cfg.variant}, encoder ratio {dual.rho}")
    fig.legend(loc="upper right", fontsize=8)
    return _save(fig, path)


def plot_loss_curve(metrics: Sequence[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = [m["step"] for m in metrics]
    ax.plot(steps, [m["loss"] for m in metrics], label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if metrics:
        ax.set_title(metrics[0]["stage"])
        ax3 = ax.twinx()
        ax3.plot(steps, [m["lr"] for m in metrics], color="tab:gray", alpha=0.6)
        ax3.set_ylabel("lr")
    return _save(fig, path)
