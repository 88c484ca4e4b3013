"""Matplotlib figure rendering for CLI reports; all figures go to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .reconstruct import CrossSection

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def save_loss_curves(history: list[dict], path: str | Path,
                     keys: tuple[str, ...] = ("total", "sdf", "fc_cd", "normal")) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [h["epoch"] for h in history]
    for key in keys:
        values = [h.get(key) for h in history]
        if any(v is not None for v in values):
            ax.plot(epochs, [v if v is not None else np.nan for v in values], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_cross_section_figure(section: CrossSection, path: str | Path) -> Path:
    """Three heat maps: deformed SDF, nominal SDF, and field magnitude."""
    path = Path(path)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6))
    panels = [
        ("deformed SDF", section.deformed_sdf.values, "RdBu", True),
        ("nominal SDF", section.nominal_sdf.values, "RdBu", True),
        ("|deformation|", section.deformation_norm.values, "viridis", False),
    ]
    extent = [section.deformed_sdf.origin[1],
              section.deformed_sdf.origin[1] + section.deformed_sdf.spacing[1]
              * (section.deformed_sdf.counts[1] - 1),
              section.deformed_sdf.origin[0],
              section.deformed_sdf.origin[0] + section.deformed_sdf.spacing[0]
              * (section.deformed_sdf.counts[0] - 1)]
    for ax, (title, values, cmap, symmetric) in zip(axes, panels):
        if symmetric:
            limit = float(np.abs(values).max())
            im = ax.imshow(values, origin="lower", extent=extent, cmap=cmap,
                           vmin=-limit, vmax=limit)
        else:
            im = ax.imshow(values, origin="lower", extent=extent, cmap=cmap)
        ax.set_title(title)
        ax.grid(False)
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.suptitle(f"cross-section {section.axis} = {section.offset:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_trajectory(losses: list[float], path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(losses)
    ax.set_xlabel("iteration")
    ax.set_ylabel("partial-view loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_interp_sweep(ts: list[float], deflections: list[float], path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ts, deflections, marker="o")
    ax.set_xlabel("interpolation t")
    ax.set_ylabel("tip deflection (normalized)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_metrics_bars(table: dict, path: str | Path, scale_1e3: bool = True) -> Path:
    path = Path(path)
    rows = [k for k in ("train_nominal", "train_deformed", "test_deformed") if k in table]
    factor = 1e3 if scale_1e3 else 1.0
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    cd = [table[r]["cd"] * factor for r in rows]
    axes[0].bar(rows, cd, color="tab:blue")
    axes[0].set_ylabel("CD" + (" x10^3" if scale_1e3 else ""))
    l1 = [((table[r]["l1_off"] or 0.0) * factor) for r in rows]
    axes[1].bar(rows, l1, color="tab:orange")
    axes[1].set_ylabel("L1 off-surface" + (" x10^3" if scale_1e3 else ""))
    for ax in axes:
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
