"""Matplotlib renderings of the delimited reports (loss curves, shape
statistics, metric distributions, mode sweeps). Pure file output (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import ModeSweep, ShapeStats


def plot_loss_history(history: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    corr = [r for r in history if r.get("chamfer_l2") is not None]
    vae = [r for r in history if r.get("vae_recon") is not None]
    if corr:
        epochs = [r["epoch"] for r in corr]
        ax1.semilogy(epochs, [r["chamfer_l2"] for r in corr], label="chamfer (sq)")
        ax1.semilogy(epochs, [r["chamfer_l1"] for r in corr], label="chamfer")
        ax1.semilogy(epochs, [r["vertex_mse"] for r in corr], label="vertex mse")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.set_title("correspondence objective")
    ax1.legend()
    if vae:
        epochs = [r["epoch"] for r in vae]
        ax2.semilogy(epochs, [r["vae_recon"] for r in vae], label="reconstruction")
        ax2.semilogy(epochs, [max(r["vae_kl"], 1e-12) for r in vae], label="kl")
        ax2.legend()
    ax2.set_xlabel("epoch")
    ax2.set_title("shape VAE objective")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_shape_stats(stats: ShapeStats, path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    modes = np.arange(1, len(stats.compactness) + 1)
    axes[0].plot(modes, stats.compactness, marker="o")
    axes[0].set_title("compactness (higher is better)")
    axes[0].set_ylim(0, 1.05)
    axes[1].plot(modes, stats.generalization, marker="o")
    axes[1].set_title("generalization (lower is better)")
    axes[2].plot(modes, stats.specificity, marker="o")
    axes[2].set_title("specificity (lower is better)")
    for ax in axes:
        ax.set_xlabel("number of modes")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_metric_distribution(rows: list[dict], path) -> None:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    cds = [r["chamfer_l1"] for r in rows]
    s2s = [r["surface_to_surface_mm"] for r in rows]
    ax1.hist(cds, bins=min(20, max(3, len(cds) // 2)), color="steelblue")
    ax1.set_title("two-way chamfer (unsquared)")
    ax2.hist(s2s, bins=min(20, max(3, len(s2s) // 2)), color="indianred")
    ax2.set_title("point-to-surface (mm)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_mode_sweep(sweep: ModeSweep, path) -> None:
    n = len(sweep.shapes)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3.2), squeeze=False)
    vmax = max(float(np.abs(s).max()) for s in sweep.signed_displacement) or 1.0
    for ax, k, shape, disp in zip(axes[0], sweep.values, sweep.shapes,
                                  sweep.signed_displacement):
        sc = ax.scatter(shape[:, 0], shape[:, 2], c=disp, cmap="coolwarm",
                        vmin=-vmax, vmax=vmax, s=12)
        ax.set_title(f"{k:+.1f} std")
        ax.set_aspect("equal")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(sc, ax=axes[0].tolist(), shrink=0.8, label="signed displacement")
    fig.suptitle(f"mode {sweep.mode}")
    fig.savefig(path, dpi=150)
    plt.close(fig)
