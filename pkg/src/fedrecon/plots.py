"""Summary figures for a finished run.

All rendering goes through the Agg backend and straight to PNG files, so
this works in headless environments.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_loss_curves(reports, path):
    """Per-client subset-1 training loss versus communication round."""
    rounds = [r.round for r in reports]
    n_clients = len(reports[0].client_losses_s1)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(n_clients):
        ax.plot(rounds, [r.client_losses_s1[k] for r in reports], label=f"client {k}")
    ax.set_xlabel("round")
    ax.set_ylabel("training loss (subset 1)")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_alphas(reports, path):
    """Aggregation weight trajectory per client."""
    rounds = [r.round for r in reports]
    n_clients = len(reports[0].alphas)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in range(n_clients):
        ax.plot(rounds, [r.alphas[k] for r in reports], label=f"client {k}")
    ax.set_xlabel("round")
    ax.set_ylabel("aggregation weight")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(True, alpha=0.3)
    _save(fig, path)


def plot_masks(masks, path):
    """The undersampling pattern of every client."""
    fig, axes = plt.subplots(1, len(masks), figsize=(3 * len(masks), 3.2))
    if len(masks) == 1:
        axes = [axes]
    for ax, mask, k in zip(axes, masks, range(len(masks))):
        ax.imshow(mask.grid, cmap="gray", interpolation="nearest")
        ax.set_title(f"client {k}: {mask.pattern}\n{mask.sampled_fraction:.1%} sampled")
        ax.axis("off")
    _save(fig, path)


def plot_reconstructions(data, clients, path):
    """Ground truth / zero-filled / reconstruction triptych per client."""
    from .mri import adjoint_op

    fig, axes = plt.subplots(len(data), 3, figsize=(8, 2.7 * len(data)))
    axes = np.atleast_2d(axes)
    for row, (cd, client) in enumerate(zip(data, clients)):
        sample = cd.test[0]
        zf = adjoint_op(sample.kspace, sample.mask)
        recon = client.model.reconstruct(sample.kspace[None], sample.mask)[0]
        for col, (img, title) in enumerate(
            [(sample.image, "ground truth"), (zf, "zero-filled"), (recon, "reconstruction")]
        ):
            ax = axes[row, col]
            ax.imshow(np.abs(img), cmap="gray", vmin=0, vmax=np.abs(sample.image).max())
            if row == 0:
                ax.set_title(title)
            if col == 0:
                ax.set_ylabel(f"client {cd.client_id}")
            ax.set_xticks([])
            ax.set_yticks([])
    _save(fig, path)


def plot_psnr_bars(final_rows, path):
    """Final test PSNR per client next to the zero-filled baseline."""
    idx = np.arange(len(final_rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(idx - width / 2, [r["zf_psnr"] for r in final_rows], width, label="zero-filled")
    ax.bar(idx + width / 2, [r["psnr"] for r in final_rows], width, label="reconstruction")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"client {r['client']}" for r in final_rows])
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    _save(fig, path)


def render_run_figures(out_dir, config, data, federation, final_rows):
    """Render every standard figure into ``out_dir/figures``."""
    fig_dir = Path(out_dir) / "figures"
    fig_dir.mkdir(exist_ok=True)
    plot_loss_curves(federation.reports, fig_dir / "loss_curves.png")
    if config.strategy != "SINGLESET":
        plot_alphas(federation.reports, fig_dir / "alphas.png")
    plot_masks([cd.mask for cd in data], fig_dir / "masks.png")
    plot_reconstructions(data, federation.clients, fig_dir / "reconstructions.png")
    plot_psnr_bars(final_rows, fig_dir / "psnr.png")
    return fig_dir
