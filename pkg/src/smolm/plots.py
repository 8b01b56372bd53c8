"""Figure rendering for reports. All figures go to files (headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_frame_figure(pixels: np.ndarray, path, title: str = "") -> None:
    """Two-channel frame side by side with a shared color scale."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 4), constrained_layout=True)
    vmax = max(float(pixels.max()), 1.0)
    for ch, ax in enumerate(axes):
        im = ax.imshow(pixels[ch], cmap="magma", vmin=0, vmax=vmax, origin="lower")
        ax.set_title(f"channel {'xy'[ch]}")
        ax.set_xlabel("x (px)")
        ax.set_ylabel("y (px)")
    fig.colorbar(im, ax=axes, shrink=0.8, label="photons")
    if title:
        fig.suptitle(title)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_density_figure(hist: np.ndarray, extent_nm, path) -> None:
    """Localization density map (counts per bin) with physical axes."""
    fig, ax = plt.subplots(figsize=(6, 5), constrained_layout=True)
    im = ax.imshow(hist, cmap="inferno", origin="lower", extent=extent_nm,
                   interpolation="nearest")
    ax.set_xlabel("x (nm)")
    ax.set_ylabel("y (nm)")
    ax.set_title("localization density")
    fig.colorbar(im, ax=ax, label="localizations / bin")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_convergence_figure(diagnostics, path) -> None:
    """Objective value and active group count against iteration."""
    trace = diagnostics.trace
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    if trace:
        its = [r.iteration for r in trace]
        objs = np.array([r.objective for r in trace])
        floor = objs.min()
        ax.semilogy(its, objs - floor + 1e-12, color="tab:blue",
                    label="objective above best")
        ax2 = ax.twinx()
        ax2.plot(its, [r.active_groups for r in trace], color="tab:orange",
                 alpha=0.6, label="active groups")
        ax2.set_ylabel("active groups")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective - best")
    ax.set_title(f"solver convergence ({diagnostics.termination}, "
                 f"{diagnostics.restarts} restarts)")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_error_histogram(values, path, xlabel: str, title: str = "",
                         bins: int = 40) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    if len(values):
        ax.hist(np.asarray(values, dtype=float), bins=bins, color="tab:blue",
                alpha=0.85)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("trials")
    if title:
        ax.set_title(title)
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_offset_sweep_figure(fractions, position_errors_nm, rho_nm, path) -> None:
    """Position error across the sub-pixel offset sweep, against the bound."""
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    img = ax.imshow(position_errors_nm, cmap="viridis", origin="lower",
                    extent=(fractions[0], fractions[-1], fractions[0], fractions[-1]))
    ax.set_xlabel("offset x (camera px)")
    ax.set_ylabel("offset y (camera px)")
    ax.set_title(f"noiseless position error (nm); rho = {rho_nm:.1f} nm")
    fig.colorbar(img, ax=ax, label="error (nm)")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_detection_count_figure(pooled_counts, per_basis_counts, path) -> None:
    """Detection multiplicity under channel misregistration, both strategies."""
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    upper = int(max(max(pooled_counts, default=0), max(per_basis_counts, default=0), 3))
    bins = np.arange(-0.5, upper + 1.5)
    ax.hist([pooled_counts, per_basis_counts], bins=bins,
            label=["pooled map", "per-plane maps"],
            color=["tab:green", "tab:red"])
    ax.set_xlabel("detections per frame")
    ax.set_ylabel("trials")
    ax.legend()
    ax.set_title("counting under channel misregistration")
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_delta_phi_figure(delta_phi_rad, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    if len(delta_phi_rad):
        ax.hist(np.rad2deg(np.asarray(delta_phi_rad, dtype=float)), bins=36,
                range=(-90, 90), color="tab:purple", alpha=0.85)
    ax.set_xlabel("azimuth relative to local axis (deg)")
    ax.set_ylabel("molecules")
    ax.set_title("orientation relative to fitted axis")
    fig.savefig(path, dpi=150)
    plt.close(fig)
