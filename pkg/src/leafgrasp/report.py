"""Figures written next to the CSV outputs (Agg backend, files only)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import CameraIntrinsics  # noqa: E402
from .perception import PoseSet  # noqa: E402
from .workflow import BatchRun, LPBReport  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_lpb(reports: list[LPBReport], path) -> Path:
    """Grouped bars of k-LPB availability and success per setting."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    ks = (1, 2, 3)
    width = 0.8 / max(1, len(reports))
    for j, rep in enumerate(reports):
        x = np.arange(len(ks)) + (j - (len(reports) - 1) / 2) * width
        axes[0].bar(x, [rep.availability[k] for k in ks], width, label=rep.setting)
        axes[1].bar(x, [rep.success[k] or 0.0 for k in ks], width, label=rep.setting)
    for ax, title in zip(axes, ("batches with >= k leaves approached", "k-LPB success")):
        ax.set_xticks(range(len(ks)), [f"{k}-LPB" for k in ks])
        ax.set_title(title, fontsize=10)
        ax.set_ylim(0, 105)
    axes[0].set_ylabel("%")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_spectra(runs: list[BatchRun], path, max_curves: int = 30) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    n = 0
    for run in runs:
        for rec in run.approaches:
            if rec.spectrum is not None and n < max_curves:
                ax.plot(rec.spectrum.wavelengths, rec.spectrum.values, lw=0.8, alpha=0.7)
                n += 1
    ax.set_xlabel("wavelength (nm)")
    ax.set_ylabel("transmittance")
    ax.set_ylim(0, 1)
    ax.set_title(f"simulated leaf transmittance, synthetic template ({n} leaves)", fontsize=10)
    fig.tight_layout()
    return _save(fig, path)


def plot_detections(depth: np.ndarray, posesets: list[PoseSet], K: CameraIntrinsics, path,
                    axis_len: float = 0.03) -> Path:
    """Depth image with each leaf center and its pose-1 tangent/normal axes projected."""
    fig, ax = plt.subplots(figsize=(6.4, 4.8))
    shown = np.where(depth > 0, depth, np.nan)
    im = ax.imshow(shown, cmap="viridis")
    fig.colorbar(im, ax=ax, label="depth (m)")
    for ps in posesets:
        pose = ps.poses[0]
        R = pose.rotation_matrix
        pts = np.vstack([pose.position, pose.position + axis_len * R[:, 0], pose.position + axis_len * R[:, 2]])
        u, v = K.project(pts).T
        ax.plot([u[0], u[1]], [v[0], v[1]], "r-", lw=1.5)
        ax.plot([u[0], u[2]], [v[0], v[2]], "w-", lw=1.5)
        ax.plot(u[0], v[0], "r+", ms=8)
        ax.annotate(str(ps.leaf_id), (u[0], v[0]), color="w", fontsize=8, xytext=(4, 4), textcoords="offset points")
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)
