from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .aegan import EpochRecord, read_history_csv  # noqa: E402
from .core import PointCloud  # noqa: E402

# fixed ids and no timestamp keep the SVG bytes reproducible
_RC = {"svg.hashsalt": "aeot-gan", "svg.fonttype": "none"}
_META = {"Date": None, "Creator": None}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def plot_latent_scatter(codes: PointCloud, samples: PointCloud, path: Path, epsilon: Optional[float] = None) -> Path:
    """Latent codes against extended-map samples (first two coordinates)."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 5))
        for cloud, style in ((samples, dict(s=2, c="tab:purple", alpha=0.3, label="sampled")), (codes, dict(s=4, c="black", label="codes"))):
            if len(cloud):
                pts = cloud.points if cloud.dim >= 2 else np.column_stack([cloud.points[:, 0], np.zeros(len(cloud))])
                ax.scatter(pts[:, 0], pts[:, 1], **style)
        title = "latent codes vs sampled latents"
        if epsilon is not None:
            title += f" (eps={epsilon:.3g})"
        ax.set_title(title)
        ax.set_aspect("equal", adjustable="datalim")
        if len(codes) or len(samples):
            ax.legend(loc="upper right", fontsize=8)
        return _save(fig, path)


def plot_loss_curves(history: Sequence[EpochRecord], path: Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        if history:
            ep = [r.epoch for r in history]
            ax.plot(ep, [r.l_img for r in history], label="L_img")
            ax.plot(ep, [r.l_feat for r in history], label="L_feat")
            ax.plot(ep, [r.l_adv_gen for r in history], label="L_adv (G)")
            ax.plot(ep, [r.l_adv_disc for r in history], label="L_adv (D)")
            ax.set_yscale("symlog", linthresh=1e-4)
            ax.legend(fontsize=8)
        ax.set_xlabel("epoch")
        ax.set_title("training losses")
        return _save(fig, path)


def plot_discriminator_curves(history: Sequence[EpochRecord], path: Path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        if history:
            ep = [r.epoch for r in history]
            ax.plot(ep, [r.d_real_mean for r in history], label="mean d(real)")
            ax.plot(ep, [r.d_fake_mean for r in history], label="mean d(fake)")
            ax.legend(fontsize=8)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("epoch")
        ax.set_title("discriminator outputs")
        return _save(fig, path)


def emit_plots(
    history_csv: Path,
    out_dir: Path,
    codes: Optional[PointCloud] = None,
    samples: Optional[PointCloud] = None,
    epsilon: Optional[float] = None,
) -> List[Path]:
    history_csv = Path(history_csv)
    if not history_csv.exists():
        raise FileNotFoundError(f"training history not found: {history_csv}")
    history = read_history_csv(history_csv)
    out_dir = Path(out_dir)
    paths = [
        plot_loss_curves(history, out_dir / "losses.svg"),
        plot_discriminator_curves(history, out_dir / "discriminator.svg"),
    ]
    if codes is not None:
        dim = codes.dim
        paths.append(plot_latent_scatter(codes, samples if samples is not None else PointCloud.empty(dim), out_dir / "latent.svg", epsilon))
    return paths
