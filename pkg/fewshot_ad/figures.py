"""
FEWSHOT-AD FIGURES
==================
Localization panels: query, personalized image, ground-truth mask (when
known) and the anomaly heatmap overlaid on the query.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import ArtifactError  # noqa: E402
from .imaging import to_luminance  # noqa: E402

log = logging.getLogger("fewshot_ad.figures")

PathLike = Union[str, Path]


def _show(ax, img: np.ndarray, title: str):
    if img.ndim == 3 and img.shape[2] == 3:
        ax.imshow(np.clip(img, 0.0, 1.0))
    else:
        ax.imshow(to_luminance(img), cmap="gray", vmin=0.0, vmax=1.0)
    ax.set_title(title, fontsize=9)
    ax.axis("off")


def localization_panel(query: np.ndarray, heatmap: np.ndarray, out_path: PathLike,
                       personalized: Optional[np.ndarray] = None,
                       mask: Optional[np.ndarray] = None, title: str = "",
                       score: Optional[float] = None) -> Path:
    out_path = Path(out_path)
    panels = 2 + (personalized is not None) + (mask is not None)
    fig, axes = plt.subplots(1, panels, figsize=(2.6 * panels, 2.8))
    axes = np.atleast_1d(axes)

    i = 0
    _show(axes[i], query, "query")
    if personalized is not None:
        i += 1
        _show(axes[i], personalized, "personalized")
    if mask is not None:
        i += 1
        axes[i].imshow(mask, cmap="gray", vmin=0, vmax=1)
        axes[i].set_title("ground truth", fontsize=9)
        axes[i].axis("off")
    i += 1
    axes[i].imshow(to_luminance(query), cmap="gray", vmin=0.0, vmax=1.0)
    overlay = axes[i].imshow(heatmap, cmap="jet", alpha=0.5)
    peak = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
    axes[i].plot(peak[1], peak[0], marker="x", color="white", markersize=8)
    axes[i].set_title("anomaly map" if score is None else f"A = {score:.3f}", fontsize=9)
    axes[i].axis("off")
    fig.colorbar(overlay, ax=axes[i], fraction=0.046, pad=0.04)

    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()

    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out_path.parent, prefix=f".{out_path.name}.", suffix=".png")
        os.close(fd)
        fig.savefig(tmp, dpi=150)
        os.replace(tmp, out_path)
    except OSError as e:
        raise ArtifactError(f"could not write figure: {e}", path=str(out_path)) from e
    finally:
        plt.close(fig)
    log.info("figure written: %s", out_path)
    return out_path
