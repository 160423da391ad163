"""
FEWSHOT-AD IMAGING
==================
The Image carrier and lossless PNG I/O.

An Image is a numpy float array of shape (H, W, C), C in {1, 3}, values in
[0, 1]. Grayscale images are stored as 16-bit PNG, RGB as 8-bit PNG;
``quantize`` snaps an image to the depth its file will hold, so
``read_png(write_png(quantize(x)))`` reproduces ``quantize(x)`` exactly.
"""

import hashlib
import os
import tempfile
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from PIL import Image as PILImage

from .errors import ArtifactError, ImageError

# =============================================================================
# CONSTANTS
# =============================================================================

GRAY_DEPTH = 65535   # 16-bit grayscale PNG
RGB_DEPTH = 255      # 8-bit RGB PNG
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
HEATMAP_VMAX = 2.0    # cell scores are cosine distances in [0, 2]

PathLike = Union[str, Path]

# =============================================================================
# CARRIER
# =============================================================================

def as_image(array, clamp: bool = True) -> np.ndarray:
    """Validate and normalize anything array-like into an (H, W, C) Image."""
    img = np.asarray(array, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ImageError(f"expected (H, W) or (H, W, C) array, got shape {img.shape}")
    if img.shape[2] not in (1, 3):
        raise ImageError(f"channels must be 1 or 3, got {img.shape[2]}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"empty image of shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageError("image contains non-finite pixels")
    if clamp:
        img = np.clip(img, 0.0, 1.0)
    return img


def to_luminance(img: np.ndarray) -> np.ndarray:
    """Single-channel (H, W) view of an Image."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA_WEIGHTS


def quantize(img: np.ndarray) -> np.ndarray:
    img = as_image(img)
    depth = GRAY_DEPTH if img.shape[2] == 1 else RGB_DEPTH
    return np.round(img * depth) / depth


def image_digest(img: np.ndarray) -> str:
    img = np.ascontiguousarray(img, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(img.shape).encode())
    h.update(img.tobytes())
    return h.hexdigest()

# =============================================================================
# FILE I/O
# =============================================================================

def _atomic_save(pil_img: PILImage.Image, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        pil_img.save(tmp, format="PNG")
        os.replace(tmp, path)
    except OSError as e:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise ArtifactError(f"could not write image: {e}", path=str(path)) from e


def write_png(img: np.ndarray, path: PathLike) -> Path:
    """Write an Image as PNG (16-bit gray or 8-bit RGB)."""
    path = Path(path)
    img = as_image(img)
    if img.shape[2] == 1:
        data = np.round(img[:, :, 0] * GRAY_DEPTH).astype(np.uint16)
        pil_img = PILImage.fromarray(data)
    else:
        data = np.round(img * RGB_DEPTH).astype(np.uint8)
        pil_img = PILImage.fromarray(data)
    _atomic_save(pil_img, path)
    return path


def _resize(img: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    height, width = image_size
    channels = []
    for c in range(img.shape[2]):
        plane = PILImage.fromarray(img[:, :, c].astype(np.float32))
        plane = plane.resize((width, height), PILImage.BILINEAR)
        channels.append(np.asarray(plane, dtype=np.float64))
    return np.clip(np.stack(channels, axis=2), 0.0, 1.0)


def read_png(path: PathLike, image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Read a PNG (or any Pillow-readable file) into an Image."""
    path = Path(path)
    try:
        with PILImage.open(path) as pil_img:
            mode = pil_img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                data = np.asarray(pil_img, dtype=np.float64) / GRAY_DEPTH
                img = data[:, :, None]
            elif mode in ("L", "1"):
                img = np.asarray(pil_img.convert("L"), dtype=np.float64)[:, :, None] / RGB_DEPTH
            else:
                img = np.asarray(pil_img.convert("RGB"), dtype=np.float64) / RGB_DEPTH
    except (OSError, ValueError) as e:
        raise ArtifactError(f"could not read image: {e}", path=str(path)) from e
    img = as_image(img)
    if image_size is not None and tuple(img.shape[:2]) != tuple(image_size):
        img = _resize(img, image_size)
    return img


def write_mask(mask: np.ndarray, path: PathLike) -> Path:
    path = Path(path)
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    _atomic_save(PILImage.fromarray(data), path)
    return path


def read_mask(path: PathLike, image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    path = Path(path)
    try:
        with PILImage.open(path) as pil_img:
            pil_img = pil_img.convert("L")
            if image_size is not None and pil_img.size != (image_size[1], image_size[0]):
                pil_img = pil_img.resize((image_size[1], image_size[0]), PILImage.NEAREST)
            data = np.asarray(pil_img)
    except (OSError, ValueError) as e:
        raise ArtifactError(f"could not read mask: {e}", path=str(path)) from e
    return data > 127


def write_heatmap(heatmap: np.ndarray, path: PathLike, vmax: float = HEATMAP_VMAX) -> Path:
    """
    Grayscale 16-bit rendering of a non-negative heatmap on a fixed [0, vmax]
    scale, so stored maps stay comparable across queries.
    """
    if vmax <= 0:
        raise ImageError(f"heatmap vmax must be positive, got {vmax}")
    scaled = np.asarray(heatmap, dtype=np.float64) / float(vmax)
    return write_png(np.clip(scaled, 0.0, 1.0), path)
