"""
FEWSHOT-AD ENCODER
==================
Multi-level grid features plus one global vector per image, and the
two-row text feature matrix.

The reference ``PatchDescriptorEncoder`` is training-free: each cell of each
level is described by [bias, mean, spread, gradient-orientation histogram]
over the luminance plane, projected to ``dim`` by a seeded Gaussian matrix
and normalized. Gradients use a 3x3 Sobel stencil, so a cell's receptive
field is the cell grown by one pixel on every side.

Any ``ImageEncoder`` that emits unit-norm cells on strictly coarser grids can
replace the reference without touching the scorer.
"""

import hashlib
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import EncoderError
from .imaging import as_image, to_luminance
from .prompts import EMBED_DIM, embed_prompt

log = logging.getLogger("fewshot_ad.encoder")

UNIT_TOL = 1e-6

# =============================================================================
# DATA STRUCTURES
# =============================================================================

def _unit_rows(arr: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise EncoderError("cannot normalize a zero feature vector")
    return arr / norms


@dataclass
class FeatureStack:
    """Per-level (h_l, w_l, d) grids and a global d-vector, all unit-norm."""
    levels: List[np.ndarray] = field(repr=False)
    global_vec: np.ndarray = field(repr=False)
    encoder_hash: str = ""

    def __post_init__(self):
        self.levels = [np.asarray(level, dtype=np.float64) for level in self.levels]
        self.global_vec = np.asarray(self.global_vec, dtype=np.float64).reshape(-1)
        if len(self.levels) < 2:
            raise EncoderError(f"a feature stack needs at least 2 levels, got {len(self.levels)}")
        dim = self.global_vec.size
        for i, level in enumerate(self.levels):
            if level.ndim != 3 or level.shape[2] != dim:
                raise EncoderError(f"level {i} has shape {level.shape}, expected (h, w, {dim})")
            if i and (level.shape[0] > self.levels[i - 1].shape[0]
                      or level.shape[1] > self.levels[i - 1].shape[1]):
                raise EncoderError("levels must get coarser with depth")
            if np.max(np.abs(np.linalg.norm(level, axis=2) - 1.0)) > UNIT_TOL:
                raise EncoderError(f"level {i} cells are not unit norm")
        if abs(np.linalg.norm(self.global_vec) - 1.0) > UNIT_TOL:
            raise EncoderError("global vector is not unit norm")

    @property
    def dim(self) -> int:
        return int(self.global_vec.size)

    @property
    def geometry(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(level.shape[:2] for level in self.levels)

    def arrays(self, prefix: str) -> dict:
        out = {f"{prefix}/level{i}": level for i, level in enumerate(self.levels)}
        out[f"{prefix}/global"] = self.global_vec
        return out


@dataclass(frozen=True)
class TextFeatures:
    normal_vec: np.ndarray = field(repr=False)
    abnormal_vec: np.ndarray = field(repr=False)

    def __post_init__(self):
        for name in ("normal_vec", "abnormal_vec"):
            vec = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOL:
                raise EncoderError(f"{name} is not unit norm")
            object.__setattr__(self, name, vec)

    def swapped(self) -> "TextFeatures":
        return TextFeatures(normal_vec=self.abnormal_vec, abnormal_vec=self.normal_vec)

# =============================================================================
# ENCODER CONTRACT
# =============================================================================

class ImageEncoder(ABC):
    """Image -> FeatureStack. Implementations are stateless after construction."""

    @abstractmethod
    def encode_image(self, img: np.ndarray) -> FeatureStack:
        ...

    @abstractmethod
    def config(self) -> dict:
        ...

    def config_hash(self) -> str:
        payload = json.dumps({"encoder": type(self).__name__, **self.config()}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def encode_many(self, images: Sequence[np.ndarray]) -> List[FeatureStack]:
        return [self.encode_image(img) for img in images]


def _check_cells(cell_sizes: Sequence[int]) -> Tuple[int, ...]:
    sizes = tuple(int(s) for s in cell_sizes)
    if len(sizes) < 2:
        raise EncoderError(f"need at least 2 cell sizes, got {sizes}")
    if any(s < 1 for s in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise EncoderError(f"cell sizes must be positive and strictly increasing, got {sizes}")
    return sizes


def _cell_view(plane: np.ndarray, size: int) -> np.ndarray:
    """(H, W) -> (H/size, W/size, size*size) cell blocks."""
    height, width = plane.shape
    if height % size or width % size:
        raise EncoderError(f"image {height}x{width} is not divisible into {size}x{size} cells")
    blocks = plane.reshape(height // size, size, width // size, size).swapaxes(1, 2)
    return blocks.reshape(height // size, width // size, size * size)

# =============================================================================
# REFERENCE ENCODER
# =============================================================================

class PatchDescriptorEncoder(ImageEncoder):
    """
    Fixed multi-scale patch descriptor.

    Default cell sizes (4, 8, 16) give 8x8, 4x4 and 2x2 grids on a 32x32
    image. The global vector is the normalized mean of the coarsest cells.
    """

    def __init__(self, cell_sizes: Sequence[int] = (4, 8, 16), dim: int = EMBED_DIM,
                 seed: int = 0, bins: int = 8):
        self.cell_sizes = _check_cells(cell_sizes)
        if dim < 2 or bins < 1:
            raise EncoderError(f"bad encoder size (dim={dim}, bins={bins})")
        self.dim = int(dim)
        self.seed = int(seed)
        self.bins = int(bins)
        raw = 3 + self.bins
        self._projections = [
            np.random.default_rng([self.seed, level]).standard_normal((raw, self.dim)) / np.sqrt(raw)
            for level in range(len(self.cell_sizes))
        ]

    def config(self) -> dict:
        return {"cell_sizes": list(self.cell_sizes), "dim": self.dim,
                "seed": self.seed, "bins": self.bins}

    def _gradients(self, lum: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        gx = ndimage.sobel(lum, axis=1, mode="nearest")
        gy = ndimage.sobel(lum, axis=0, mode="nearest")
        magnitude = np.hypot(gx, gy)
        orientation = np.mod(np.arctan2(gy, gx), np.pi)
        bins = np.minimum((orientation / np.pi * self.bins).astype(int), self.bins - 1)
        return magnitude, bins

    def _level(self, lum, magnitude, bins, size: int, projection: np.ndarray) -> np.ndarray:
        values = _cell_view(lum, size)
        mags = _cell_view(magnitude, size)
        idx = _cell_view(bins, size)
        h, w, _ = values.shape
        hist = np.zeros((h, w, self.bins))
        for b in range(self.bins):
            hist[:, :, b] = np.where(idx == b, mags, 0.0).sum(axis=2)
        hist /= size * size
        raw = np.concatenate([
            np.ones((h, w, 1)),
            ((values.mean(axis=2) - 0.5) * 2.0)[:, :, None],
            (values.std(axis=2) * 4.0)[:, :, None],
            hist,
        ], axis=2)
        return _unit_rows(raw @ projection)

    def encode_image(self, img: np.ndarray) -> FeatureStack:
        img = as_image(img)
        height, width = img.shape[:2]
        if min(height, width) < self.cell_sizes[-1]:
            raise EncoderError(f"image {height}x{width} smaller than the coarsest cell {self.cell_sizes[-1]}")
        lum = to_luminance(img)
        magnitude, bins = self._gradients(lum)
        levels = [self._level(lum, magnitude, bins, size, proj)
                  for size, proj in zip(self.cell_sizes, self._projections)]
        global_vec = _unit_rows(levels[-1].reshape(-1, self.dim).mean(axis=0))
        return FeatureStack(levels=levels, global_vec=global_vec, encoder_hash=self.config_hash())


class AveragePoolEncoder(ImageEncoder):
    """Per-cell channel means and spreads; the minimal contract implementation."""

    def __init__(self, cell_sizes: Sequence[int] = (4, 8)):
        self.cell_sizes = _check_cells(cell_sizes)

    def config(self) -> dict:
        return {"cell_sizes": list(self.cell_sizes)}

    def encode_image(self, img: np.ndarray) -> FeatureStack:
        img = as_image(img)
        levels = []
        for size in self.cell_sizes:
            parts = [np.ones(_cell_view(img[:, :, 0], size).shape[:2] + (1,))]
            for c in range(img.shape[2]):
                cells = _cell_view(img[:, :, c], size)
                parts += [cells.mean(axis=2, keepdims=True), cells.std(axis=2, keepdims=True)]
            levels.append(_unit_rows(np.concatenate(parts, axis=2)))
        dim = levels[0].shape[2]
        global_vec = _unit_rows(levels[-1].reshape(-1, dim).mean(axis=0))
        return FeatureStack(levels=levels, global_vec=global_vec, encoder_hash=self.config_hash())


def make_encoder(cell_sizes: Sequence[int] = (4, 8, 16), dim: int = EMBED_DIM,
                 seed: int = 0) -> PatchDescriptorEncoder:
    return PatchDescriptorEncoder(cell_sizes=cell_sizes, dim=dim, seed=seed)

# =============================================================================
# TEXT FEATURES
# =============================================================================

def encode_texts(normal_prompts: Sequence[str], abnormal_prompts: Sequence[str],
                 dim: int = EMBED_DIM) -> TextFeatures:
    """Per-polarity mean of prompt embeddings, renormalized."""
    if not normal_prompts or not abnormal_prompts:
        raise EncoderError("text features need non-empty normal and abnormal prompt lists")

    def pooled(prompts: Sequence[str]) -> np.ndarray:
        stacked = np.stack([embed_prompt(p, dim).vector for p in prompts])
        return _unit_rows(stacked.mean(axis=0))

    return TextFeatures(normal_vec=pooled(normal_prompts), abnormal_vec=pooled(abnormal_prompts))
