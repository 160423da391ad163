"""
FEWSHOT-AD SYNTHETIC BENCHMARK
==============================
Deterministic procedural textures (stripes, blobs, grid) with parametric
defects (scratch, spot, occlusion) and exact ground-truth masks, written in
the MVTec folder layout:

    <out>/<family>/train/good/000.png
    <out>/<family>/test/good/NNN.png
    <out>/<family>/test/<kind>/NNN.png
    <out>/<family>/ground_truth/<kind>/NNN_mask.png
    <out>/<family>/manifest.json

Every image is a pure function of (spec.seed, family, index).
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from . import container
from .errors import SynthError
from .imaging import GRAY_DEPTH, RGB_DEPTH, quantize, write_mask, write_png

log = logging.getLogger("fewshot_ad.synth")

PathLike = Union[str, Path]

# =============================================================================
# CONSTANTS
# =============================================================================

FAMILIES = ("stripes", "blobs", "grid")
DEFECT_KINDS = ("scratch", "spot", "occlusion")

FAMILY_CODES = {name: i + 1 for i, name in enumerate(FAMILIES)}
KIND_CODES = {name: i + 1 for i, name in enumerate(DEFECT_KINDS)}

PIXEL_NOISE = 0.02
RGB_TINT = np.array([1.0, 0.9, 0.8])

# =============================================================================
# BENCHMARK SETTINGS
# =============================================================================

@dataclass(frozen=True)
class SyntheticSpec:
    """One texture family and its defect recipe."""
    texture_family: str = "stripes"
    image_size: Tuple[int, int] = (32, 32)
    defect_kinds: Tuple[str, ...] = DEFECT_KINDS
    defect_area_frac: float = 0.05
    seed: int = 0
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        object.__setattr__(self, "defect_kinds", tuple(self.defect_kinds))
        if self.texture_family not in FAMILIES:
            raise SynthError(f"unknown texture family {self.texture_family!r}; choose from {FAMILIES}")
        if len(self.image_size) != 2 or min(self.image_size) < 8:
            raise SynthError(f"image_size must be (H, W) with both >= 8, got {self.image_size}")
        unknown = set(self.defect_kinds) - set(DEFECT_KINDS)
        if unknown:
            raise SynthError(f"unknown defect kinds {sorted(unknown)}")
        if not 0.0 < self.defect_area_frac <= 0.2:
            raise SynthError(f"defect_area_frac must lie in (0, 0.2], got {self.defect_area_frac}")
        if self.channels not in (1, 3):
            raise SynthError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def family_code(self) -> int:
        return FAMILY_CODES[self.texture_family]

    def area_bounds(self) -> Tuple[int, int]:
        """Inclusive pixel-count bounds for one defect mask."""
        total = self.image_size[0] * self.image_size[1]
        high = int(math.floor(self.defect_area_frac * total))
        low = int(math.ceil(0.5 * self.defect_area_frac * total))
        if high < 1 or low > high:
            raise SynthError(
                f"defect_area_frac {self.defect_area_frac} too small for image {self.image_size}")
        return max(low, 1), high

    def to_dict(self) -> Dict:
        return {
            "texture_family": self.texture_family,
            "image_size": list(self.image_size),
            "defect_kinds": list(self.defect_kinds),
            "defect_area_frac": self.defect_area_frac,
            "seed": self.seed,
            "channels": self.channels,
        }

# =============================================================================
# NORMAL TEXTURES
# =============================================================================

def _coords(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")


def _stripes(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = _coords(height, width)
    angle = math.radians(30.0 + rng.uniform(-8.0, 8.0))
    period = rng.uniform(6.0, 7.5)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    u = xx * math.cos(angle) + yy * math.sin(angle)
    return 0.5 + 0.3 * np.sin(2.0 * math.pi * u / period + phase)


def _blobs(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = _coords(height, width)
    field_ = np.zeros((height, width))
    for _ in range(int(rng.integers(5, 8))):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        sigma = rng.uniform(0.10, 0.16) * min(height, width)
        field_ += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    field_ = field_ / max(field_.max(), 1e-9)
    return 0.3 + 0.4 * field_


def _grid(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = _coords(height, width)
    period = int(rng.integers(6, 9))
    oy, ox = rng.integers(0, period, size=2)
    lines = ((yy + oy) % period < 2) | ((xx + ox) % period < 2)
    return np.where(lines, 0.7, 0.35) + rng.uniform(-0.03, 0.03)


_TEXTURES = {"stripes": _stripes, "blobs": _blobs, "grid": _grid}


def _to_channels(plane: np.ndarray, channels: int) -> np.ndarray:
    if channels == 1:
        return plane[:, :, None]
    return np.clip(plane[:, :, None] * RGB_TINT, 0.0, 1.0)


def make_normal(spec: SyntheticSpec, index: int) -> np.ndarray:
    """Defect-free texture number ``index`` of the family."""
    rng = np.random.default_rng([spec.seed, spec.family_code, int(index)])
    height, width = spec.image_size
    plane = _TEXTURES[spec.texture_family](rng, height, width)
    plane = plane + PIXEL_NOISE * rng.standard_normal((height, width))
    return quantize(_to_channels(np.clip(plane, 0.0, 1.0), spec.channels))


def normal_corpus(families: Sequence[str], per_family: int, image_size: Tuple[int, int],
                  seed: int, channels: int = 1) -> Dict[str, List[np.ndarray]]:
    """Normal images per family, used to pre-train the base denoiser."""
    corpus = {}
    for family in families:
        spec = SyntheticSpec(texture_family=family, image_size=image_size, seed=seed, channels=channels)
        corpus[family] = [make_normal(spec, i) for i in range(per_family)]
    return corpus

# =============================================================================
# DEFECTS
# =============================================================================

def _distance_field(kind: str, rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = _coords(height, width)
    cy = rng.uniform(0.25, 0.75) * height
    cx = rng.uniform(0.25, 0.75) * width
    dy, dx = yy - cy, xx - cx
    if kind == "spot":
        return np.hypot(dy, dx)
    if kind == "scratch":
        theta = rng.uniform(0.0, math.pi)
        along = dx * math.cos(theta) + dy * math.sin(theta)
        across = -dx * math.sin(theta) + dy * math.cos(theta)
        return np.abs(across) + 0.12 * np.abs(along)
    aspect = rng.uniform(0.6, 1.6)
    return np.maximum(np.abs(dy) * aspect, np.abs(dx) / aspect)


def _fill(kind: str, region: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Defective pixel values for the masked region (values only)."""
    if kind == "scratch":
        return np.full_like(region, 0.97) - 0.03 * rng.random(region.shape)
    if kind == "spot":
        target = 0.04 if region.mean() > 0.5 else 0.96
        return np.full_like(region, target)
    return np.full_like(region, 0.06) + 0.04 * rng.random(region.shape)


def inject_defect(img: np.ndarray, kind: str, spec: SyntheticSpec,
                  index: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Paint one defect of ``kind`` into ``img``.

    The mask is the k pixels nearest a random centre under the kind's
    distance (disk, elongated line, rectangle), k drawn within the area
    bounds. Pixels outside the mask are copied through unchanged.
    """
    if kind not in DEFECT_KINDS:
        raise SynthError(f"unknown defect kind {kind!r}")
    if kind not in spec.defect_kinds:
        raise SynthError(f"defect kind {kind!r} not enabled for this spec ({spec.defect_kinds})")
    img = np.asarray(img, dtype=np.float64)
    height, width = img.shape[:2]
    if (height, width) != spec.image_size:
        raise SynthError(f"image size {(height, width)} does not match spec {spec.image_size}")

    rng = np.random.default_rng([spec.seed, spec.family_code, int(index), KIND_CODES[kind], 1])
    low, high = spec.area_bounds()
    count = int(rng.integers(low, high + 1))
    distance = _distance_field(kind, rng, height, width)
    order = np.argsort(distance.reshape(-1), kind="stable")
    mask = np.zeros(height * width, dtype=bool)
    mask[order[:count]] = True
    mask = mask.reshape(height, width)

    defective = img.copy()
    depth = GRAY_DEPTH if img.shape[2] == 1 else RGB_DEPTH
    values = np.round(np.clip(_fill(kind, img.mean(axis=2)[mask], rng), 0.0, 1.0) * depth) / depth
    for c in range(img.shape[2]):
        plane = defective[:, :, c]
        plane[mask] = values
    return defective, mask

# =============================================================================
# DATASET WRITER
# =============================================================================

@dataclass
class DatasetManifest:
    root: Path
    spec: SyntheticSpec
    counts: Dict[str, int]
    files: List[Dict] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "category": self.spec.texture_family,
            "spec": self.spec.to_dict(),
            "counts": self.counts,
            "files": self.files,
        }


def write_dataset(spec: SyntheticSpec, n_train_normal: int, n_test_normal: int,
                  n_test_anom: int, out_dir: PathLike) -> DatasetManifest:
    """Write one category in MVTec layout; anomaly kinds cycle round-robin."""
    if min(n_train_normal, n_test_normal, n_test_anom) < 0:
        raise SynthError("image counts must be non-negative")
    if n_test_anom and not spec.defect_kinds:
        raise SynthError("anomalies requested but no defect kinds enabled")

    root = Path(out_dir) / spec.texture_family
    manifest = DatasetManifest(root=root, spec=spec, counts={
        "train_good": n_train_normal, "test_good": n_test_normal, "test_anomalous": n_test_anom})

    index = 0
    for i in range(n_train_normal):
        rel = f"train/good/{i:03d}.png"
        write_png(make_normal(spec, index), root / rel)
        manifest.files.append({"path": rel, "index": index, "label": 0, "kind": "good"})
        index += 1

    for i in range(n_test_normal):
        rel = f"test/good/{i:03d}.png"
        write_png(make_normal(spec, index), root / rel)
        manifest.files.append({"path": rel, "index": index, "label": 0, "kind": "good"})
        index += 1

    per_kind: Dict[str, int] = {}
    for j in range(n_test_anom):
        kind = spec.defect_kinds[j % len(spec.defect_kinds)]
        n = per_kind.get(kind, 0)
        per_kind[kind] = n + 1
        defective, mask = inject_defect(make_normal(spec, index), kind, spec, index)
        rel = f"test/{kind}/{n:03d}.png"
        mask_rel = f"ground_truth/{kind}/{n:03d}_mask.png"
        write_png(defective, root / rel)
        write_mask(mask, root / mask_rel)
        manifest.files.append({"path": rel, "index": index, "label": 1, "kind": kind,
                               "mask": mask_rel, "mask_area": int(mask.sum())})
        index += 1

    container.atomic_write_json(root / "manifest.json", manifest.to_dict())
    log.info("wrote %s: %d train, %d test normal, %d anomalous",
             root, n_train_normal, n_test_normal, n_test_anom)
    return manifest

# =============================================================================
# SEPARABILITY BASELINE
# =============================================================================

def trivial_detector_auroc(spec: SyntheticSpec, n_train_normal: int = 20,
                           n_test_normal: int = 30, n_test_anom: int = 30) -> float:
    """
    AUROC of the per-pixel distance to the mean training image, reduced by
    max over pixels. Indices follow ``write_dataset``.
    """
    from .evaluation import auroc

    train = np.stack([make_normal(spec, i) for i in range(n_train_normal)])
    mean_img = train.mean(axis=0)
    scores, labels = [], []
    index = n_train_normal
    for _ in range(n_test_normal):
        img = make_normal(spec, index)
        scores.append(float(np.sqrt(((img - mean_img) ** 2).sum(axis=2)).max()))
        labels.append(0)
        index += 1
    for j in range(n_test_anom):
        kind = spec.defect_kinds[j % len(spec.defect_kinds)]
        img, _ = inject_defect(make_normal(spec, index), kind, spec, index)
        scores.append(float(np.sqrt(((img - mean_img) ** 2).sum(axis=2)).max()))
        labels.append(1)
        index += 1
    return auroc(scores, labels)
