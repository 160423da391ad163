"""
FEWSHOT-AD DATASETS
===================
MVTec-style folder ingestion:

    <root>/<category>/train/good/*.png
    <root>/<category>/test/good/*.png
    <root>/<category>/test/<kind>/*.png
    <root>/<category>/ground_truth/<kind>/<stem>_mask.png

Files are read in sorted order so sampling by seed is reproducible.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from .container import file_sha256
from .customization import ReferenceSet
from .errors import DatasetError
from .imaging import read_mask, read_png

log = logging.getLogger("fewshot_ad.datasets")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
GOOD = "good"

PathLike = Union[str, Path]


@dataclass
class QueryImage:
    query_id: str
    image: np.ndarray = field(repr=False)
    label: int
    kind: str
    mask: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class CategoryData:
    category: str
    root: Path
    train: List[np.ndarray] = field(repr=False)
    train_ids: List[str]
    test: List[QueryImage] = field(repr=False)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.train[0].shape

    def labels(self) -> List[int]:
        return [q.label for q in self.test]


def list_images(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def list_categories(root: PathLike) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError("dataset root does not exist", path=str(root))
    return sorted(p.name for p in root.iterdir() if (p / "train" / GOOD).is_dir())


def load_category(root: PathLike, category: str,
                  image_size: Optional[Tuple[int, int]] = None) -> CategoryData:
    base = Path(root) / category
    train_dir = base / "train" / GOOD
    test_dir = base / "test"
    if not train_dir.is_dir():
        raise DatasetError("missing train/good folder", path=str(train_dir))
    if not test_dir.is_dir():
        raise DatasetError("missing test folder", path=str(test_dir))

    train_paths = list_images(train_dir)
    if not train_paths:
        raise DatasetError("no training images", path=str(train_dir))
    train = [read_png(p, image_size) for p in train_paths]

    test: List[QueryImage] = []
    for kind_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        kind = kind_dir.name
        label = 0 if kind == GOOD else 1
        for path in list_images(kind_dir):
            img = read_png(path, image_size)
            mask = None
            if label:
                mask_path = base / "ground_truth" / kind / f"{path.stem}_mask.png"
                if mask_path.exists():
                    mask = read_mask(mask_path, img.shape[:2])
                else:
                    log.warning("no ground-truth mask for %s", path)
            test.append(QueryImage(query_id=f"{kind}/{path.stem}", image=img, label=label,
                                  kind=kind, mask=mask))

    shapes = {img.shape for img in train} | {q.image.shape for q in test}
    if len(shapes) != 1:
        raise DatasetError(f"mixed image shapes {sorted(shapes)}; pass image_size to resize",
                           path=str(base))
    log.info("loaded %s: %d train, %d test (%d anomalous)", category, len(train), len(test),
             sum(q.label for q in test))
    return CategoryData(category=category, root=base, train=train,
                        train_ids=[p.stem for p in train_paths], test=test)


def sample_references(data: CategoryData, k: int, seed: int) -> ReferenceSet:
    """k distinct training normals chosen by seed."""
    if k < 1:
        raise DatasetError(f"shots must be >= 1, got {k}", path=str(data.root))
    if k > len(data.train):
        raise DatasetError(f"{k} shots requested but only {len(data.train)} training normals",
                           path=str(data.root))
    picks = np.sort(np.random.default_rng([seed, k, 0x5E7]).choice(len(data.train), size=k, replace=False))
    return ReferenceSet(object_name=data.category, images=[data.train[i] for i in picks])


def dataset_fingerprint(root: PathLike, category: str) -> str:
    """Content hash of every file under the category folder."""
    base = Path(root) / category
    if not base.is_dir():
        raise DatasetError("category folder does not exist", path=str(base))
    h = hashlib.sha256()
    for path in sorted(p for p in base.rglob("*") if p.is_file()):
        h.update(path.relative_to(base).as_posix().encode())
        h.update(file_sha256(path).encode())
    return h.hexdigest()[:16]
