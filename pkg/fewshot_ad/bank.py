"""
FEWSHOT-AD MEMORY BANK
======================
The anomaly-free sample pool: generation of normal samples from the
customized model, the multi-level feature bank built from references plus
generated samples, bank files, and pool export for external detectors.

References are never evicted; generated samples fill the remaining slots
in generation order.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import container
from .customization import ReferenceSet
from .denoiser import Denoiser
from .encoder import FeatureStack, ImageEncoder
from .errors import ArtifactError, BankError
from .imaging import image_digest, quantize, read_png, write_png
from .prompts import PromptCatalog, embed_prompt, personalization_prompts
from .schedule_core import denoise_from, forward_noise

log = logging.getLogger("fewshot_ad.bank")

BANK_KIND = "memory-bank"
POOL_MANIFEST = "manifest.json"
DEFAULT_CAPACITY = 30
DEFAULT_T_RATIO_BANK = 0.15

REFERENCE = "reference"
GENERATED = "generated"

PathLike = Union[str, Path]

# =============================================================================
# MEMORY BANK
# =============================================================================

@dataclass
class MemoryBank:
    entries: List[FeatureStack] = field(repr=False)
    capacity: int
    encoder_hash: str
    provenance: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.provenance:
            self.provenance = [REFERENCE] * len(self.entries)
        if len(self.provenance) != len(self.entries):
            raise BankError("provenance tags do not match the entry count")
        if len(self.entries) > self.capacity:
            raise BankError(f"{len(self.entries)} entries exceed capacity {self.capacity}")
        bad = set(self.provenance) - {REFERENCE, GENERATED}
        if bad:
            raise BankError(f"unknown provenance tags {sorted(bad)}")
        geometry = None
        for entry in self.entries:
            if entry.encoder_hash != self.encoder_hash:
                raise BankError("bank entries were encoded with a different encoder")
            if geometry is None:
                geometry = (entry.geometry, entry.dim)
            elif (entry.geometry, entry.dim) != geometry:
                raise BankError("bank entries have inconsistent level geometry")
        self._stacks: Optional[List[np.ndarray]] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def geometry(self):
        return self.entries[0].geometry if self.entries else ()

    def level_stack(self, level: int) -> np.ndarray:
        """All entries' level ``level`` grids as one (M, h, w, d) array."""
        if not self.entries:
            raise BankError("memory bank is empty")
        if self._stacks is None:
            self._stacks = [np.stack([e.levels[l] for e in self.entries])
                            for l in range(len(self.entries[0].levels))]
        return self._stacks[level]

    def count(self, tag: str) -> int:
        return sum(1 for p in self.provenance if p == tag)

    # -------------------------------------------------------------------------
    # Bank files
    # -------------------------------------------------------------------------

    def to_bytes(self) -> bytes:
        arrays: Dict[str, np.ndarray] = {}
        for i, entry in enumerate(self.entries):
            arrays.update(entry.arrays(f"entry{i:04d}"))
        manifest = {
            "capacity": self.capacity,
            "encoder_hash": self.encoder_hash,
            "provenance": self.provenance,
            "entries": len(self.entries),
            "levels": len(self.entries[0].levels) if self.entries else 0,
        }
        return container.to_bytes(arrays, manifest, BANK_KIND)

    def save(self, path: PathLike) -> Path:
        path = container.atomic_write_bytes(path, self.to_bytes())
        log.info("bank written: %s (%d reference, %d generated)",
                 path, self.count(REFERENCE), self.count(GENERATED))
        return path

    @classmethod
    def load(cls, path: PathLike) -> "MemoryBank":
        arrays, manifest = container.read_container(path, BANK_KIND)
        entries = []
        for i in range(manifest["entries"]):
            prefix = f"entry{i:04d}"
            levels = [arrays[f"{prefix}/level{l}"] for l in range(manifest["levels"])]
            entries.append(FeatureStack(levels=levels, global_vec=arrays[f"{prefix}/global"],
                                        encoder_hash=manifest["encoder_hash"]))
        return cls(entries=entries, capacity=manifest["capacity"],
                   encoder_hash=manifest["encoder_hash"], provenance=list(manifest["provenance"]))

# =============================================================================
# SAMPLE GENERATION
# =============================================================================

def generate_normals(model: Denoiser, catalog: PromptCatalog, count: int, refs: ReferenceSet,
                     t_ratio_bank: float = DEFAULT_T_RATIO_BANK, rng_seed: int = 0,
                     prompt_count: int = 3) -> List[np.ndarray]:
    """
    ``count`` anomaly-free samples: a random reference noised to
    ``t_ratio_bank`` and denoised under a random normal prompt. Outputs are
    quantized to file depth so exported pools round-trip exactly.
    """
    if count < 0:
        raise BankError(f"count must be >= 0, got {count}")
    if not 0.0 < t_ratio_bank < 1.0:
        raise BankError(f"t_ratio_bank must lie in (0, 1), got {t_ratio_bank}")
    if count == 0:
        return []

    sched = model.schedule
    t = sched.step_for_ratio(t_ratio_bank)
    prompts = personalization_prompts(catalog, prompt_count)
    picker = np.random.default_rng([rng_seed, 0xBA4C])
    samples = []
    for i in range(count):
        ref = refs.images[int(picker.integers(len(refs.images)))]
        prompt = prompts[int(picker.integers(len(prompts)))]
        eps = np.random.default_rng([rng_seed, i, 0]).standard_normal(ref.shape)
        x_t = forward_noise(ref, t, eps, sched)
        sample = denoise_from(x_t, t, embed_prompt(prompt, model.cond_dim), model, sched,
                              rng_seed=[rng_seed, i, 1])
        samples.append(quantize(sample))
    log.info("generated %d normal samples at t=%d", count, t)
    return samples

# =============================================================================
# BANK BUILD
# =============================================================================

def build_bank(references: Sequence[np.ndarray], generated: Sequence[np.ndarray],
               encoder: ImageEncoder, capacity: int = DEFAULT_CAPACITY) -> MemoryBank:
    """All references, then generated samples in order until ``capacity``."""
    if capacity < len(references):
        raise BankError(f"capacity {capacity} cannot hold {len(references)} references")
    room = capacity - len(references)
    if len(generated) > room:
        log.warning("bank capacity %d: keeping %d of %d generated samples",
                    capacity, room, len(generated))
    kept = list(generated[:room])
    entries = encoder.encode_many(list(references) + kept)
    return MemoryBank(
        entries=entries,
        capacity=int(capacity),
        encoder_hash=encoder.config_hash(),
        provenance=[REFERENCE] * len(references) + [GENERATED] * len(kept),
    )

# =============================================================================
# POOL EXPORT
# =============================================================================

def export_pool(images: Sequence[np.ndarray], out_dir: PathLike, seed: int = 0,
                model_hash: str = "", provenance: Optional[Sequence[str]] = None) -> Dict:
    """Write images as lossless PNGs plus a manifest; returns the manifest."""
    out_dir = Path(out_dir)
    tags = list(provenance) if provenance is not None else [GENERATED] * len(images)
    if len(tags) != len(images):
        raise BankError("provenance list does not match the image count")
    files = []
    for i, (img, tag) in enumerate(zip(images, tags)):
        name = f"{i:04d}.png"
        img = quantize(img)
        write_png(img, out_dir / name)
        files.append({"file": name, "provenance": tag, "digest": image_digest(img)[:16]})
    manifest = {"seed": seed, "model_hash": model_hash, "count": len(files), "files": files}
    container.atomic_write_json(out_dir / POOL_MANIFEST, manifest)
    log.info("exported %d samples to %s", len(files), out_dir)
    return manifest


def import_pool(pool_dir: PathLike) -> List[np.ndarray]:
    """Read an exported pool back in manifest order."""
    pool_dir = Path(pool_dir)
    manifest_path = pool_dir / POOL_MANIFEST
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ArtifactError(f"could not read pool manifest: {e}", path=str(manifest_path)) from e
    return [read_png(pool_dir / item["file"]) for item in manifest["files"]]
