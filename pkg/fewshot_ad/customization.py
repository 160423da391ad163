"""
FEWSHOT-AD CUSTOMIZATION
========================
Turns a pre-trained base denoiser into an anomaly-free model of one object
category from k normal references.

    references --augment--> demos ("a photo of normal <obj>")
    base model --sample--> prior demos ("a photo of <obj>")
    clone(base) --train on demos + prior demos--> customized model

The base model is itself trained here, on the synthetic normal corpus of
every texture family, before any customization.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import synth
from .denoiser import DEFAULT_BASE_CHANNELS, DemoPair, Denoiser, train
from .errors import CustomizationError
from .imaging import as_image
from .prompts import CLASS_TEMPLATE, EMBED_DIM, PromptCatalog, embed_prompt
from .schedule_core import NoiseSchedule, denoise_from

log = logging.getLogger("fewshot_ad.customization")

MAX_SHOTS = 64
BASE_CORPUS_SEED_OFFSET = 10_000
BRIGHTNESS_JITTER = 0.10

# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass
class CustomizationConfig:
    per_image: int = 4
    prior_count: Optional[int] = None     # None: prior_ratio x demo count
    prior_ratio: float = 2.0
    epochs: int = 40
    learning_rate: float = 0.02
    batch_size: int = 16

    def resolved_prior_count(self, demo_count: int) -> int:
        if self.prior_count is not None:
            return int(self.prior_count)
        return int(round(self.prior_ratio * demo_count))


@dataclass
class BaseTrainingConfig:
    families: Tuple[str, ...] = synth.FAMILIES
    per_family: int = 24
    epochs: int = 30
    learning_rate: float = 0.02
    batch_size: int = 16
    base_channels: int = DEFAULT_BASE_CHANNELS

# =============================================================================
# REFERENCES
# =============================================================================

@dataclass
class ReferenceSet:
    """The k normal reference images of one object category."""
    object_name: str
    images: List[np.ndarray] = field(repr=False)

    def __post_init__(self):
        self.images = [as_image(img) for img in self.images]
        if not 1 <= len(self.images) <= MAX_SHOTS:
            raise CustomizationError(f"reference count must lie in [1, {MAX_SHOTS}], got {len(self.images)}")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise CustomizationError(f"references have mixed shapes {sorted(shapes)}")

    @property
    def shot_count(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.images[0].shape

    def as_array(self) -> np.ndarray:
        return np.stack(self.images)

# =============================================================================
# AUGMENTATION
# =============================================================================

def _augment_once(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = img
    if rng.random() < 0.5:
        out = out[:, ::-1, :]
    square = img.shape[0] == img.shape[1]
    quarter_turns = int(rng.integers(0, 4)) if square else 2 * int(rng.integers(0, 2))
    out = np.rot90(out, k=quarter_turns, axes=(0, 1))
    gain = rng.uniform(1.0 - BRIGHTNESS_JITTER, 1.0 + BRIGHTNESS_JITTER)
    return np.clip(np.ascontiguousarray(out) * gain, 0.0, 1.0)


def augment(refs: ReferenceSet, per_image: int, rng_seed: int) -> List[np.ndarray]:
    """
    Originals plus ``per_image`` augmentations each, grouped by reference.
    Each augmentation composes a random horizontal flip, a quarter-turn
    rotation (half-turns only for non-square images) and a +-10% gain.
    """
    if per_image < 0:
        raise CustomizationError(f"per_image must be >= 0, got {per_image}")
    rng = np.random.default_rng([rng_seed, 0xA06])
    out = []
    for img in refs.images:
        out.append(img)
        out.extend(_augment_once(img, rng) for _ in range(per_image))
    return out

# =============================================================================
# DEMONSTRATIONS
# =============================================================================

def sample_prior(base_model: Denoiser, prompt: str, count: int, rng_seed: int) -> List[np.ndarray]:
    """Full reverse-chain samples from the base model under ``prompt``."""
    if count <= 0:
        return []
    sched = base_model.schedule
    start = sched.num_steps - 1
    noise = np.random.default_rng([rng_seed, 0x9A1]).standard_normal((count,) + base_model.image_shape)
    cond = embed_prompt(prompt, base_model.cond_dim)
    batch = denoise_from(noise, start, cond, base_model, sched, rng_seed=[rng_seed, 0x9A2])
    return list(batch)


def build_demos(refs: ReferenceSet, catalog: PromptCatalog, per_image: int, prior_count: int,
                base_model: Denoiser, rng_seed: int) -> Tuple[List[DemoPair], List[DemoPair]]:
    """Instance demos under the canonical prompt, prior demos under the class prompt."""
    if tuple(refs.image_shape) != tuple(base_model.image_shape):
        raise CustomizationError(
            f"reference shape {refs.image_shape} does not match model shape {base_model.image_shape}")
    if prior_count < 0:
        raise CustomizationError(f"prior_count must be >= 0, got {prior_count}")
    if prior_count and not base_model.trained:
        raise CustomizationError("prior demos need a trained base model")
    canonical = catalog.canonical_prompt
    demos = [DemoPair(image=img, prompt=canonical) for img in augment(refs, per_image, rng_seed)]
    class_prompt = catalog.class_prompt
    prior = [DemoPair(image=img, prompt=class_prompt)
             for img in sample_prior(base_model, class_prompt, prior_count, rng_seed)]
    return demos, prior

# =============================================================================
# CUSTOMIZATION
# =============================================================================

def customize(base_model: Denoiser, refs: ReferenceSet, catalog: PromptCatalog,
              config: Optional[CustomizationConfig] = None, rng_seed: int = 0) -> Denoiser:
    """Fine-tune a clone of ``base_model``; the base stays untouched."""
    config = config or CustomizationConfig()
    if not base_model.trained:
        raise CustomizationError("base model is untrained; run pretrain_base or load a base checkpoint")
    base_checksum = base_model.checksum()

    demo_count = refs.shot_count * (config.per_image + 1)
    prior_count = config.resolved_prior_count(demo_count)
    demos, prior = build_demos(refs, catalog, config.per_image, prior_count, base_model, rng_seed)

    model = base_model.clone()
    model, history = train(model, demos, prior, epochs=config.epochs,
                           learning_rate=config.learning_rate, rng_seed=rng_seed,
                           batch_size=config.batch_size)

    model.metadata = {
        "stage": "customized",
        "object_name": refs.object_name,
        "shots": refs.shot_count,
        "seed": int(rng_seed),
        "demo_count": len(demos),
        "prior_count": len(prior),
        "base_checksum": base_checksum,
        "loss_history": [float(v) for v in history],
        "customization": asdict(config),
        "catalog": catalog.to_dict(),
    }
    model.artifacts = {"references": refs.as_array()}
    log.info("customized %s with %d shots: %d demos, %d prior demos, loss %.5f -> %.5f",
             refs.object_name, refs.shot_count, len(demos), len(prior), history[0], history[-1])
    return model


def references_of(model: Denoiser) -> ReferenceSet:
    """The references a customized checkpoint was built from."""
    if "references" not in model.artifacts or "object_name" not in model.metadata:
        raise CustomizationError("model carries no references; run customize first")
    return ReferenceSet(object_name=model.metadata["object_name"],
                        images=list(model.artifacts["references"]))


def catalog_of(model: Denoiser) -> PromptCatalog:
    if "catalog" not in model.metadata:
        raise CustomizationError("model carries no prompt catalog; run customize first")
    return PromptCatalog.from_dict(model.metadata["catalog"])

# =============================================================================
# BASE MODEL
# =============================================================================

def pretrain_base(image_shape: Sequence[int], schedule: NoiseSchedule,
                  config: Optional[BaseTrainingConfig] = None, seed: int = 0,
                  cond_dim: int = EMBED_DIM) -> Denoiser:
    """Base denoiser trained on every family's normal corpus under class prompts."""
    config = config or BaseTrainingConfig()
    height, width, channels = (int(v) for v in image_shape)
    corpus = synth.normal_corpus(config.families, config.per_family, (height, width),
                                 seed=BASE_CORPUS_SEED_OFFSET + seed, channels=channels)
    demos = [DemoPair(image=img, prompt=CLASS_TEMPLATE.format(family))
             for family, images in corpus.items() for img in images]

    model = Denoiser.create((height, width, channels), schedule, cond_dim=cond_dim,
                            base_channels=config.base_channels, seed=seed)
    model, history = train(model, demos, [], epochs=config.epochs,
                           learning_rate=config.learning_rate, rng_seed=seed,
                           batch_size=config.batch_size)
    model.metadata = {
        "stage": "base",
        "seed": int(seed),
        "families": list(config.families),
        "loss_history": [float(v) for v in history],
    }
    log.info("pre-trained base model on %d images (%s)", len(demos), ", ".join(config.families))
    return model


def loss_summary(model: Denoiser) -> Dict[str, float]:
    history = model.metadata.get("loss_history") or []
    if not history:
        return {}
    return {"initial_loss": history[0], "final_loss": history[-1], "epochs": len(history)}
