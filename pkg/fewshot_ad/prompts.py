"""
FEWSHOT-AD PROMPTS
==================
Prompt catalog (state phrases x physical templates) and the deterministic
prompt -> embedding map used for conditioning and text scoring.

The embedding is a seeded feature-hashing scheme: word unigrams and bigrams
are hashed into a sparse vector, projected to d_c by a seeded Gaussian
matrix and normalized to unit length.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

from .errors import PromptError

log = logging.getLogger("fewshot_ad.prompts")

# =============================================================================
# CATALOG CONSTANTS
# =============================================================================

PLACEHOLDER = "{}"

NORMAL_STATES = ("without flaw", "without defect", "without damage")
ABNORMAL_STATES = ("with flaw", "with defect", "with damage")

PHYSICAL_TEMPLATES = (
    "a photo of a small {}.",
    "a photo of a large {}.",
    "a bright photo of a {}.",
    "a dark photo of a {}.",
    "a blurry photo of a {}.",
    "a bad photo of a {}.",
    "a good photo of a {}.",
    "a cropped photo of a {}.",
    "a close-up photo of a {}.",
    "a low resolution photo of a {}.",
)

PLAIN_TEMPLATE = "a photo of a {}."
CANONICAL_TEMPLATE = "a photo of normal {}"   # customization demos
CLASS_TEMPLATE = "a photo of {}"              # class-generic prior prompt

CATALOG_DIR = Path(__file__).parent / "catalogs"

# =============================================================================
# EMBEDDING CONSTANTS
# =============================================================================

EMBED_DIM = 64
EMBED_SEED = 1729
HASH_FEATURES = 2 ** 12
EMBEDDING_SCHEME = "hashing-ngram-1-2/v1"

PathLike = Union[str, Path]

# =============================================================================
# DATA STRUCTURES
# =============================================================================

class Polarity(Enum):
    NORMAL = "normal"
    ABNORMAL = "abnormal"


@dataclass(frozen=True)
class ConditionEmbedding:
    """Unit vector a prompt is embedded to, plus the prompt itself."""
    vector: np.ndarray = field(repr=False)
    source_prompt: str

    def __post_init__(self):
        vec = np.array(self.vector, dtype=np.float64).reshape(-1)
        if vec.size == 0 or not np.all(np.isfinite(vec)):
            raise PromptError(f"embedding of {self.source_prompt!r} has non-finite entries")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def dim(self) -> int:
        return int(self.vector.size)


def _state_phrase(object_name: str, state: str) -> str:
    if PLACEHOLDER in state:
        return state.format(object_name)
    return f"{object_name} {state}"


@dataclass(frozen=True)
class PromptCatalog:
    """State phrases and physical templates for one object category."""
    object_name: str
    normal_states: Tuple[str, ...] = NORMAL_STATES
    abnormal_states: Tuple[str, ...] = ABNORMAL_STATES
    physical_templates: Tuple[str, ...] = PHYSICAL_TEMPLATES
    plain_template: str = PLAIN_TEMPLATE

    def __post_init__(self):
        for name in ("normal_states", "abnormal_states", "physical_templates"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.object_name or not self.object_name.strip():
            raise PromptError("catalog object name is empty")
        if not self.normal_states or not self.abnormal_states:
            raise PromptError(f"catalog {self.object_name!r} needs normal and abnormal states")
        if not self.physical_templates:
            raise PromptError(f"catalog {self.object_name!r} has no physical templates")
        for template in self.physical_templates + (self.plain_template,):
            if template.count(PLACEHOLDER) != 1:
                raise PromptError(f"template {template!r} must contain exactly one {PLACEHOLDER}")
        for state in self.normal_states + self.abnormal_states:
            if state.count(PLACEHOLDER) > 1 or not state.strip():
                raise PromptError(f"bad state phrase {state!r}")

        rendered = self._render(self.normal_states) + self._render(self.abnormal_states)
        if len(set(rendered)) != len(rendered):
            raise PromptError(f"catalog {self.object_name!r} renders duplicate prompts")

    def _render(self, states: Sequence[str]) -> List[str]:
        phrases = [_state_phrase(self.object_name, s) for s in states]
        return [t.format(p) for p in phrases for t in self.physical_templates]

    def states(self, polarity: Polarity) -> Tuple[str, ...]:
        return self.normal_states if polarity is Polarity.NORMAL else self.abnormal_states

    @property
    def canonical_prompt(self) -> str:
        return CANONICAL_TEMPLATE.format(self.object_name)

    @property
    def class_prompt(self) -> str:
        return CLASS_TEMPLATE.format(self.object_name)

    def to_dict(self) -> Dict:
        return {
            "object_name": self.object_name,
            "normal_states": list(self.normal_states),
            "abnormal_states": list(self.abnormal_states),
            "physical_templates": list(self.physical_templates),
            "plain_template": self.plain_template,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "PromptCatalog":
        try:
            return cls(
                object_name=data["object_name"],
                normal_states=tuple(data.get("normal_states", NORMAL_STATES)),
                abnormal_states=tuple(data.get("abnormal_states", ABNORMAL_STATES)),
                physical_templates=tuple(data.get("physical_templates", PHYSICAL_TEMPLATES)),
                plain_template=data.get("plain_template", PLAIN_TEMPLATE),
            )
        except KeyError as e:
            raise PromptError(f"catalog missing field {e}")

# =============================================================================
# RENDERING
# =============================================================================

def render_prompts(catalog: PromptCatalog, polarity: Union[Polarity, str]) -> List[str]:
    """State x template cross product, state-major, stable order."""
    polarity = Polarity(polarity)
    return catalog._render(catalog.states(polarity))


def personalization_prompts(catalog: PromptCatalog, count: int = 3) -> List[str]:
    """
    Normal prompts used for one-to-normal candidates.

    Normal states under the plain template come first, then the physical
    templates; ``count`` takes a prefix (3 = one candidate per state).
    """
    if count < 1:
        raise PromptError(f"prompt count must be >= 1, got {count}")
    phrases = [_state_phrase(catalog.object_name, s) for s in catalog.normal_states]
    pool = [catalog.plain_template.format(p) for p in phrases]
    pool += [p for p in render_prompts(catalog, Polarity.NORMAL) if p not in pool]
    if count > len(pool):
        log.warning("requested %d personalization prompts, catalog has %d", count, len(pool))
    return pool[:count]

# =============================================================================
# CATALOG FILES
# =============================================================================

def load_catalog(path: PathLike) -> PromptCatalog:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise PromptError(f"could not load catalog {path}: {e}")
    return PromptCatalog.from_dict(data)


def save_catalog(catalog: PromptCatalog, path: PathLike) -> Path:
    from .container import atomic_write_json
    return atomic_write_json(path, catalog.to_dict())


def catalog_for(object_name: str, catalog_dir: Optional[PathLike] = None) -> PromptCatalog:
    """The shipped (or user-supplied) catalog for a category, else the default lists."""
    directory = Path(catalog_dir) if catalog_dir else CATALOG_DIR
    path = directory / f"{object_name}.json"
    if path.exists():
        return load_catalog(path)
    return PromptCatalog(object_name=object_name)

# =============================================================================
# EMBEDDING
# =============================================================================

_VECTORIZER = HashingVectorizer(
    n_features=HASH_FEATURES,
    ngram_range=(1, 2),
    token_pattern=r"(?u)\b\w+\b",
    alternate_sign=True,
    norm=None,
    lowercase=True,
)


@lru_cache(maxsize=8)
def _projection(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((HASH_FEATURES, dim)) / np.sqrt(dim)


@lru_cache(maxsize=4096)
def embed_prompt(text: str, dim: int = EMBED_DIM, seed: int = EMBED_SEED) -> ConditionEmbedding:
    if not isinstance(text, str) or not text.strip():
        raise PromptError("cannot embed an empty prompt")
    counts = _VECTORIZER.transform([text])
    vec = np.asarray(counts @ _projection(dim, seed)).reshape(-1)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise PromptError(f"prompt {text!r} has no hashable tokens")
    return ConditionEmbedding(vector=vec / norm, source_prompt=text)


def embedding_config_hash(dim: int = EMBED_DIM, seed: int = EMBED_SEED) -> str:
    key = f"{EMBEDDING_SCHEME}|{HASH_FEATURES}|{dim}|{seed}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def embedding_table_hash(prompts: Sequence[str], dim: int = EMBED_DIM, seed: int = EMBED_SEED) -> str:
    """Hash of the embedding vectors of a prompt list (order-sensitive)."""
    h = hashlib.sha256(embedding_config_hash(dim, seed).encode())
    for prompt in prompts:
        h.update(prompt.encode("utf-8"))
        h.update(embed_prompt(prompt, dim, seed).vector.tobytes())
    return h.hexdigest()[:16]
