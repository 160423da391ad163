"""
FEWSHOT-AD SCORER
=================
Triplet contrastive anomaly scoring of one query.

    S_P    = mean_l max_cells (1 - <F_q, F_p>)            query vs personalized
    S_N    = mean_l max_cells min_bank (1 - <F_q, m>)     query vs memory bank
    S_text = softmax(<g_q, t_normal>, <g_q, t_abnormal>)[abnormal]
    A      = S_P + alpha * S_N + beta * S_text

Bank cells are matched positionally: a query cell is compared with the same
cell of every bank entry. All feature vectors are unit norm, so cosine is a
dot product.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.special import softmax

from .bank import MemoryBank
from .encoder import FeatureStack, TextFeatures
from .errors import ScoringError

log = logging.getLogger("fewshot_ad.scorer")

DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 0.5
DEFAULT_TEMPERATURE = 1.0
UNIT_TOLERANCE = 1e-4

# =============================================================================
# BRANCH MASKS
# =============================================================================

BRANCH_P = "P"
BRANCH_N = "N"
BRANCH_TEXT = "text"
BRANCHES = (BRANCH_P, BRANCH_N, BRANCH_TEXT)
FULL_MASK: FrozenSet[str] = frozenset(BRANCHES)

ABLATION_MASKS: Tuple[FrozenSet[str], ...] = (
    frozenset({BRANCH_TEXT}),
    frozenset({BRANCH_N}),
    frozenset({BRANCH_P}),
    frozenset({BRANCH_N, BRANCH_TEXT}),
    frozenset({BRANCH_P, BRANCH_TEXT}),
    FULL_MASK,
)


def parse_mask(value: Union[str, Iterable[str]]) -> FrozenSet[str]:
    """'P,N,text' (or an iterable of names) -> frozenset of branch names."""
    names = [v.strip() for v in value.split(",")] if isinstance(value, str) else list(value)
    names = [n for n in names if n]
    unknown = set(names) - set(BRANCHES)
    if unknown or not names:
        raise ScoringError(f"bad branch mask {value!r}; use a non-empty subset of {BRANCHES}")
    return frozenset(names)


def mask_label(mask: Iterable[str]) -> str:
    return ",".join(b for b in BRANCHES if b in set(mask))

# =============================================================================
# GUARDS
# =============================================================================

def _check_pair(fq: FeatureStack, other: FeatureStack, what: str):
    if fq.encoder_hash != other.encoder_hash:
        raise ScoringError(f"encoder hash mismatch between query and {what} "
                           f"({fq.encoder_hash} vs {other.encoder_hash})")
    if fq.geometry != other.geometry or fq.dim != other.dim:
        raise ScoringError(f"feature geometry mismatch between query and {what}")


def _check_bank(fq: FeatureStack, bank: MemoryBank):
    if len(bank) == 0:
        raise ScoringError("memory bank is empty")
    if fq.encoder_hash != bank.encoder_hash:
        raise ScoringError(f"encoder hash mismatch between query and bank "
                           f"({fq.encoder_hash} vs {bank.encoder_hash})")
    if fq.geometry != bank.geometry:
        raise ScoringError("feature geometry mismatch between query and bank")

# =============================================================================
# CELL MAPS
# =============================================================================

def personalized_cells(fq: FeatureStack, fp: FeatureStack) -> List[np.ndarray]:
    """Per level: 1 - cosine between corresponding cells."""
    _check_pair(fq, fp, "personalized image")
    return [1.0 - np.einsum("hwd,hwd->hw", q, p) for q, p in zip(fq.levels, fp.levels)]


def bank_cells(fq: FeatureStack, bank: MemoryBank) -> List[np.ndarray]:
    """Per level: min over bank entries of 1 - cosine, same-position cells."""
    _check_bank(fq, bank)
    return [
        (1.0 - np.einsum("hwd,mhwd->mhw", q, bank.level_stack(l))).min(axis=0)
        for l, q in enumerate(fq.levels)
    ]


def _reduce(cells: Sequence[np.ndarray]) -> float:
    return float(np.mean([c.max() for c in cells]))

# =============================================================================
# BRANCH SCORES
# =============================================================================

def score_personalized(fq: FeatureStack, fp: FeatureStack) -> float:
    return _reduce(personalized_cells(fq, fp))


def score_bank(fq: FeatureStack, bank: MemoryBank) -> float:
    return _reduce(bank_cells(fq, bank))


def score_text(global_vec: np.ndarray, text: TextFeatures,
               temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Softmax mass on the abnormal logit."""
    if temperature <= 0:
        raise ScoringError(f"temperature must be positive, got {temperature}")
    g = np.asarray(global_vec, dtype=np.float64).reshape(-1)
    for name, vec in (("global", g), ("normal", text.normal_vec), ("abnormal", text.abnormal_vec)):
        if abs(np.linalg.norm(vec) - 1.0) > UNIT_TOLERANCE:
            raise ScoringError(f"{name} vector is not unit norm")
    if g.size != text.normal_vec.size:
        raise ScoringError(f"image feature dim {g.size} != text feature dim {text.normal_vec.size}")
    logits = np.array([g @ text.normal_vec, g @ text.abnormal_vec]) / temperature
    return float(softmax(logits)[1])


def combine(s_p: float, s_n: float, s_text: float,
            alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> float:
    return s_p + alpha * s_n + beta * s_text

# =============================================================================
# ANOMALY MAP
# =============================================================================

def cell_maps(fq: FeatureStack, fp: Optional[FeatureStack] = None,
              bank: Optional[MemoryBank] = None) -> List[np.ndarray]:
    """Per-level cell map: max of the available image-comparison branches."""
    parts = []
    if fp is not None:
        parts.append(personalized_cells(fq, fp))
    if bank is not None:
        parts.append(bank_cells(fq, bank))
    if not parts:
        return [np.zeros(level.shape[:2]) for level in fq.levels]
    return [np.maximum.reduce([p[l] for p in parts]) for l in range(len(fq.levels))]


def upsample(cells: np.ndarray, out_shape: Tuple[int, int]) -> np.ndarray:
    h, w = cells.shape
    zoomed = ndimage.zoom(cells, (out_shape[0] / h, out_shape[1] / w), order=1,
                          mode="nearest", grid_mode=True)
    if zoomed.shape != tuple(out_shape):
        raise ScoringError(f"cannot upsample {cells.shape} grid to {tuple(out_shape)}")
    return zoomed


def anomaly_map(fq: FeatureStack, fp: Optional[FeatureStack], bank: Optional[MemoryBank],
                out_shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear upsampled cell maps averaged over levels; non-negative."""
    maps = [upsample(c, out_shape) for c in cell_maps(fq, fp, bank)]
    return np.clip(np.mean(maps, axis=0), 0.0, None)

# =============================================================================
# REPORT
# =============================================================================

@dataclass
class AnomalyReport:
    s_p: float
    s_n: float
    s_text: float
    a_score: float
    heatmap: Optional[np.ndarray] = field(default=None, repr=False)
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    branches: FrozenSet[str] = FULL_MASK
    query_id: str = ""
    chosen_prompt: Optional[str] = None
    seed: Optional[int] = None
    elapsed_ms: Optional[float] = None

    def to_record(self) -> Dict:
        record = {
            "query": self.query_id,
            "s_p": self.s_p,
            "s_n": self.s_n,
            "s_text": self.s_text,
            "a_score": self.a_score,
            "alpha": self.alpha,
            "beta": self.beta,
            "branches": mask_label(self.branches),
            "chosen_prompt": self.chosen_prompt,
            "seed": self.seed,
        }
        if self.elapsed_ms is not None:
            record["elapsed_ms"] = self.elapsed_ms
        return record


def score_query(fq: FeatureStack, fp: Optional[FeatureStack], bank: Optional[MemoryBank],
                text: Optional[TextFeatures], alpha: float = DEFAULT_ALPHA,
                beta: float = DEFAULT_BETA, temperature: float = DEFAULT_TEMPERATURE,
                branches: Iterable[str] = FULL_MASK,
                out_shape: Optional[Tuple[int, int]] = None) -> AnomalyReport:
    """
    Fuse the enabled branches; a disabled branch scores 0 and contributes
    nothing. ``out_shape`` requests the heatmap.
    """
    branches = frozenset(branches)
    use_p, use_n, use_text = (BRANCH_P in branches, BRANCH_N in branches, BRANCH_TEXT in branches)
    if use_p and fp is None:
        raise ScoringError("branch P enabled but no personalized features given")
    if use_n and bank is None:
        raise ScoringError("branch N enabled but no memory bank given")
    if use_text and text is None:
        raise ScoringError("text branch enabled but no text features given")

    s_p = score_personalized(fq, fp) if use_p else 0.0
    s_n = score_bank(fq, bank) if use_n else 0.0
    s_text = score_text(fq.global_vec, text, temperature) if use_text else 0.0
    heatmap = None
    if out_shape is not None:
        heatmap = anomaly_map(fq, fp if use_p else None, bank if use_n else None, out_shape)
    return AnomalyReport(s_p=s_p, s_n=s_n, s_text=s_text,
                         a_score=combine(s_p, s_n, s_text, alpha, beta),
                         heatmap=heatmap, alpha=alpha, beta=beta, branches=branches)
