"""
FEWSHOT-AD PERSONALIZATION
==========================
One-to-normal personalization of a query image.

    x_q --noise to t--> x_t --denoise under each normal prompt--> candidates
    prompt whose candidate is most SSIM-similar to x_q  -> c_q
    x_q --fresh noise to t--> --denoise under c_q--> personalized image

Candidates share one noised latent and one reverse-chain seed, so they
differ only by conditioning.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .denoiser import Denoiser
from .errors import PersonalizationError
from .imaging import as_image, to_luminance
from .prompts import PromptCatalog, embed_prompt, personalization_prompts
from .schedule_core import denoise_from, forward_noise

log = logging.getLogger("fewshot_ad.personalization")

DEFAULT_T_RATIO = 0.3
SSIM_WINDOW = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# =============================================================================
# SSIM
# =============================================================================

def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """
    Mean structural similarity over 8x8 windows at stride 4 on luminance.
    Images smaller than one window are compared as a single window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise PersonalizationError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    la, lb = to_luminance(a), to_luminance(b)

    if la.shape[0] < SSIM_WINDOW or la.shape[1] < SSIM_WINDOW:
        wa, wb = la.reshape(1, -1), lb.reshape(1, -1)
    else:
        view = (SSIM_WINDOW, SSIM_WINDOW)
        wa = sliding_window_view(la, view)[::SSIM_STRIDE, ::SSIM_STRIDE].reshape(-1, SSIM_WINDOW ** 2)
        wb = sliding_window_view(lb, view)[::SSIM_STRIDE, ::SSIM_STRIDE].reshape(-1, SSIM_WINDOW ** 2)

    mu_a, mu_b = wa.mean(axis=1), wb.mean(axis=1)
    var_a, var_b = wa.var(axis=1), wb.var(axis=1)
    cov = ((wa - mu_a[:, None]) * (wb - mu_b[:, None])).mean(axis=1)
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(numerator / denominator))

# =============================================================================
# CANDIDATES AND SELECTION
# =============================================================================

def _noised_query(x_q: np.ndarray, model: Denoiser, t_ratio: float,
                  noise_seed: Sequence[int]) -> Tuple[np.ndarray, int]:
    if not 0.0 < t_ratio < 1.0:
        raise PersonalizationError(f"t_ratio must lie in (0, 1), got {t_ratio}")
    if tuple(x_q.shape) != tuple(model.image_shape):
        raise PersonalizationError(f"query shape {x_q.shape} does not match model shape {model.image_shape}")
    sched = model.schedule
    t = sched.step_for_ratio(t_ratio)
    eps = np.random.default_rng(list(noise_seed)).standard_normal(x_q.shape)
    return forward_noise(x_q, t, eps, sched), t


def reconstruct_candidates(x_q: np.ndarray, prompts: Sequence[str], model: Denoiser,
                           t_ratio: float = DEFAULT_T_RATIO, rng_seed: int = 0) -> List[np.ndarray]:
    """One reconstruction per prompt from a shared noised latent."""
    if not prompts:
        raise PersonalizationError("no candidate prompts given")
    x_q = as_image(x_q)
    x_t, t = _noised_query(x_q, model, t_ratio, [rng_seed, 0])
    return [
        denoise_from(x_t, t, embed_prompt(prompt, model.cond_dim), model, model.schedule,
                     rng_seed=[rng_seed, 2])
        for prompt in prompts
    ]


def best_prompt(prompts: Sequence[str], scores: Sequence[float]) -> Tuple[str, int]:
    """Highest-scoring prompt; ties go to the lowest index."""
    if not prompts:
        raise PersonalizationError("no candidate prompts given")
    if len(prompts) != len(scores):
        raise PersonalizationError(f"{len(prompts)} prompts but {len(scores)} scores")
    index = int(np.argmax(np.asarray(scores, dtype=np.float64)))
    return prompts[index], index


def select_prompt(x_q: np.ndarray, prompts: Sequence[str],
                  candidates: Sequence[np.ndarray]) -> Tuple[str, int]:
    """Prompt whose candidate has the highest SSIM to x_q; ties go to the lowest index."""
    if len(prompts) != len(candidates):
        raise PersonalizationError(f"{len(prompts)} prompts but {len(candidates)} candidates")
    return best_prompt(prompts, [ssim(x_q, c) for c in candidates])

# =============================================================================
# PERSONALIZATION
# =============================================================================

@dataclass
class PersonalizationResult:
    personalized: np.ndarray = field(repr=False)
    chosen_prompt: str
    candidate_scores: List[Tuple[str, float]]
    t_used: int

    def to_record(self) -> Dict:
        return {
            "chosen_prompt": self.chosen_prompt,
            "candidate_scores": [[p, float(s)] for p, s in self.candidate_scores],
            "t_used": self.t_used,
        }


def personalize(x_q: np.ndarray, model: Denoiser, catalog: PromptCatalog,
                t_ratio: float = DEFAULT_T_RATIO, rng_seed: int = 0,
                prompt_count: int = 3) -> PersonalizationResult:
    """
    Candidates over the normal prompt pool, SSIM prompt selection, then a
    final reverse chain under the chosen prompt from freshly noised x_q.
    """
    x_q = as_image(x_q)
    prompts = personalization_prompts(catalog, prompt_count)
    candidates = reconstruct_candidates(x_q, prompts, model, t_ratio, rng_seed)
    scores = [(p, ssim(x_q, c)) for p, c in zip(prompts, candidates)]
    chosen, index = best_prompt(prompts, [s for _, s in scores])

    x_t, t = _noised_query(x_q, model, t_ratio, [rng_seed, 1])
    personalized = denoise_from(x_t, t, embed_prompt(chosen, model.cond_dim), model,
                                model.schedule, rng_seed=[rng_seed, 3])
    log.debug("personalized at t=%d with %r (ssim %.4f)", t, chosen, scores[index][1])
    return PersonalizationResult(personalized=personalized, chosen_prompt=chosen,
                                 candidate_scores=scores, t_used=t)
