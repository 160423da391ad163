"""
FEWSHOT-AD SCHEDULE CORE
========================
Noise schedule, forward noising and the reverse ancestral sampler.

Indexing: step t in [0, T) has cumulative signal weight alpha_bars[t]. The
reverse chain walks t_start -> 0 and returns the model's clean-image
prediction at step 0; t_start == 0 returns the input untouched.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence, Union

import numpy as np

from .errors import ScheduleError

log = logging.getLogger("fewshot_ad.schedule_core")

SeedLike = Union[int, Sequence[int]]

# =============================================================================
# DEFAULTS
# =============================================================================

DEFAULT_NUM_STEPS = 200
DEFAULT_BETA_START = 5e-4
DEFAULT_BETA_END = 0.1

# =============================================================================
# NOISE SCHEDULE
# =============================================================================

def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step betas, alphas and cumulative alpha_bars. Immutable."""
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64).reshape(-1)
        if betas.size < 1:
            raise ScheduleError("schedule needs at least one step")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleError("betas must lie strictly within (0, 1)")
        if np.any(np.diff(betas) < 0.0):
            raise ScheduleError("betas must be nondecreasing")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ScheduleError("alpha_bars must be strictly decreasing")
        return cls(
            num_steps=int(betas.size),
            betas=_frozen(betas),
            alphas=_frozen(alphas),
            alpha_bars=_frozen(alpha_bars),
        )

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSchedule) and np.array_equal(self.betas, other.betas)

    def __hash__(self):
        return hash(self.betas.tobytes())

    def check_step(self, t: int) -> int:
        if isinstance(t, bool) or int(t) != t:
            raise ScheduleError(f"step index must be an integer, got {t!r}")
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise ScheduleError(f"step {t} outside [0, {self.num_steps})")
        return t

    def step_for_ratio(self, ratio: float) -> int:
        """round(ratio * T) clipped to [1, T - 1]."""
        if not 0.0 < ratio < 1.0:
            raise ScheduleError(f"t ratio must lie in (0, 1), got {ratio}")
        upper = max(self.num_steps - 1, 1)
        return int(min(max(round(ratio * self.num_steps), 1), upper))

    def to_manifest(self) -> dict:
        return {
            "num_steps": self.num_steps,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def make_schedule(num_steps: int = DEFAULT_NUM_STEPS,
                  beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linear betas from beta_start to beta_end inclusive."""
    if isinstance(num_steps, bool) or int(num_steps) != num_steps or num_steps < 1:
        raise ScheduleError(f"num_steps must be a positive integer, got {num_steps!r}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(num_steps)))

# =============================================================================
# FORWARD PROCESS
# =============================================================================

def noise_with_alpha_bar(x0: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    """sqrt(a) * x0 + sqrt(1 - a) * eps for a single signal weight a."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ScheduleError(f"noise shape {eps.shape} does not match image shape {x0.shape}")
    if not 0.0 <= alpha_bar <= 1.0:
        raise ScheduleError(f"alpha_bar must lie in [0, 1], got {alpha_bar}")
    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0). No clamping: latents may leave [0, 1]."""
    t = sched.check_step(t)
    return noise_with_alpha_bar(x0, eps, float(sched.alpha_bars[t]))

# =============================================================================
# REVERSE PROCESS
# =============================================================================

def _check_model(x: np.ndarray, model: Any):
    shape = tuple(getattr(model, "image_shape", ()))
    if not shape:
        raise ScheduleError("model does not declare an image_shape")
    if tuple(x.shape[-3:]) != shape or x.ndim not in (3, 4):
        raise ScheduleError(f"latent shape {x.shape} incompatible with model image shape {shape}")
    if not getattr(model, "trained", True):
        raise ScheduleError("model is untrained; train or load a checkpoint before denoising")


def denoise_from(x_t: np.ndarray, t_start: int, cond: Any, model: Any,
                 sched: NoiseSchedule, rng_seed: SeedLike) -> np.ndarray:
    """
    Ancestral reverse chain from t_start down to 0.

    ``model`` is anything with ``image_shape`` and
    ``predict(x, t, cond) -> x0`` (batched or single). Each step draws
    x_{t-1} from the posterior mean built on the clamped x0 prediction with
    variance beta_t; the result is the clamped prediction at step 0.
    Accepts one latent (H, W, C) or a batch (N, H, W, C).
    A model that reports ``trained = False`` is rejected.
    """
    x = np.asarray(x_t, dtype=np.float64)
    t_start = sched.check_step(t_start)
    if t_start == 0:
        return np.clip(x, 0.0, 1.0)

    _check_model(x, model)
    rng = np.random.default_rng(rng_seed)
    for t in range(t_start, 0, -1):
        x0_hat = np.clip(model.predict(x, t, cond), 0.0, 1.0)
        beta_t = sched.betas[t]
        ab_t = sched.alpha_bars[t]
        ab_prev = sched.alpha_bars[t - 1]
        coef_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
        coef_xt = np.sqrt(sched.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
        mean = coef_x0 * x0_hat + coef_xt * x
        x = mean + np.sqrt(beta_t) * rng.standard_normal(x.shape)

    return np.clip(model.predict(x, 0, cond), 0.0, 1.0)
