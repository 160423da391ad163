"""
FEWSHOT-AD DENOISER
===================
Conditional x0-predicting denoiser D_theta, the pooled denoising loss with
prior preservation, SGD training and checkpoints.

Reference network: a three-scale convolutional encoder-decoder with skip
connections. The sinusoidal timestep embedding and the prompt embedding are
added at the bottleneck; the timestep also modulates the top decoder level.

Randomness: every demo gets its own (t, eps) draw seeded by
(run seed, [epoch,] demo digest), so the loss does not depend on batch order.
"""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import container
from .errors import DenoiserError, TrainingDivergedError
from .imaging import as_image, image_digest
from .prompts import EMBED_DIM, ConditionEmbedding, embed_prompt, embedding_config_hash
from .schedule_core import NoiseSchedule

log = logging.getLogger("fewshot_ad.denoiser")

CHECKPOINT_KIND = "denoiser-checkpoint"
TIME_DIM = 32
DEFAULT_BASE_CHANNELS = 16

PathLike = Union[str, Path]

# =============================================================================
# DATA STRUCTURES
# =============================================================================

@dataclass(frozen=True)
class DemoPair:
    """One demonstration: an image and the prompt it is paired with."""
    image: np.ndarray = field(repr=False)
    prompt: str

    def __post_init__(self):
        if not self.prompt or not self.prompt.strip():
            raise DenoiserError("demo prompt is empty")
        img = as_image(self.image)
        img.setflags(write=False)
        object.__setattr__(self, "image", img)

    def key(self) -> int:
        """Stable 63-bit digest of (image, prompt) for per-item seeding."""
        h = hashlib.sha256(image_digest(self.image).encode())
        h.update(self.prompt.encode("utf-8"))
        return int.from_bytes(h.digest()[:8], "little") >> 1

# =============================================================================
# NETWORK
# =============================================================================

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ConditionalDenoiserNet(nn.Module):
    """Three-scale conv encoder-decoder predicting x0 from (x_t, t, c)."""

    def __init__(self, channels: int, cond_dim: int, base_channels: int = DEFAULT_BASE_CHANNELS):
        super().__init__()
        c1, c2 = base_channels, base_channels * 2
        self.act = nn.SiLU()
        self.time_mlp = nn.Sequential(nn.Linear(TIME_DIM, c2), nn.SiLU(), nn.Linear(c2, c2))
        self.cond_proj = nn.Linear(cond_dim, c2)
        self.time_to_top = nn.Linear(c2, c1)

        self.enc1 = nn.Conv2d(channels, c1, 3, padding=1)
        self.enc2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(c2, c2, 3, padding=1)
        self.up3 = nn.ConvTranspose2d(c2, c2, 4, stride=2, padding=1)
        self.dec2 = nn.Conv2d(2 * c2, c2, 3, padding=1)
        self.up2 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = nn.Conv2d(2 * c1, c1, 3, padding=1)
        self.head = nn.Conv2d(c1, channels, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        temb = self.time_mlp(timestep_embedding(t, TIME_DIM))
        emb = temb + self.cond_proj(cond)

        h1 = self.act(self.enc1(x))
        h2 = self.act(self.enc2(h1))
        h3 = self.act(self.enc3(h2))
        h3 = self.act(self.mid(h3 + emb[:, :, None, None]))

        u2 = self.act(self.dec2(torch.cat([self.act(self.up3(h3)), h2], dim=1)))
        u1 = self.dec1(torch.cat([self.act(self.up2(u2)), h1], dim=1))
        u1 = self.act(u1 + self.time_to_top(temb)[:, :, None, None])
        return self.head(u1)

# =============================================================================
# DENOISER (network + contract metadata)
# =============================================================================

@dataclass
class Denoiser:
    """
    D_theta with its immutable contract: image shape, condition size and
    the schedule it is trained with. ``metadata`` and ``artifacts`` ride
    along into checkpoints (references, catalog, loss history).
    """
    net: nn.Module
    image_shape: Tuple[int, int, int]
    cond_dim: int
    schedule: NoiseSchedule
    base_channels: int = DEFAULT_BASE_CHANNELS
    trained: bool = False
    metadata: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, image_shape: Sequence[int], schedule: NoiseSchedule,
               cond_dim: int = EMBED_DIM, base_channels: int = DEFAULT_BASE_CHANNELS,
               seed: int = 0) -> "Denoiser":
        height, width, channels = (int(v) for v in image_shape)
        if height % 4 or width % 4 or height < 4 or width < 4:
            raise DenoiserError(f"image height/width must be multiples of 4, got {height}x{width}")
        if channels not in (1, 3):
            raise DenoiserError(f"channels must be 1 or 3, got {channels}")
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            net = ConditionalDenoiserNet(channels, cond_dim, base_channels)
        net.eval()
        return cls(net=net, image_shape=(height, width, channels), cond_dim=int(cond_dim),
                   schedule=schedule, base_channels=int(base_channels))

    def clone(self) -> "Denoiser":
        return Denoiser(
            net=copy.deepcopy(self.net),
            image_shape=self.image_shape,
            cond_dim=self.cond_dim,
            schedule=self.schedule,
            base_channels=self.base_channels,
            trained=self.trained,
            metadata=copy.deepcopy(self.metadata),
            artifacts={k: v.copy() for k, v in self.artifacts.items()},
        )

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def to_double(self) -> "Denoiser":
        self.net.double()
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    # -------------------------------------------------------------------------
    # Inference
    # -------------------------------------------------------------------------

    def _cond_matrix(self, cond, batch: int) -> np.ndarray:
        if isinstance(cond, ConditionEmbedding):
            cond = cond.vector
        elif isinstance(cond, str):
            cond = embed_prompt(cond, self.cond_dim).vector
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (batch, cond.size))
        if cond.shape != (batch, self.cond_dim):
            raise DenoiserError(f"condition shape {cond.shape} incompatible with cond_dim {self.cond_dim}")
        return cond

    def predict(self, x_t: np.ndarray, t, cond) -> np.ndarray:
        """Batched or single x0 prediction; numpy in, numpy out, unclamped."""
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.image_shape:
            raise DenoiserError(f"input shape {np.shape(x_t)} does not match model shape {self.image_shape}")
        n = x.shape[0]
        steps = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if np.any(steps < 0) or np.any(steps >= self.schedule.num_steps):
            raise DenoiserError(f"step {t} outside [0, {self.schedule.num_steps})")
        cond_mat = self._cond_matrix(cond, n)

        dtype = self.dtype
        with torch.no_grad():
            out = self.net(
                torch.as_tensor(x.transpose(0, 3, 1, 2).copy(), dtype=dtype),
                torch.as_tensor(steps.copy(), dtype=dtype),
                torch.as_tensor(cond_mat.copy(), dtype=dtype),
            )
        result = out.numpy().astype(np.float64).transpose(0, 2, 3, 1)
        if not np.all(np.isfinite(result)):
            raise DenoiserError("model produced non-finite output")
        return result[0] if single else result

    # -------------------------------------------------------------------------
    # Checkpoints
    # -------------------------------------------------------------------------

    def manifest(self) -> Dict[str, Any]:
        return {
            "image_shape": list(self.image_shape),
            "cond_dim": self.cond_dim,
            "base_channels": self.base_channels,
            "schedule": self.schedule.to_manifest(),
            "embedding_hash": embedding_config_hash(self.cond_dim),
            "trained": self.trained,
            "dtype": str(self.dtype).replace("torch.", ""),
            "parameter_checksum": self.checksum(),
            "metadata": self.metadata,
        }

    def to_bytes(self) -> bytes:
        arrays = {f"net/{k}": v.detach().cpu().numpy() for k, v in self.net.state_dict().items()}
        arrays["schedule/betas"] = np.asarray(self.schedule.betas)
        for name, arr in self.artifacts.items():
            arrays[f"artifacts/{name}"] = arr
        return container.to_bytes(arrays, self.manifest(), CHECKPOINT_KIND)

    def save(self, path: PathLike) -> Path:
        path = container.atomic_write_bytes(path, self.to_bytes())
        log.info("checkpoint written: %s", path)
        return path

    @classmethod
    def load(cls, path: PathLike) -> "Denoiser":
        arrays, manifest = container.read_container(path, CHECKPOINT_KIND)
        schedule = NoiseSchedule.from_betas(arrays["schedule/betas"])
        model = cls.create(manifest["image_shape"], schedule, cond_dim=manifest["cond_dim"],
                           base_channels=manifest["base_channels"])
        dtype = manifest.get("dtype", "float32")
        if dtype == "float64":
            model.to_double()
        elif dtype != "float32":
            raise DenoiserError(f"unsupported parameter dtype {dtype!r}", path=str(path))
        state = {k[len("net/"):]: torch.from_numpy(v.copy())
                 for k, v in arrays.items() if k.startswith("net/")}
        model.net.load_state_dict(state)
        expected = manifest.get("parameter_checksum")
        if expected is not None and model.checksum() != expected:
            raise DenoiserError("parameter checksum mismatch; checkpoint is corrupt", path=str(path))
        model.trained = bool(manifest.get("trained", False))
        model.metadata = dict(manifest.get("metadata", {}))
        model.artifacts = {k[len("artifacts/"):]: v for k, v in arrays.items() if k.startswith("artifacts/")}
        if manifest.get("embedding_hash") != embedding_config_hash(model.cond_dim):
            raise DenoiserError("checkpoint was trained with a different prompt embedding", path=str(path))
        return model


def predict_x0(model: Denoiser, x_t: np.ndarray, t: int, cond) -> np.ndarray:
    """D_theta(x_t, t, c): predicted clean image, unclamped."""
    return model.predict(x_t, t, cond)

# =============================================================================
# LOSS
# =============================================================================

@dataclass
class _PooledBatch:
    images: np.ndarray   # (N, H, W, C)
    conds: np.ndarray    # (N, d_c)
    keys: List[int]


def _pool(model: Denoiser, demos: Sequence[DemoPair], prior_demos: Sequence[DemoPair]) -> _PooledBatch:
    pool = list(demos) + list(prior_demos)
    images = np.stack([d.image for d in pool])
    if tuple(images.shape[1:]) != model.image_shape:
        raise DenoiserError(f"demo shape {images.shape[1:]} does not match model shape {model.image_shape}")
    conds = np.stack([embed_prompt(d.prompt, model.cond_dim).vector for d in pool])
    return _PooledBatch(images=images, conds=conds, keys=[d.key() for d in pool])


def _draws(keys: Sequence[int], shape: Tuple[int, ...], num_steps: int,
           seed_prefix: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    steps, noises = [], []
    for key in keys:
        rng = np.random.default_rng([*seed_prefix, key])
        steps.append(rng.integers(0, num_steps))
        noises.append(rng.standard_normal(shape))
    return np.asarray(steps), np.stack(noises)


def _loss_tensor(model: Denoiser, images: np.ndarray, conds: np.ndarray,
                 steps: np.ndarray, noises: np.ndarray) -> torch.Tensor:
    dtype = model.dtype
    ab = model.schedule.alpha_bars[steps][:, None, None, None]
    x_t = np.sqrt(ab) * images + np.sqrt(1.0 - ab) * noises
    target = torch.as_tensor(images.transpose(0, 3, 1, 2).copy(), dtype=dtype)
    pred = model.net(
        torch.as_tensor(x_t.transpose(0, 3, 1, 2).copy(), dtype=dtype),
        torch.as_tensor(steps.astype(np.float64), dtype=dtype),
        torch.as_tensor(conds, dtype=dtype),
    )
    return F.mse_loss(pred, target)


def pooled_loss(model: Denoiser, demos: Sequence[DemoPair], prior_demos: Sequence[DemoPair],
                sched: NoiseSchedule, rng_seed: int) -> torch.Tensor:
    """Differentiable form of ``denoising_loss``."""
    if not demos:
        raise DenoiserError("denoising loss needs at least one demo")
    if sched != model.schedule:
        raise DenoiserError("loss schedule differs from the model's schedule")
    batch = _pool(model, demos, prior_demos)
    steps, noises = _draws(batch.keys, model.image_shape, sched.num_steps, [rng_seed])
    return _loss_tensor(model, batch.images, batch.conds, steps, noises)


def denoising_loss(model: Denoiser, demos: Sequence[DemoPair], prior_demos: Sequence[DemoPair],
                   sched: NoiseSchedule, rng_seed: int) -> float:
    """
    Mean squared x0-prediction error over the pooled set demos + prior_demos.
    Both sets weigh equally per item; empty prior_demos gives the plain term.
    """
    with torch.no_grad():
        return float(pooled_loss(model, demos, prior_demos, sched, rng_seed))


def finite_difference_check(model: Denoiser, demos: Sequence[DemoPair],
                            prior_demos: Sequence[DemoPair], rng_seed: int = 0,
                            step: float = 1e-4, entries_per_block: int = 3) -> Dict[str, float]:
    """
    Max relative error per parameter block between autograd gradients of the
    pooled loss and central finite differences. Runs in float64.
    """
    model.to_double()
    model.net.zero_grad()
    loss = pooled_loss(model, demos, prior_demos, model.schedule, rng_seed)
    loss.backward()
    rng = np.random.default_rng(rng_seed)
    errors = {}
    for name, param in model.net.named_parameters():
        analytic = param.grad.detach().clone().reshape(-1)
        flat = param.data.reshape(-1)
        picks = rng.choice(flat.numel(), size=min(entries_per_block, flat.numel()), replace=False)
        worst = 0.0
        for i in picks:
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + step
                plus = pooled_loss(model, demos, prior_demos, model.schedule, rng_seed).item()
                flat[i] = original - step
                minus = pooled_loss(model, demos, prior_demos, model.schedule, rng_seed).item()
                flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            a = analytic[i].item()
            scale = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / scale)
        errors[name] = worst
    model.net.zero_grad()
    return errors

# =============================================================================
# TRAINING
# =============================================================================

def train(model: Denoiser, demos: Sequence[DemoPair], prior_demos: Sequence[DemoPair],
          epochs: int, learning_rate: float, rng_seed: int,
          batch_size: int = 16, momentum: float = 0.9,
          grad_clip: Optional[float] = 1.0) -> Tuple[Denoiser, List[float]]:
    """
    SGD with momentum on the pooled loss. Mutates ``model`` in place and
    returns it with the per-epoch mean loss history.
    """
    if isinstance(epochs, bool) or int(epochs) != epochs or epochs < 1:
        raise DenoiserError(f"epochs must be a positive integer, got {epochs!r}")
    if not demos:
        raise DenoiserError("training needs at least one demo")
    if learning_rate <= 0:
        raise DenoiserError(f"learning rate must be positive, got {learning_rate}")

    torch.use_deterministic_algorithms(True, warn_only=True)
    batch = _pool(model, demos, prior_demos)
    n = len(batch.keys)
    keys = np.asarray(batch.keys, dtype=object)
    order_rng = np.random.default_rng([rng_seed, 0x5EED])
    optimizer = torch.optim.SGD(model.net.parameters(), lr=learning_rate, momentum=momentum)

    model.net.train()
    history: List[float] = []
    for epoch in range(int(epochs)):
        order = order_rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            steps, noises = _draws(keys[idx], model.image_shape, model.schedule.num_steps,
                                   [rng_seed, epoch])
            loss = _loss_tensor(model, batch.images[idx], batch.conds[idx], steps, noises)
            if not torch.isfinite(loss):
                model.net.eval()
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, batch {start // batch_size + 1} "
                    f"(lr={learning_rate}); lower the learning rate or tighten grad clipping")
            optimizer.zero_grad()
            loss.backward()
            if grad_clip:
                nn.utils.clip_grad_norm_(model.net.parameters(), grad_clip)
            optimizer.step()
            total += loss.item() * len(idx)
        history.append(total / n)
        log.debug("epoch %d/%d loss %.6f", epoch + 1, epochs, history[-1])

    model.net.eval()
    model.trained = True
    log.info("trained %d epochs on %d items: loss %.5f -> %.5f",
             epochs, n, history[0], history[-1])
    return model, history
