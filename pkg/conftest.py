"""
Shared fixtures for the FEWSHOT-AD test files.

Stand-in models only implement the sampler contract (``image_shape``,
``schedule``, ``cond_dim``, ``predict``) so the chain and the
personalization logic can be checked without training anything.
"""

import numpy as np
import pytest

from fewshot_ad.config import RunConfig
from fewshot_ad.encoder import FeatureStack
from fewshot_ad.prompts import EMBED_DIM
from fewshot_ad.schedule_core import make_schedule
from fewshot_ad.synth import SyntheticSpec, write_dataset


class FixedTargetModel:
    """A perfect denoiser for one image: always predicts ``target``."""

    def __init__(self, target, schedule, cond_dim=EMBED_DIM):
        self.target = np.asarray(target, dtype=np.float64)
        self.image_shape = self.target.shape
        self.schedule = schedule
        self.cond_dim = cond_dim
        self.calls = 0

    def predict(self, x, t, cond):
        self.calls += 1
        return np.broadcast_to(self.target, np.shape(x)).copy()


class PassThroughModel:
    """Predicts its input unchanged."""

    def __init__(self, image_shape, schedule, cond_dim=EMBED_DIM):
        self.image_shape = tuple(image_shape)
        self.schedule = schedule
        self.cond_dim = cond_dim

    def predict(self, x, t, cond):
        return np.array(x, dtype=np.float64, copy=True)


class ExplodingModel:
    """Fails the test if the sampler ever calls it."""

    def __init__(self, image_shape, schedule):
        self.image_shape = tuple(image_shape)
        self.schedule = schedule
        self.cond_dim = EMBED_DIM

    def predict(self, x, t, cond):
        raise AssertionError("model should not be called")


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_stack(rng, grids=((4, 4), (2, 2), (1, 1)), dim=5, encoder_hash="test"):
    levels = [unit(rng.standard_normal((h, w, dim))) for h, w in grids]
    return FeatureStack(levels=levels, global_vec=unit(rng.standard_normal(dim)),
                        encoder_hash=encoder_hash)


@pytest.fixture
def schedule():
    return make_schedule(200, 5e-4, 0.1)


@pytest.fixture
def short_schedule():
    return make_schedule(10, 1e-3, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path):
    """A RunConfig small enough for end-to-end episodes in seconds."""
    return RunConfig(
        shots=2, shot_sweep=[1, 2], seeds=[0], image_size=[16, 16], cell_sizes=[4, 8],
        feature_dim=16, num_steps=10, beta_start=1e-3, beta_end=0.2, t_ratio=0.3,
        t_ratio_bank=0.3, prompt_count=2, generated_count=2, bank_capacity=4,
        per_image=0, prior_ratio=0.5, epochs=1, learning_rate=0.01, batch_size=8,
        base_channels=4, base_epochs=1, base_corpus_per_family=2,
        cache_dir=str(tmp_path / "cache"),
    )


@pytest.fixture
def tiny_dataset(tmp_path):
    """One 16x16 stripes category: 4 train, 2 good test, 3 anomalous test."""
    root = tmp_path / "data"
    spec = SyntheticSpec(texture_family="stripes", image_size=(16, 16), defect_area_frac=0.1)
    write_dataset(spec, 4, 2, 3, root)
    return root
