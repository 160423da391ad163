import numpy as np
import pytest

from conftest import FixedTargetModel, PassThroughModel
from fewshot_ad.bank import (GENERATED, REFERENCE, MemoryBank, build_bank, export_pool,
                             generate_normals, import_pool)
from fewshot_ad.customization import ReferenceSet
from fewshot_ad.denoiser import Denoiser
from fewshot_ad.encoder import make_encoder
from fewshot_ad.errors import ArtifactError, BankError
from fewshot_ad.imaging import quantize
from fewshot_ad.prompts import PromptCatalog


@pytest.fixture
def encoder():
    return make_encoder(cell_sizes=(4, 8), dim=16)


def _images(rng, n, size=16):
    return [quantize(rng.random((size, size, 1))) for _ in range(n)]

# ==========================================
# BUILD
# ==========================================

def test_capacity_keeps_references_first(rng, encoder):
    refs, generated = _images(rng, 8), _images(rng, 40)
    bank = build_bank(refs, generated, encoder, capacity=30)
    assert len(bank) == 30
    assert bank.count(REFERENCE) == 8
    assert bank.count(GENERATED) == 22
    assert bank.provenance[:8] == [REFERENCE] * 8
    expected = encoder.encode_image(generated[21])
    np.testing.assert_array_equal(bank.entries[29].levels[0], expected.levels[0])


def test_no_padding_when_short(rng, encoder):
    bank = build_bank(_images(rng, 2), [], encoder, capacity=30)
    assert len(bank) == 2
    assert bank.capacity == 30


def test_capacity_below_reference_count(rng, encoder):
    with pytest.raises(BankError):
        build_bank(_images(rng, 3), [], encoder, capacity=2)


def test_level_stack_shape(rng, encoder):
    bank = build_bank(_images(rng, 3), _images(rng, 2), encoder, capacity=5)
    assert bank.level_stack(0).shape == (5, 4, 4, 16)
    assert bank.level_stack(1).shape == (5, 2, 2, 16)


def test_mixed_encoders_rejected(rng, encoder):
    other = make_encoder(cell_sizes=(4, 8), dim=16, seed=9)
    a = encoder.encode_image(_images(rng, 1)[0])
    b = other.encode_image(_images(rng, 1)[0])
    with pytest.raises(BankError):
        MemoryBank(entries=[a, b], capacity=2, encoder_hash=encoder.config_hash())


def test_bank_bytes_are_order_deterministic(rng, encoder, tmp_path):
    refs, generated = _images(rng, 3), _images(rng, 4)
    first = build_bank(refs, generated, encoder, capacity=6)
    second = build_bank(refs, generated, encoder, capacity=6)
    assert first.to_bytes() == second.to_bytes()

    path = first.save(tmp_path / "stripes.bank")
    loaded = MemoryBank.load(path)
    assert loaded.to_bytes() == first.to_bytes()
    assert loaded.provenance == first.provenance


def test_loading_a_checkpoint_as_bank_fails(tmp_path, short_schedule):
    path = Denoiser.create((8, 8, 1), short_schedule, base_channels=4).save(tmp_path / "m.ckpt")
    with pytest.raises(ArtifactError):
        MemoryBank.load(path)

# ==========================================
# GENERATION AND POOLS
# ==========================================

def test_zero_count_generates_nothing(rng, schedule):
    refs = ReferenceSet("stripes", _images(rng, 2))
    model = FixedTargetModel(refs.images[0], schedule)
    assert generate_normals(model, PromptCatalog("stripes"), 0, refs) == []
    assert model.calls == 0


def test_generation_with_a_perfect_denoiser(rng, schedule):
    refs = ReferenceSet("stripes", _images(rng, 1))
    model = FixedTargetModel(refs.images[0], schedule)
    samples = generate_normals(model, PromptCatalog("stripes"), 3, refs, t_ratio_bank=0.15, rng_seed=4)
    assert len(samples) == 3
    for sample in samples:
        np.testing.assert_array_equal(sample, refs.images[0])


def test_generation_is_seeded(rng, schedule):
    refs = ReferenceSet("stripes", _images(rng, 2))
    model = PassThroughModel((16, 16, 1), schedule)
    a = generate_normals(model, PromptCatalog("stripes"), 2, refs, rng_seed=1)
    b = generate_normals(model, PromptCatalog("stripes"), 2, refs, rng_seed=1)
    c = generate_normals(model, PromptCatalog("stripes"), 2, refs, rng_seed=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a[0], c[0])


def test_bad_generation_arguments(rng, schedule):
    refs = ReferenceSet("stripes", _images(rng, 1))
    model = FixedTargetModel(refs.images[0], schedule)
    with pytest.raises(BankError):
        generate_normals(model, PromptCatalog("stripes"), -1, refs)
    with pytest.raises(BankError):
        generate_normals(model, PromptCatalog("stripes"), 1, refs, t_ratio_bank=1.0)


def test_exported_pool_reads_back_pixel_identical(rng, tmp_path):
    images = _images(rng, 3) + [quantize(rng.random((16, 16, 3)))]
    manifest = export_pool(images, tmp_path / "pool", seed=7, model_hash="abc")
    assert manifest["count"] == 4
    assert (tmp_path / "pool" / "0000.png").exists()
    for original, loaded in zip(images, import_pool(tmp_path / "pool")):
        np.testing.assert_array_equal(original, loaded)


def test_missing_pool_manifest(tmp_path):
    with pytest.raises(ArtifactError):
        import_pool(tmp_path)
