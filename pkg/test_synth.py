import json

import numpy as np
import pytest

from fewshot_ad.errors import SynthError
from fewshot_ad.imaging import read_mask, read_png
from fewshot_ad.synth import (DEFECT_KINDS, FAMILIES, SyntheticSpec, inject_defect, make_normal,
                              normal_corpus, trivial_detector_auroc, write_dataset)


@pytest.mark.parametrize("family", FAMILIES)
def test_normals_are_deterministic_and_varied(family):
    spec = SyntheticSpec(texture_family=family)
    a, b = make_normal(spec, 0), make_normal(spec, 0)
    np.testing.assert_array_equal(a, b)
    assert np.max(np.abs(a - make_normal(spec, 1))) > 0.01
    assert a.shape == (32, 32, 1)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_rgb_normals():
    img = make_normal(SyntheticSpec(texture_family="blobs", channels=3), 2)
    assert img.shape == (32, 32, 3)


def test_families_differ():
    corpus = normal_corpus(FAMILIES, 2, (16, 16), seed=0)
    assert set(corpus) == set(FAMILIES)
    assert not np.array_equal(corpus["stripes"][0], corpus["grid"][0])


@pytest.mark.parametrize("kwargs", [
    {"defect_area_frac": 0.0},
    {"defect_area_frac": 0.25},
    {"texture_family": "marble"},
    {"defect_kinds": ("crack",)},
    {"image_size": (4, 4)},
])
def test_spec_invariants(kwargs):
    with pytest.raises(SynthError):
        SyntheticSpec(**kwargs)

# ==========================================
# DEFECTS
# ==========================================

@pytest.mark.parametrize("kind", DEFECT_KINDS)
def test_defect_leaves_the_rest_untouched(kind):
    spec = SyntheticSpec(texture_family="grid")
    img = make_normal(spec, 5)
    defective, mask = inject_defect(img, kind, spec, 5)
    np.testing.assert_array_equal(defective[~mask], img[~mask])
    assert not np.array_equal(defective[mask], img[mask])
    assert defective.min() >= 0.0 and defective.max() <= 1.0


def test_defect_area_within_bounds():
    spec = SyntheticSpec()
    low, high = spec.area_bounds()
    assert (low, high) == (26, 51)
    img = make_normal(spec, 0)
    for index in range(1000):
        kind = DEFECT_KINDS[index % 3]
        _, mask = inject_defect(img, kind, spec, index)
        assert low <= mask.sum() <= high


def test_defects_are_deterministic():
    spec = SyntheticSpec()
    img = make_normal(spec, 4)
    a, mask_a = inject_defect(img, "scratch", spec, 4)
    b, mask_b = inject_defect(img, "scratch", spec, 4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(mask_a, mask_b)


def test_defect_kind_checks():
    spec = SyntheticSpec(defect_kinds=("spot",))
    img = make_normal(spec, 0)
    with pytest.raises(SynthError):
        inject_defect(img, "scratch", spec, 0)
    with pytest.raises(SynthError):
        inject_defect(img, "dent", spec, 0)
    with pytest.raises(SynthError):
        inject_defect(img[:16], "spot", spec, 0)

# ==========================================
# DATASET
# ==========================================

def test_dataset_layout(tmp_path):
    spec = SyntheticSpec(texture_family="blobs")
    manifest = write_dataset(spec, 5, 4, 6, tmp_path)
    root = tmp_path / "blobs"
    assert len(list((root / "train" / "good").glob("*.png"))) == 5
    assert len(list((root / "test" / "good").glob("*.png"))) == 4
    for kind in DEFECT_KINDS:
        images = sorted((root / "test" / kind).glob("*.png"))
        assert len(images) == 2
        for path in images:
            mask_path = root / "ground_truth" / kind / f"{path.stem}_mask.png"
            assert mask_path.exists()
            assert read_mask(mask_path).any()
    assert len(manifest.files) == 15
    stored = json.loads((root / "manifest.json").read_text())
    assert stored["spec"]["seed"] == 0
    assert stored["counts"] == {"train_good": 5, "test_good": 4, "test_anomalous": 6}


def test_dataset_images_read_back_exactly(tmp_path):
    spec = SyntheticSpec()
    write_dataset(spec, 2, 0, 0, tmp_path)
    np.testing.assert_array_equal(read_png(tmp_path / "stripes" / "train" / "good" / "001.png"),
                                  make_normal(spec, 1))


def test_rewrite_is_byte_identical(tmp_path):
    spec = SyntheticSpec(texture_family="grid")
    write_dataset(spec, 3, 2, 3, tmp_path / "a")
    write_dataset(spec, 3, 2, 3, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_anomalies_need_kinds(tmp_path):
    with pytest.raises(SynthError):
        write_dataset(SyntheticSpec(defect_kinds=()), 1, 1, 1, tmp_path)


@pytest.mark.parametrize("family", FAMILIES)
def test_benchmark_is_solvable(family):
    assert trivial_detector_auroc(SyntheticSpec(texture_family=family)) >= 0.7
