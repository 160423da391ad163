import numpy as np
import pytest

from fewshot_ad.datasets import (dataset_fingerprint, list_categories, load_category,
                                 sample_references)
from fewshot_ad.errors import DatasetError
from fewshot_ad.synth import SyntheticSpec, inject_defect, make_normal, write_dataset


def test_load_category(tiny_dataset):
    data = load_category(tiny_dataset, "stripes")
    assert len(data.train) == 4
    assert data.train_ids == ["000", "001", "002", "003"]
    assert data.image_shape == (16, 16, 1)
    assert sorted(data.labels()) == [0, 0, 1, 1, 1]
    ids = [q.query_id for q in data.test]
    assert "good/000" in ids and "scratch/000" in ids
    for q in data.test:
        assert (q.mask is not None) == bool(q.label)


def test_masks_match_the_injected_defects(tiny_dataset):
    data = load_category(tiny_dataset, "stripes")
    spec = SyntheticSpec(texture_family="stripes", image_size=(16, 16), defect_area_frac=0.1)
    spot = next(q for q in data.test if q.query_id == "spot/000")
    # train 0-3, test good 4-5, anomalies 6 (scratch), 7 (spot), 8 (occlusion)
    _, mask = inject_defect(make_normal(spec, 7), "spot", spec, 7)
    np.testing.assert_array_equal(spot.mask, mask)


def test_resizing_on_load(tiny_dataset):
    data = load_category(tiny_dataset, "stripes", image_size=(8, 8))
    assert data.image_shape == (8, 8, 1)
    assert all(q.mask is None or q.mask.shape == (8, 8) for q in data.test)


def test_missing_mask_is_tolerated(tiny_dataset):
    (tiny_dataset / "stripes" / "ground_truth" / "spot" / "000_mask.png").unlink()
    data = load_category(tiny_dataset, "stripes")
    assert next(q for q in data.test if q.query_id == "spot/000").mask is None


def test_missing_folders(tmp_path, tiny_dataset):
    with pytest.raises(DatasetError):
        load_category(tiny_dataset, "grid")
    with pytest.raises(DatasetError):
        list_categories(tmp_path / "nowhere")


def test_list_categories(tmp_path):
    for family in ("grid", "blobs"):
        write_dataset(SyntheticSpec(texture_family=family, image_size=(8, 8)), 1, 1, 0, tmp_path)
    (tmp_path / "notes").mkdir()
    assert list_categories(tmp_path) == ["blobs", "grid"]


def test_reference_sampling(tiny_dataset):
    data = load_category(tiny_dataset, "stripes")
    a = sample_references(data, 2, seed=0)
    b = sample_references(data, 2, seed=0)
    assert a.shot_count == 2
    for x, y in zip(a.images, b.images):
        np.testing.assert_array_equal(x, y)
    picked = [next(i for i, t in enumerate(data.train) if np.array_equal(t, img)) for img in a.images]
    assert len(set(picked)) == 2
    with pytest.raises(DatasetError):
        sample_references(data, 5, seed=0)
    with pytest.raises(DatasetError):
        sample_references(data, 0, seed=0)


def test_fingerprint_tracks_contents(tiny_dataset):
    before = dataset_fingerprint(tiny_dataset, "stripes")
    assert dataset_fingerprint(tiny_dataset, "stripes") == before
    (tiny_dataset / "stripes" / "test" / "good" / "000.png").unlink()
    assert dataset_fingerprint(tiny_dataset, "stripes") != before
