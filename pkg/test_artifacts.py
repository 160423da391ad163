import zipfile

import numpy as np
import pytest
from PIL import Image as PILImage

from fewshot_ad import container
from fewshot_ad.errors import ArtifactError, BankError, ImageError
from fewshot_ad.figures import localization_panel
from fewshot_ad.imaging import (as_image, image_digest, quantize, read_mask, read_png,
                                to_luminance, write_heatmap, write_mask, write_png)

# ==========================================
# IMAGES
# ==========================================

def test_gray_png_round_trip(tmp_path, rng):
    img = quantize(rng.random((12, 10, 1)))
    np.testing.assert_array_equal(read_png(write_png(img, tmp_path / "g.png")), img)
    with PILImage.open(tmp_path / "g.png") as f:
        assert f.mode.startswith("I")


def test_rgb_png_round_trip(tmp_path, rng):
    img = quantize(rng.random((6, 8, 3)))
    np.testing.assert_array_equal(read_png(write_png(img, tmp_path / "c.png")), img)


def test_eight_bit_gray_is_read(tmp_path):
    PILImage.fromarray(np.full((4, 4), 255, dtype=np.uint8)).save(tmp_path / "l.png")
    np.testing.assert_array_equal(read_png(tmp_path / "l.png"), np.ones((4, 4, 1)))


def test_read_resizes(tmp_path, rng):
    write_png(rng.random((16, 16, 1)), tmp_path / "big.png")
    small = read_png(tmp_path / "big.png", (8, 4))
    assert small.shape == (8, 4, 1)
    assert small.min() >= 0.0 and small.max() <= 1.0


def test_carrier_checks():
    assert as_image(np.zeros((3, 3))).shape == (3, 3, 1)
    assert as_image(np.full((2, 2, 1), 1.5)).max() == 1.0
    for bad in (np.zeros((2, 2, 2)), np.zeros(4), np.array([[np.nan]])):
        with pytest.raises(ImageError):
            as_image(bad)


def test_luminance_and_digest(rng):
    rgb = np.ones((2, 2, 3)) * np.array([1.0, 0.0, 0.0])
    np.testing.assert_allclose(to_luminance(rgb), 0.299)
    img = rng.random((4, 4, 1))
    assert image_digest(img) == image_digest(img.copy())
    assert image_digest(img) != image_digest(img.reshape(4, 4))


def test_masks_and_heatmaps(tmp_path):
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:3, 2:5] = True
    np.testing.assert_array_equal(read_mask(write_mask(mask, tmp_path / "m.png")), mask)

    heat = np.zeros((6, 6))
    heat[2, 3] = 1.0
    heat[4, 4] = 4.0
    stored = read_png(write_heatmap(heat, tmp_path / "h.png"))
    assert stored[2, 3, 0] == pytest.approx(0.5, abs=1e-4)
    assert stored[4, 4, 0] == 1.0 and stored[0, 0, 0] == 0.0
    faint = read_png(write_heatmap(heat / 10, tmp_path / "faint.png"))
    assert faint[2, 3, 0] == pytest.approx(0.05, abs=1e-4)
    assert read_png(write_heatmap(heat, tmp_path / "wide.png", vmax=4.0))[4, 4, 0] == 1.0
    assert read_png(write_heatmap(np.zeros((3, 3)), tmp_path / "z.png")).max() == 0.0
    with pytest.raises(ImageError):
        write_heatmap(heat, tmp_path / "bad.png", vmax=0.0)


def test_unreadable_image(tmp_path):
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(ArtifactError):
        read_png(tmp_path / "junk.png")
    with pytest.raises(ArtifactError):
        read_mask(tmp_path / "missing.png")

# ==========================================
# CONTAINER
# ==========================================

def test_container_bytes_are_deterministic(rng):
    arrays = {"b": rng.random(5), "a": np.arange(6).reshape(2, 3)}
    first = container.to_bytes(arrays, {"note": "x"}, "bank")
    assert container.to_bytes(dict(reversed(arrays.items())), {"note": "x"}, "bank") == first
    loaded, manifest = container.from_bytes(first, "bank")
    np.testing.assert_array_equal(loaded["a"], arrays["a"])
    assert manifest["kind"] == "bank" and manifest["note"] == "x"


def test_container_rejects_wrong_kind_and_garbage(rng):
    data = container.to_bytes({"x": np.zeros(2)}, {}, "checkpoint")
    with pytest.raises(ArtifactError, match="checkpoint"):
        container.from_bytes(data, "bank")
    with pytest.raises(ArtifactError):
        container.from_bytes(b"garbage", "bank")


def test_container_rejects_other_versions(tmp_path):
    path = tmp_path / "old.bank"
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("manifest.json", b'{"format_version": 99, "kind": "bank", "arrays": []}')
    with pytest.raises(ArtifactError, match="version"):
        container.read_container(path, "bank")


def test_atomic_json(tmp_path):
    path = container.atomic_write_json(tmp_path / "sub" / "r.json",
                                       {"v": np.float64(0.5), "n": np.int64(3), "p": tmp_path})
    assert path.read_text().startswith("{")
    assert not list((tmp_path / "sub").glob("*.tmp"))
    with pytest.raises(TypeError):
        container.canonical_json({"x": object()})


def test_error_rendering():
    assert str(BankError("empty pool")) == "[bank] empty pool"
    err = ArtifactError("bad file", path="/tmp/x")
    assert str(err) == "[artifacts] bad file (path: /tmp/x)"
    assert isinstance(err, OSError) and isinstance(BankError("x"), ValueError)

# ==========================================
# FIGURES
# ==========================================

def test_localization_panel(tmp_path, rng):
    query = rng.random((16, 16, 1))
    heat = np.zeros((16, 16))
    heat[5, 9] = 1.0
    path = localization_panel(query, heat, tmp_path / "fig" / "panel.png",
                              personalized=query, mask=heat > 0, title="spot/000", score=0.7)
    with PILImage.open(path) as f:
        assert f.format == "PNG"
        assert f.size[0] > f.size[1]
