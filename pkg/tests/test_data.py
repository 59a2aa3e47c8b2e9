import numpy as np
import pytest

from psgr import data
from psgr.errors import PstnFormatError, ValidationError


def test_generation_is_deterministic():
    a = data.generate(5, 64, 64, 2, seed=9)
    b = data.generate(5, 64, 64, 2, seed=9)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)


def test_generation_seed_changes_content():
    a = data.generate(3, 64, 64, 2, seed=1)
    b = data.generate(3, 64, 64, 2, seed=2)
    assert not all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_sample_index_uses_xor_child_seed():
    # sample i of seed s equals sample 0 of seed s^i (child = seed ^ index)
    base = data.generate(4, 64, 64, 2, seed=8)
    other = data.generate(1, 64, 64, 2, seed=8 ^ 3)
    assert np.array_equal(base[3].image, other[0].image)


def test_shapes_and_dtypes():
    for s in data.generate(4, 48, 64, 2, seed=5):
        assert s.image.shape == (48, 64, 1)
        assert s.image.dtype == np.float32
        assert s.mask.shape == (48, 64)
        assert s.mask.dtype == np.uint8
        assert np.isfinite(s.image).all()


def test_foreground_fraction_bounds():
    for s in data.generate(30, 64, 64, 2, seed=11):
        frac = (s.mask > 0).mean()
        assert 0.002 <= frac <= 0.05 * 6
        assert 1 <= s.meta["n_blobs"] <= 6
        for area in s.meta["blob_areas"]:
            assert area >= 1


def test_blob_areas_within_per_blob_bounds():
    hw = 64 * 64
    for s in data.generate(20, 64, 64, 2, seed=13):
        for area in s.meta["blob_areas"]:
            assert area <= int(0.05 * hw)


def test_three_class_labels():
    samples = data.generate(20, 64, 64, 3, seed=17)
    labels = set()
    for s in samples:
        labels |= set(np.unique(s.mask).tolist())
    assert labels <= {0, 1, 2}
    assert {1, 2} <= labels  # both foreground classes occur somewhere


def test_generate_validates_inputs():
    with pytest.raises(ValidationError):
        data.generate(2, 16, 64, 2, seed=0)
    with pytest.raises(ValidationError):
        data.generate(2, 64, 64, 4, seed=0)
    with pytest.raises(ValidationError):
        data.generate(0, 64, 64, 2, seed=0)


def test_dataset_roundtrip(tmp_path):
    samples = data.generate(4, 64, 64, 2, seed=23)
    manifest = data.save_dataset(tmp_path / "ds", samples, 2, 23)
    assert manifest["n"] == 4
    loaded, manifest2 = data.load_dataset(tmp_path / "ds")
    assert manifest2["seed"] == 23
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ValidationError):
        data.load_dataset(tmp_path)


def test_pgm_import(tmp_path):
    path = tmp_path / "img.pgm"
    pixels = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path.write_bytes(b"P5\n# comment line\n4 3\n255\n" + pixels.tobytes())
    img = data.read_pgm(path)
    assert img.shape == (3, 4, 1)
    assert img.dtype == np.float32
    assert abs(float(img[2, 3, 0]) - 11 / 255) < 1e-7


def test_pgm_rejects_other_formats(tmp_path):
    path = tmp_path / "img.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(PstnFormatError):
        data.read_pgm(path)


def test_pgm_rejects_16bit(tmp_path):
    path = tmp_path / "img.pgm"
    path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
    with pytest.raises(PstnFormatError):
        data.read_pgm(path)
