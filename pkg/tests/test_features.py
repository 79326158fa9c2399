import numpy as np
import pytest

from dmtnet.errors import DimensionMismatch, ShapeMismatch
from dmtnet.features import (
    FeatureExtractor,
    PyramidSpec,
    check_pyramid,
    load_fixture_pyramid,
    save_fixture_pyramid,
)


def test_default_shapes(rng):
    pyr = FeatureExtractor()(rng.random((3, 64, 64)))
    assert [f.shape for f in pyr] == [(16, 16, 16), (32, 8, 8), (64, 4, 4)]
    assert all(f.dtype == np.float32 for f in pyr)


def test_zero_image_gives_zero_pyramid():
    pyr = FeatureExtractor(mode="filterbank")(np.zeros((3, 64, 64)))
    assert all(np.all(f == 0) for f in pyr)


@pytest.mark.parametrize("mode", ["filterbank", "fixture"])
def test_seeded_determinism(rng, mode):
    img = rng.random((3, 32, 32))
    a = FeatureExtractor(seed=7, mode=mode)(img)
    b = FeatureExtractor(seed=7, mode=mode)(img)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    c = FeatureExtractor(seed=8, mode=mode)(img)
    assert not np.array_equal(a[0], c[0])


def test_extractor_is_shared_between_roles(rng):
    ext = FeatureExtractor()
    img = rng.random((3, 32, 32))
    assert all(np.array_equal(x, y) for x, y in zip(ext(img), ext(img.copy())))


def test_indivisible_image_rejected(rng):
    with pytest.raises(DimensionMismatch):
        FeatureExtractor()(rng.random((3, 60, 64)))


def test_wrong_channel_count(rng):
    with pytest.raises(DimensionMismatch):
        FeatureExtractor()(rng.random((4, 64, 64)))


def test_group_mapping():
    assert [PyramidSpec().group(l) for l in range(3)] == ["low", "mid", "high"]
    spec = PyramidSpec(channels=(8, 8, 8, 8, 8, 8), strides=(4, 4, 8, 8, 16, 16))
    assert [spec.group(l) for l in range(6)] == ["low", "low", "mid", "mid", "high", "high"]


def test_spec_validation():
    with pytest.raises(DimensionMismatch):
        PyramidSpec(channels=(4, 8), strides=(4,))
    with pytest.raises(DimensionMismatch):
        PyramidSpec(channels=(4, 8), strides=(8, 4))


def test_fixture_round_trip(tmp_path, rng):
    pyr = FeatureExtractor(mode="fixture")(rng.random((3, 64, 64)))
    save_fixture_pyramid(tmp_path / "q", pyr)
    back = load_fixture_pyramid(tmp_path / "q", PyramidSpec())
    assert all(np.array_equal(x, y) for x, y in zip(pyr, back))


def test_fixture_missing_level(tmp_path, rng):
    pyr = FeatureExtractor(mode="fixture")(rng.random((3, 64, 64)))
    save_fixture_pyramid(tmp_path / "q", pyr)
    (tmp_path / "q.l1.dmt").unlink()
    with pytest.raises(ShapeMismatch):
        load_fixture_pyramid(tmp_path / "q", PyramidSpec())


def test_fixture_wrong_channels(tmp_path, rng):
    pyr = FeatureExtractor(mode="fixture")(rng.random((3, 64, 64)))
    pyr[2] = pyr[2][:10]
    save_fixture_pyramid(tmp_path / "q", pyr)
    with pytest.raises(ShapeMismatch):
        load_fixture_pyramid(tmp_path / "q", PyramidSpec())


def test_check_pyramid_spatial(rng):
    pyr = FeatureExtractor()(rng.random((3, 64, 64)))
    check_pyramid(pyr, PyramidSpec(), (64, 64))
    with pytest.raises(ShapeMismatch):
        check_pyramid(pyr, PyramidSpec(), (32, 32))
