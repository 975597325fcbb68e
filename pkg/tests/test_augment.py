import numpy as np
import pytest

from phantomage import augment as aug
from phantomage.phantom import Volume


def vol(seed=0, dims=(12, 12, 12)):
    r = np.random.default_rng(seed)
    return Volume(r.random(dims).astype(np.float32))


class TestTranslate:
    def test_zero_shift_identity(self):
        v = vol().voxels
        assert np.array_equal(aug.translate(v, (0, 0, 0)), v)

    def test_positive_shift_zero_fills(self):
        v = np.ones((4, 4, 4), dtype=np.float32)
        out = aug.translate(v, (2, 0, 0))
        assert out[:2].sum() == 0
        assert (out[2:] == 1).all()

    def test_negative_shift(self):
        v = np.arange(27, dtype=np.float32).reshape(3, 3, 3)
        out = aug.translate(v, (0, -1, 0))
        assert np.array_equal(out[:, :2], v[:, 1:])
        assert out[:, 2].sum() == 0

    def test_shift_beyond_extent(self):
        v = np.ones((3, 3, 3), dtype=np.float32)
        assert aug.translate(v, (3, 0, 0)).sum() == 0

    def test_roundtrip_interior(self):
        v = vol(1).voxels
        back = aug.translate(aug.translate(v, (1, 2, -1)), (-1, -2, 1))
        assert np.array_equal(back[1:-1, 2:-2, 1:-1], v[1:-1, 2:-2, 1:-1])


class TestRotate:
    def test_zero_angle_identity(self):
        v = vol(2).voxels
        np.testing.assert_allclose(aug.rotate(v, (0, 0, 1), 0.0), v, atol=1e-6)

    def test_quarter_turn_matches_rot90(self):
        v = vol(3, dims=(9, 9, 9)).voxels
        out = aug.rotate(v, (0.0, 0.0, 1.0), np.pi / 2)
        # rotation about z by 90 deg maps (x, y) -> (-y, x); with axis order
        # (x, y, z) that's a rot90 in the first two axes
        expect = np.rot90(v, k=1, axes=(0, 1))
        np.testing.assert_allclose(out, expect, atol=1e-5)

    def test_preserves_center_value(self):
        v = np.zeros((9, 9, 9), dtype=np.float32)
        v[4, 4, 4] = 1.0
        out = aug.rotate(v, (1.0, 1.0, 0.0), 0.3)
        assert abs(out[4, 4, 4] - 1.0) < 1e-5

    def test_mass_roughly_preserved_for_interior_blob(self):
        v = np.zeros((15, 15, 15), dtype=np.float32)
        v[6:9, 6:9, 6:9] = 1.0
        out = aug.rotate(v, (0.3, 0.5, 0.8), 0.4)
        assert abs(out.sum() - v.sum()) / v.sum() < 0.05


class TestCropResize:
    def test_full_crop_identity(self):
        v = vol(4).voxels
        np.testing.assert_allclose(aug.crop_resize(v, (0, 0, 0), v.shape), v,
                                   atol=1e-6)

    def test_output_dims_match_input(self):
        v = vol(5).voxels
        out = aug.crop_resize(v, (1, 2, 0), (8, 9, 10))
        assert out.shape == v.shape

    def test_constant_volume_stays_constant(self):
        v = np.full((10, 10, 10), 0.7, dtype=np.float32)
        out = aug.crop_resize(v, (2, 2, 2), (6, 6, 6))
        np.testing.assert_allclose(out, 0.7, atol=1e-6)


class TestPipeline:
    def test_deterministic_given_stream(self):
        v = vol(6)
        cfg = aug.AugmentConfig()
        a = aug.augment(v, cfg, np.random.default_rng(9))
        b = aug.augment(v, cfg, np.random.default_rng(9))
        assert np.array_equal(a.voxels, b.voxels)

    def test_all_probabilities_zero_is_identity(self):
        v = vol(7)
        cfg = aug.AugmentConfig(p_translate=0, p_rotate=0, p_noise=0, p_crop=0)
        out = aug.augment(v, cfg, np.random.default_rng(0))
        assert np.array_equal(out.voxels, v.voxels)

    def test_noise_only_changes_values_by_noise_scale(self):
        v = vol(8)
        cfg = aug.AugmentConfig(p_translate=0, p_rotate=0, p_noise=1, p_crop=0,
                                noise_std=0.01)
        out = aug.augment(v, cfg, np.random.default_rng(1))
        diff = out.voxels - v.voxels
        assert 0.005 < diff.std() < 0.02

    def test_output_dtype_and_dims(self):
        v = vol(9)
        out = aug.augment(v, aug.AugmentConfig(), np.random.default_rng(2))
        assert out.voxels.dtype == np.float32
        assert out.dims == v.dims

    def test_translation_limit_default(self):
        cfg = aug.AugmentConfig()
        assert cfg.translation_limit((32, 32, 32)) == 2  # ceil(0.05 * 32)
        assert aug.AugmentConfig(max_translation=4).translation_limit((32,) * 3) == 4

    def test_tiny_volume_rejected(self):
        with pytest.raises(ValueError):
            aug.augment(Volume(np.zeros((4, 4, 4), dtype=np.float32)),
                        aug.AugmentConfig(), np.random.default_rng(0))

    def test_crop_respects_min_fraction(self):
        # with p_crop=1 the crop never shrinks any axis below 70%: check the
        # resized output retains most of the original mass location by
        # verifying determinism across many draws doesn't crash and dims hold
        v = vol(10)
        cfg = aug.AugmentConfig(p_translate=0, p_rotate=0, p_noise=0, p_crop=1)
        for seed in range(5):
            out = aug.augment(v, cfg, np.random.default_rng(seed))
            assert out.dims == v.dims


class TestValidation:
    def test_bad_probability(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(p_rotate=1.5).validate()

    def test_bad_rotation_range(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(rotation_min=0.6, rotation_max=0.2).validate()

    def test_bad_crop_fraction(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(min_crop_fraction=0.0).validate()

    def test_negative_translation(self):
        with pytest.raises(ValueError):
            aug.AugmentConfig(max_translation=-1).validate()


class TestSampleRng:
    def test_distinct_streams(self):
        a = aug.sample_rng(1, 0, 0).random(4)
        b = aug.sample_rng(1, 0, 1).random(4)
        c = aug.sample_rng(1, 1, 0).random(4)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_reproducible(self):
        assert np.array_equal(aug.sample_rng(2, 3, 4).random(8),
                              aug.sample_rng(2, 3, 4).random(8))
