import numpy as np
import pytest

from pni import features


def _image(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (h, w))


class TestPreprocess:
    def test_resize_512_crop_480(self):
        out = features.preprocess(_image(900, 900), 512, 480)
        assert out.shape == (480, 480)

    def test_identity_when_sizes_match(self):
        img = _image(64, 64)
        out = features.preprocess(img, 64, 64)
        np.testing.assert_array_equal(out, img)

    def test_btad_setting_256_224(self):
        out = features.preprocess(_image(600, 400, seed=1), 256, 224)
        assert out.shape == (224, 224)

    def test_rgb_images(self):
        img = np.random.default_rng(2).uniform(0, 1, (100, 100, 3))
        out = features.preprocess(img, 64, 48)
        assert out.shape == (48, 48, 3)

    def test_crop_larger_than_resize_rejected(self):
        with pytest.raises(ValueError):
            features.preprocess(_image(64, 64), 32, 48)


class TestToyExtractor:
    def test_stride_arithmetic_64(self):
        hier = features.extract_toy_hierarchy(_image(64, 64), seed=0)
        assert hier[2].shape[1:] == (16, 16)
        assert hier[3].shape[1:] == (8, 8)

    def test_channels_configurable(self):
        hier = features.extract_toy_hierarchy(_image(32, 32), seed=0, channels=(4, 6))
        assert hier[2].shape[0] == 4
        assert hier[3].shape[0] == 6

    def test_deterministic(self):
        img = _image(40, 40, seed=5)
        a = features.extract_toy_hierarchy(img, seed=3)
        b = features.extract_toy_hierarchy(img.copy(), seed=3)
        for lv in (2, 3):
            np.testing.assert_array_equal(a[lv], b[lv])

    def test_seed_changes_features(self):
        img = _image(40, 40, seed=5)
        a = features.extract_toy_hierarchy(img, seed=3)
        b = features.extract_toy_hierarchy(img, seed=4)
        assert not np.allclose(a[2], b[2])

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="stride"):
            features.extract_toy_hierarchy(_image(6, 40), seed=0)

    def test_receptive_field_is_the_stride_cell(self):
        # flipping one pixel may only change the cells that contain it,
        # verified against brute-force cell membership
        img = _image(32, 32, seed=9)
        base = features.extract_toy_hierarchy(img, seed=0)
        rng = np.random.default_rng(11)
        for _ in range(5):
            py, px = rng.integers(0, 32, 2)
            bumped = img.copy()
            bumped[py, px] = 1.0 - bumped[py, px]
            changed_hier = features.extract_toy_hierarchy(bumped, seed=0)
            for lv, stride in ((2, 4), (3, 8)):
                diff = np.abs(changed_hier[lv] - base[lv]).sum(axis=0)
                expected = np.zeros_like(diff, dtype=bool)
                expected[py // stride, px // stride] = True
                touched = diff > 0
                assert not np.any(touched & ~expected), "change leaked outside the cell"
                assert touched[py // stride, px // stride] or np.isclose(
                    diff[py // stride, px // stride], 0.0
                )

    def test_all_values_finite_and_clamped(self):
        hier = features.extract_toy_hierarchy(_image(64, 64, seed=8), seed=1)
        for lv in (2, 3):
            assert np.all(np.isfinite(hier[lv]))
            assert hier[lv].min() >= -1.0 and hier[lv].max() <= 1.0


class TestMergeHierarchy:
    def test_shape_arithmetic(self):
        hier = {2: np.zeros((8, 16, 16)), 3: np.zeros((16, 8, 8))}
        merged = features.merge_hierarchy(hier)
        assert merged.shape == (24, 16, 16)

    def test_equal_sizes_concat_only(self):
        rng = np.random.default_rng(0)
        hier = {2: rng.normal(size=(3, 5, 5)), 3: rng.normal(size=(4, 5, 5))}
        merged = features.merge_hierarchy(hier)
        np.testing.assert_array_equal(merged[:3], hier[2])
        np.testing.assert_array_equal(merged[3:], hier[3])

    def test_constant_levels_stay_constant(self):
        hier = {2: np.full((2, 6, 6), 0.25), 3: np.full((3, 3, 3), -1.5)}
        merged = features.merge_hierarchy(hier)
        np.testing.assert_allclose(merged[:2], 0.25)
        np.testing.assert_allclose(merged[2:], -1.5)

    def test_missing_level_rejected(self):
        with pytest.raises(ValueError, match="levels"):
            features.merge_hierarchy({2: np.zeros((2, 4, 4))}, use_levels=(2, 3))

    def test_componentwise_max_spatial_size(self):
        hier = {2: np.zeros((1, 4, 9)), 3: np.zeros((1, 7, 3))}
        assert features.merge_hierarchy(hier).shape == (2, 7, 9)

    def test_single_level_passthrough(self):
        arr = np.random.default_rng(1).normal(size=(5, 4, 4))
        np.testing.assert_array_equal(
            features.merge_hierarchy({3: arr}, use_levels=(3,)), arr
        )


class TestAggregatePatches:
    def test_identity_case(self):
        fm = np.random.default_rng(0).normal(size=(6, 5, 5))
        out = features.aggregate_patches(fm, 1, 6)
        np.testing.assert_array_equal(out, fm)

    def test_constant_preserved(self):
        fm = np.full((4, 7, 7), 3.5)
        out = features.aggregate_patches(fm, 5, 2)
        np.testing.assert_allclose(out, 3.5)

    def test_center_mean_oracle(self):
        fm = np.random.default_rng(1).normal(size=(1, 3, 3))
        out = features.aggregate_patches(fm, 3, 1)
        assert out[0, 1, 1] == pytest.approx(fm[0].mean())

    def test_border_uses_clipped_window(self):
        fm = np.random.default_rng(2).normal(size=(1, 3, 3))
        out = features.aggregate_patches(fm, 3, 1)
        assert out[0, 0, 0] == pytest.approx(fm[0, :2, :2].mean())

    def test_window_mean_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        fm = rng.normal(size=(2, 6, 7))
        out = features.aggregate_patches(fm, 3, 2)
        for i in range(6):
            for j in range(7):
                block = fm[:, max(0, i - 1):i + 2, max(0, j - 1):j + 2]
                np.testing.assert_allclose(out[:, i, j], block.mean(axis=(1, 2)))

    def test_channel_bins_average_contiguously(self):
        fm = np.arange(8, dtype=float).reshape(8, 1, 1)
        out = features.aggregate_patches(fm, 1, 4)
        np.testing.assert_allclose(out[:, 0, 0], [0.5, 2.5, 4.5, 6.5])

    def test_channel_repetition_when_d_exceeds_channels(self):
        fm = np.array([1.0, 3.0]).reshape(2, 1, 1)
        out = features.aggregate_patches(fm, 1, 4)
        np.testing.assert_allclose(out[:, 0, 0], [1.0, 1.0, 3.0, 3.0])

    def test_even_patch_rejected(self):
        with pytest.raises(ValueError, match="odd"):
            features.aggregate_patches(np.zeros((1, 4, 4)), 2, 1)

    def test_translation_equivariance_interior(self):
        rng = np.random.default_rng(4)
        fm = rng.normal(size=(3, 10, 10))
        shifted = np.roll(fm, 1, axis=2)
        out = features.aggregate_patches(fm, 3, 3)
        out_shifted = features.aggregate_patches(shifted, 3, 3)
        # interior columns shift along; borders are allowed to differ
        np.testing.assert_allclose(out_shifted[:, :, 3:-2], out[:, :, 2:-3])
