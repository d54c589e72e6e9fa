"""Volume I/O, phantom generation, windowing, and augmentation."""
import numpy as np
import pytest

from hemoseg.augment import AugmentPolicy, augment, hu_window, random_crop, zscore_normalize
from hemoseg.phantoms import (
    BRAIN_FRACTION,
    PhantomError,
    PhantomSpec,
    generate_dataset,
    generate_phantom,
    list_cases,
    rasterize_ellipsoid,
)
from hemoseg.volumes import (
    HEADER,
    RvolBadMagic,
    RvolTruncated,
    RvolUnknownDtype,
    RvolUnknownVersion,
    SegMask,
    VolumeImage,
    read_rvol,
    resize_nearest,
    resize_trilinear,
    write_rvol,
)


class TestRvolFormat:
    def test_header_is_42_bytes(self):
        assert HEADER.size == 42

    def test_image_round_trip(self, rng, tmp_path):
        img = VolumeImage(rng.normal(size=(3, 4, 5)).astype(np.float32), (5.0, 0.518, 0.518))
        path = tmp_path / "a.rvol"
        write_rvol(path, img)
        back = read_rvol(path)
        assert isinstance(back, VolumeImage)
        np.testing.assert_array_equal(back.voxels, img.voxels)
        assert back.spacing_mm == img.spacing_mm

    def test_mask_round_trip(self, rng, tmp_path):
        msk = SegMask((rng.random((2, 3, 3)) < 0.5).astype(np.uint8), (1.0, 1.0, 1.0))
        path = tmp_path / "m.rvol"
        write_rvol(path, msk)
        back = read_rvol(path)
        assert isinstance(back, SegMask)
        np.testing.assert_array_equal(back.voxels, msk.voxels)

    def test_write_read_write_is_byte_identical(self, rng, tmp_path):
        img = VolumeImage(rng.normal(size=(4, 6, 5)).astype(np.float32), (5.0, 0.518, 0.518))
        p1, p2 = tmp_path / "x.rvol", tmp_path / "y.rvol"
        write_rvol(p1, img)
        write_rvol(p2, read_rvol(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_file_size_arithmetic(self, rng, tmp_path):
        img = VolumeImage(rng.normal(size=(3, 4, 5)).astype(np.float32), (1.0, 1.0, 1.0))
        path = tmp_path / "s.rvol"
        write_rvol(path, img)
        assert path.stat().st_size == 42 + 3 * 4 * 5 * 4

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.rvol"
        path.write_bytes(b"XVOL" + b"\x00" * 60)
        with pytest.raises(RvolBadMagic):
            read_rvol(path)

    def test_truncated_payload(self, rng, tmp_path):
        img = VolumeImage(rng.normal(size=(2, 2, 2)).astype(np.float32), (1.0, 1.0, 1.0))
        path = tmp_path / "t.rvol"
        write_rvol(path, img)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(RvolTruncated):
            read_rvol(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "h.rvol"
        path.write_bytes(b"RVOL\x01")
        with pytest.raises(RvolTruncated):
            read_rvol(path)

    def test_unknown_dtype(self, rng, tmp_path):
        img = VolumeImage(rng.normal(size=(1, 1, 1)).astype(np.float32), (1.0, 1.0, 1.0))
        path = tmp_path / "d.rvol"
        write_rvol(path, img)
        raw = bytearray(path.read_bytes())
        raw[5] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(RvolUnknownDtype):
            read_rvol(path)

    def test_unknown_version(self, rng, tmp_path):
        img = VolumeImage(rng.normal(size=(1, 1, 1)).astype(np.float32), (1.0, 1.0, 1.0))
        path = tmp_path / "v.rvol"
        write_rvol(path, img)
        raw = bytearray(path.read_bytes())
        raw[4] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(RvolUnknownVersion):
            read_rvol(path)

    def test_mask_values_validated(self):
        with pytest.raises(ValueError):
            SegMask(np.full((1, 1, 1), 2, dtype=np.uint8), (1.0, 1.0, 1.0))

    def test_bad_spacing_rejected(self):
        with pytest.raises(ValueError):
            VolumeImage(np.zeros((1, 1, 1), dtype=np.float32), (0.0, 1.0, 1.0))


class TestResize:
    def test_trilinear_identity(self, rng):
        v = rng.normal(size=(3, 4, 5))
        np.testing.assert_array_equal(resize_trilinear(v, (3, 4, 5)), v)

    def test_trilinear_constant(self):
        v = np.full((2, 3, 3), 4.5)
        out = resize_trilinear(v, (5, 7, 6))
        np.testing.assert_allclose(out, 4.5, rtol=1e-12)

    def test_trilinear_matches_integer_factor_upsampling(self, rng):
        from hemoseg.autodiff import Tensor, upsample_trilinear

        v = rng.normal(size=(2, 3, 3))
        got = resize_trilinear(v, (4, 6, 9))
        want = upsample_trilinear(Tensor(v[None, None]), (2, 2, 3)).data[0, 0]
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_nearest_keeps_label_values(self, rng):
        v = rng.integers(0, 5, size=(4, 6, 6))
        out = resize_nearest(v, (3, 4, 9))
        assert set(np.unique(out)) <= set(np.unique(v))

    def test_nearest_identity(self, rng):
        v = rng.integers(0, 2, size=(3, 3, 3))
        np.testing.assert_array_equal(resize_nearest(v, (3, 3, 3)), v)

    def test_round_trip_recovers_solid_box(self):
        m = np.zeros((8, 8, 8), dtype=np.uint8)
        m[2:6, 2:6, 2:6] = 1
        down = resize_nearest(m, (4, 4, 4))
        up = resize_nearest(down, (8, 8, 8))
        assert up.sum() > 0 and up.max() == 1


class TestPhantoms:
    def test_zero_lesions_gives_empty_mask(self):
        spec = PhantomSpec(lesion_count_range=(0, 0), seed=1)
        _, mask, record = generate_phantom(spec)
        assert mask.voxels.sum() == 0
        assert record["lesion_count"] == 0

    def test_same_seed_bit_identical(self):
        a_img, a_msk, _ = generate_phantom(PhantomSpec(seed=42))
        b_img, b_msk, _ = generate_phantom(PhantomSpec(seed=42))
        assert a_img.voxels.tobytes() == b_img.voxels.tobytes()
        assert a_msk.voxels.tobytes() == b_msk.voxels.tobytes()

    def test_different_seed_differs(self):
        a, _, _ = generate_phantom(PhantomSpec(seed=1))
        b, _, _ = generate_phantom(PhantomSpec(seed=2))
        assert a.voxels.tobytes() != b.voxels.tobytes()

    def test_rasterized_ellipsoid_volume_within_2pct(self):
        semi = (15.0, 18.0, 20.0)
        mask = rasterize_ellipsoid((40, 50, 60), (1.0, 1.0, 1.0), (20.0, 25.0, 30.0), semi)
        analytic = 4.0 / 3.0 * np.pi * semi[0] * semi[1] * semi[2]
        assert abs(mask.sum() - analytic) / analytic < 0.02

    def test_lesions_inside_brain(self):
        spec = PhantomSpec(shape=(16, 64, 64), lesion_count_range=(2, 3), seed=7)
        _, mask, _ = generate_phantom(spec)
        extent = np.array([n * s for n, s in zip(spec.shape, spec.spacing_mm)])
        brain = rasterize_ellipsoid(
            spec.shape, spec.spacing_mm, extent / 2, BRAIN_FRACTION * extent / 2
        )
        assert not np.any(mask.voxels.astype(bool) & ~brain)

    def test_unplaceable_lesion_errors(self):
        spec = PhantomSpec(shape=(4, 16, 16), semi_axes_mm_range=(200.0, 300.0), seed=0)
        with pytest.raises(PhantomError):
            generate_phantom(spec)

    def test_class_tags(self):
        _, _, solo = generate_phantom(PhantomSpec(lesion_count_range=(1, 1), seed=3))
        _, _, multi = generate_phantom(PhantomSpec(lesion_count_range=(2, 2), seed=3))
        assert solo["lesion_class"] == "solitary"
        assert multi["lesion_class"] == "scattered"

    def test_dataset_generation(self, tmp_path):
        cases = generate_dataset(tmp_path / "ds", 3, seed=5, template=PhantomSpec())
        assert len(cases) == 3
        assert list_cases(tmp_path / "ds") == ["0000", "0001", "0002"]
        assert (tmp_path / "ds" / "dataset.json").exists()

    def test_dataset_regeneration_identical(self, tmp_path):
        generate_dataset(tmp_path / "a", 2, seed=9, template=PhantomSpec())
        generate_dataset(tmp_path / "b", 2, seed=9, template=PhantomSpec())
        for name in ["case_0000_img.rvol", "case_0001_msk.rvol"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestHuWindow:
    def make(self, values):
        return VolumeImage(np.array(values, dtype=np.float32).reshape(1, 1, -1), (1.0, 1.0, 1.0))

    def test_clamp_ends(self):
        out = hu_window(self.make([-100.0, 200.0])).voxels.ravel()
        assert out[0] == 0.0 and out[1] == 1.0

    def test_center_maps_to_half(self):
        assert hu_window(self.make([40.0])).voxels.ravel()[0] == pytest.approx(0.5)

    def test_window_endpoints(self):
        out = hu_window(self.make([-5.0, 85.0])).voxels.ravel()
        assert out[0] == 0.0 and out[1] == 1.0

    def test_monotone_and_bounded(self, rng):
        hu = np.sort(rng.uniform(-200, 200, size=50)).astype(np.float32)
        out = hu_window(VolumeImage(hu.reshape(1, 1, -1), (1, 1, 1))).voxels.ravel()
        assert np.all(np.diff(out) >= 0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_bad_width(self):
        with pytest.raises(ValueError):
            hu_window(self.make([0.0]), width=0.0)


class TestZscore:
    def test_constant_maps_to_zero(self):
        out = zscore_normalize(np.full((2, 3, 3), 7.0))
        np.testing.assert_array_equal(out, 0.0)

    def test_mean_zero_std_one(self, rng):
        out = zscore_normalize(rng.normal(5.0, 3.0, size=(4, 8, 8)))
        assert abs(out.mean()) < 1e-5
        assert abs(out.std() - 1.0) < 1e-5

    def test_affine_invariance(self, rng):
        x = rng.normal(size=(3, 5, 5))
        np.testing.assert_allclose(zscore_normalize(3.5 * x + 2.0), zscore_normalize(x), atol=1e-5)


def lesion_volume(shape=(8, 64, 64)):
    img, msk, _ = generate_phantom(
        PhantomSpec(
            shape=shape,
            spacing_mm=(4.0, 1.0, 1.0),
            lesion_count_range=(1, 1),
            semi_axes_mm_range=(8.0, 10.0),
            seed=11,
        )
    )
    windowed = hu_window(img)
    return windowed.voxels.astype(np.float64), msk.voxels


class TestAugment:
    def test_disabled_policy_is_identity_apart_from_crop(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy.disabled(img.shape)
        out_img, out_msk = augment(img, msk, np.random.default_rng(0), policy)
        np.testing.assert_array_equal(out_img, img.astype(np.float32))
        np.testing.assert_array_equal(out_msk, msk)

    def test_double_flip_is_identity(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy.disabled(img.shape)
        policy.flip_prob = 1.0
        rng = np.random.default_rng(1)
        once_img, once_msk = augment(img, msk, rng, policy)
        twice_img, twice_msk = augment(once_img, once_msk, rng, policy)
        np.testing.assert_allclose(twice_img, img.astype(np.float32), atol=1e-6)
        np.testing.assert_array_equal(twice_msk, msk)

    def test_flip_preserves_mask_count_and_mirrors_centroid(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy.disabled(img.shape)
        policy.flip_prob = 1.0
        out_img, out_msk = augment(img, msk, np.random.default_rng(2), policy)
        assert out_msk.sum() == msk.sum()
        c_in = np.argwhere(msk).mean(axis=0)
        c_out = np.argwhere(out_msk).mean(axis=0)
        mirrored = np.array(
            [c_in[0], msk.shape[1] - 1 - c_in[1], msk.shape[2] - 1 - c_in[2]]
        )
        assert np.all(np.abs(c_out - mirrored) <= 0.5)

    def test_rotation_changes_mask_count_at_most_5pct(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy.geometric_only(img.shape)
        policy.flip_prob = 0.0
        for seed in range(5):
            _, out_msk = augment(img, msk, np.random.default_rng(seed), policy)
            change = abs(int(out_msk.sum()) - int(msk.sum())) / msk.sum()
            assert change <= 0.05

    def test_same_rng_seed_reproduces(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy(crop_shape=(4, 24, 24))
        a_img, a_msk = augment(img, msk, np.random.default_rng(33), policy)
        b_img, b_msk = augment(img, msk, np.random.default_rng(33), policy)
        np.testing.assert_array_equal(a_img, b_img)
        np.testing.assert_array_equal(a_msk, b_msk)

    def test_foreground_biased_crop_hits_lesion(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy.disabled((4, 16, 16))
        policy.fg_bias_prob = 1.0
        for seed in range(10):
            _, out_msk = augment(img, msk, np.random.default_rng(seed), policy)
            assert out_msk.sum() > 0

    def test_small_volume_padded_to_crop(self):
        img = np.zeros((4, 16, 16))
        msk = np.zeros((4, 16, 16), dtype=np.uint8)
        out_img, out_msk = random_crop(img, msk, (8, 32, 32), np.random.default_rng(0))
        assert out_img.shape == (8, 32, 32)
        assert out_msk.shape == (8, 32, 32)

    def test_intensity_steps_leave_mask_alone(self):
        img, msk = lesion_volume()
        policy = AugmentPolicy.disabled(img.shape)
        policy.noise_prob = 1.0
        policy.smooth_prob = 1.0
        policy.contrast_prob = 1.0
        out_img, out_msk = augment(img, msk, np.random.default_rng(4), policy)
        np.testing.assert_array_equal(out_msk, msk)
        assert not np.array_equal(out_img, img.astype(np.float32))
