"""Synthetic patch generation and the netpbm round trip."""

import numpy as np
import pytest

from sassl.errors import DataError
from sassl.patchio import (INDEX_FIELDS, load_split, read_pgm, read_ppm,
                           write_pgm, write_ppm, write_split)
from sassl.rng import Xoshiro256
from sassl.synth import (REFERENCE_OD, AugmentConfig, BatchSampler, augment_view,
                         center_crop, generate_patches, make_slide, render_patch)


@pytest.fixture
def slide():
    return make_slide(seed=11, perturbation=0.4)


class TestSlides:
    def test_deterministic(self):
        a = make_slide(5, 0.4, slide_id=3)
        b = make_slide(5, 0.4, slide_id=3)
        assert np.array_equal(a.stain_matrix, b.stain_matrix)
        assert np.array_equal(a.background, b.background)
        assert a.rng_seed == b.rng_seed

    def test_zero_perturbation_reproduces_reference(self):
        for s in range(4):
            sl = make_slide(5, 0.0, slide_id=s)
            assert np.array_equal(sl.stain_matrix, REFERENCE_OD)

    def test_perturbed_slides_differ(self):
        a = make_slide(5, 0.4, slide_id=0)
        b = make_slide(5, 0.4, slide_id=1)
        assert not np.array_equal(a.stain_matrix, b.stain_matrix)
        assert a.rng_seed != b.rng_seed

    def test_od_nonnegative_background_valid(self):
        for s in range(8):
            sl = make_slide(9, 0.6, slide_id=s)
            assert np.all(sl.stain_matrix >= 0.0)
            assert np.all(sl.background > 0.0) and np.all(sl.background <= 1.0)

    def test_entries_bounded_by_perturbation(self):
        # multiplicative noise: every entry within +-30% of reference
        p = 0.3
        for seed in range(1000):
            sl = make_slide(seed, p)
            rel = np.abs(sl.stain_matrix - REFERENCE_OD) / REFERENCE_OD
            assert rel.max() <= p + 1e-12

    def test_out_of_range_perturbation_rejected(self):
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            make_slide(3, -0.1)
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            make_slide(3, 1.5)


class TestRenderPatch:
    def test_pixels_in_unit_interval(self, slide):
        p = render_patch(slide, 77, 0, size=32)
        assert p.image.shape == (3, 32, 32)
        assert p.image.min() > 0.0
        assert p.image.max() <= 1.0

    def test_deterministic(self, slide):
        a = render_patch(slide, 123, 1, 32)
        b = render_patch(slide, 123, 1, 32)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_mask_independent_of_slide(self):
        s0 = make_slide(4, 0.5, slide_id=0)
        s1 = make_slide(4, 0.5, slide_id=1)
        a = render_patch(s0, 99, 1, 32)
        b = render_patch(s1, 99, 1, 32)
        assert np.array_equal(a.mask, b.mask)
        assert not np.array_equal(a.image, b.image)

    def test_class_regimes_have_structure(self, slide):
        masks0 = [render_patch(slide, s, 0, 32).mask for s in range(40)]
        masks1 = [render_patch(slide, s + 1000, 1, 32).mask for s in range(40)]
        assert all(m.sum() > 0 for m in masks0)
        assert all(m.sum() > 0 for m in masks1)

    def test_mean_intensity_not_a_class_shortcut(self, slide):
        m0 = np.mean([render_patch(slide, s, 0, 32).image.mean() for s in range(60)])
        m1 = np.mean([render_patch(slide, s + 500, 1, 32).image.mean() for s in range(60)])
        assert abs(m0 - m1) < 0.03

    def test_content_fraction_is_mask_mean(self, slide):
        p = render_patch(slide, 44, 1, 32)
        assert p.content_fraction() == pytest.approx(p.mask.mean(), abs=0)

    def test_unknown_class_rejected(self, slide):
        with pytest.raises(DataError):
            render_patch(slide, 5, 2, 32)


class TestAugment:
    def test_no_op_config_is_bitwise_window(self, slide):
        p = render_patch(slide, 3, 0, 32)
        rng = Xoshiro256(0)
        cfg = AugmentConfig(crop=32, flip_prob=0.0, jitter=0.0)
        v = augment_view(p.image, rng, cfg)
        assert np.array_equal(v, p.image)

    def test_crop_only_is_bitwise_slice(self, slide):
        p = render_patch(slide, 3, 0, 32)
        rng = Xoshiro256(5)
        cfg = AugmentConfig(crop=24, flip_prob=0.0, jitter=0.0)
        v = augment_view(p.image, rng, cfg)
        found = any(
            np.array_equal(v, p.image[:, oy:oy + 24, ox:ox + 24])
            for oy in range(9) for ox in range(9))
        assert found

    def test_views_stay_in_unit_interval(self, slide):
        p = render_patch(slide, 8, 1, 32)
        rng = Xoshiro256(6)
        cfg = AugmentConfig(crop=24, flip_prob=0.5, jitter=0.3, channel_jitter=0.2)
        for _ in range(1000):
            v = augment_view(p.image, rng, cfg)
            assert v.min() > 0.0 and v.max() <= 1.0

    @staticmethod
    def _gray():
        # mid-range values so a 20% factor can never hit the [0,1] clip
        img = np.empty((3, 8, 8))
        img[0], img[1], img[2] = 0.3, 0.4, 0.5
        return img

    def test_shared_jitter_preserves_channel_ratios(self):
        img = self._gray()
        v = augment_view(img, Xoshiro256(9),
                         AugmentConfig(crop=8, flip_prob=0.0, jitter=0.2))
        ratio = v / img
        assert not np.allclose(ratio.flat[0], 1.0)
        assert np.allclose(ratio, ratio.flat[0])

    def test_channel_jitter_breaks_channel_ratios(self):
        img = self._gray()
        v = augment_view(img, Xoshiro256(9),
                         AugmentConfig(crop=8, flip_prob=0.0, jitter=0.0,
                                       channel_jitter=0.2))
        per_channel = (v / img).reshape(3, -1)
        assert np.allclose(per_channel, per_channel[:, :1])
        assert not np.allclose(per_channel[:, 0], per_channel[0, 0])

    def test_mask_cotransforms(self, slide):
        p = render_patch(slide, 9, 1, 32)
        marked = p.image.copy()
        rng_a = Xoshiro256(7)
        rng_b = Xoshiro256(7)
        cfg = AugmentConfig(crop=24, flip_prob=1.0, jitter=0.0)
        v, m = augment_view(marked, rng_a, cfg, mask=p.mask)
        v2 = augment_view(marked, rng_b, cfg)
        assert np.array_equal(v, v2)
        assert m.shape == (24, 24)

    def test_center_crop(self):
        img = np.arange(3 * 6 * 6, dtype=np.float64).reshape(3, 6, 6)
        c = center_crop(img, 4)
        assert np.array_equal(c, img[:, 1:5, 1:5])


class TestBatchSampler:
    def _dataset(self):
        return generate_patches(seed=2, n_slides=4, n_patches=64, patch_size=32,
                                perturbation=0.4)

    def _arrays(self):
        ps = self._dataset()
        return np.stack([p.image for p in ps]), np.array([p.slide_id for p in ps])

    def test_group_structure(self):
        images, sids = self._arrays()
        sampler = BatchSampler(images, sids, batch_size=8, group_size=2,
                               aug=AugmentConfig(crop=24), seed=3)
        batch = sampler.next_batch()
        assert batch.view1.shape == (8, 3, 24, 24)
        ids, counts = np.unique(batch.slide_ids, return_counts=True)
        assert len(ids) == 4
        assert np.all(counts == 2)

    def test_deterministic_given_seed(self):
        images, sids = self._arrays()
        a = BatchSampler(images, sids, 8, 2, AugmentConfig(crop=24), seed=3).next_batch()
        b = BatchSampler(images, sids, 8, 2, AugmentConfig(crop=24), seed=3).next_batch()
        assert np.array_equal(a.view1, b.view1)
        assert np.array_equal(a.view2, b.view2)

    def test_views_differ_between_twins(self):
        images, sids = self._arrays()
        batch = BatchSampler(images, sids, 8, 2,
                             AugmentConfig(crop=24, jitter=0.2), seed=4).next_batch()
        assert not np.array_equal(batch.view1, batch.view2)

    def test_single_slide_batch_allowed(self):
        # all same-source: the relation matrix is all ones, still valid sampling
        images, sids = self._arrays()
        one = sids == 0
        batch = BatchSampler(images[one], sids[one], 4, 4,
                             AugmentConfig(crop=24), seed=5).next_batch()
        assert np.all(batch.slide_ids == 0)

    def test_group_of_one_rejected(self):
        images, sids = self._arrays()
        with pytest.raises(DataError, match="group size"):
            BatchSampler(images, sids, 8, 1, AugmentConfig(crop=24), seed=1)

    def test_indivisible_batch_rejected(self):
        images, sids = self._arrays()
        with pytest.raises(DataError):
            BatchSampler(images, sids, 9, 2, AugmentConfig(crop=24), seed=1)


class TestRoundTrip:
    def test_ppm_quantized_round_trip(self, tmp_path, slide):
        p = render_patch(slide, 21, 0, 32)
        path = tmp_path / "x.ppm"
        write_ppm(path, p.image)
        back = read_ppm(path)
        # 8-bit storage: exact to half a quantization step
        assert np.abs(back - p.image).max() <= 0.5 / 255.0 + 1e-12
        # a second write of the loaded image is byte-identical
        write_ppm(tmp_path / "y.ppm", np.clip(back, 1e-9, 1.0))
        assert (tmp_path / "y.ppm").read_bytes() == path.read_bytes()

    def test_all_white_ppm_reads_as_ones(self, tmp_path):
        path = tmp_path / "w.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
        assert np.array_equal(read_ppm(path), np.ones((3, 2, 2)))

    def test_pgm_mask_exact_round_trip(self, tmp_path, slide):
        p = render_patch(slide, 22, 1, 32)
        path = tmp_path / "m.pgm"
        write_pgm(path, p.mask)
        assert np.array_equal(read_pgm(path), p.mask)

    def test_corrupt_ppm_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n4 4\n255\n" + b"\x00" * 10)  # too few bytes
        with pytest.raises(DataError):
            read_ppm(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(DataError):
            read_ppm(path)

    def test_split_write_load(self, tmp_path):
        patches = generate_patches(seed=6, n_slides=4, n_patches=16, patch_size=32,
                                   perturbation=0.3)
        write_split(tmp_path / "train", patches)
        header = (tmp_path / "train" / "index.csv").read_text().splitlines()[0]
        assert header == ",".join(INDEX_FIELDS)
        ps = load_split(tmp_path / "train")
        assert len(ps) == 16
        assert ps.images.shape == (16, 3, 32, 32)
        assert set(ps.slide_ids.tolist()) == {0, 1, 2, 3}
        assert set(ps.class_ids.tolist()) == {0, 1}
        # labels preserved in order
        assert ps.slide_ids[5] == patches[5].slide_id
        assert ps.class_ids[5] == patches[5].class_id

    def test_missing_index_rejected(self, tmp_path):
        with pytest.raises(DataError):
            load_split(tmp_path / "nope")

    def test_missing_patch_file_named_in_error(self, tmp_path):
        patches = generate_patches(seed=6, n_slides=2, n_patches=4, patch_size=32,
                                   perturbation=0.3)
        write_split(tmp_path / "train", patches)
        (tmp_path / "train" / "patch_0002.ppm").unlink()
        with pytest.raises(DataError, match="patch_0002.ppm"):
            load_split(tmp_path / "train")

    def test_empty_mask_path_gives_zero_mask(self, tmp_path):
        patches = generate_patches(seed=6, n_slides=2, n_patches=4, patch_size=32,
                                   perturbation=0.3)
        write_split(tmp_path / "train", patches)
        index = tmp_path / "train" / "index.csv"
        lines = index.read_text().splitlines()
        head, first = lines[0], lines[1].rsplit(",", 1)[0] + ","
        index.write_text("\n".join([head, first]) + "\n")
        ps = load_split(tmp_path / "train")
        assert len(ps) == 1
        assert ps.masks.sum() == 0

    def test_bad_content_fraction_rejected(self, tmp_path):
        patches = generate_patches(seed=6, n_slides=2, n_patches=4, patch_size=32,
                                   perturbation=0.3)
        write_split(tmp_path / "train", patches)
        index = tmp_path / "train" / "index.csv"
        lines = index.read_text().splitlines()
        cells = lines[1].split(",")
        cells[3] = "7.0"
        lines[1] = ",".join(cells)
        index.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="content_fraction"):
            load_split(tmp_path / "train")

    def test_round_robin_balance(self):
        patches = generate_patches(seed=6, n_slides=4, n_patches=32, patch_size=32,
                                   perturbation=0.3)
        sids = np.array([p.slide_id for p in patches])
        cids = np.array([p.class_id for p in patches])
        assert np.all(np.bincount(sids) == 8)
        assert np.all(np.bincount(cids) == 16)
        # class split is even within each slide
        for s in range(4):
            assert cids[sids == s].mean() == 0.5
