"""Dual-encoder transfer: taps, freezing, the three task heads."""

import numpy as np
import pytest

from sassl.autodiff import Tensor
from sassl.errors import DataError
from sassl.nn import Encoder
from sassl.patchio import PatchSet
from sassl.rng import Xoshiro256
from sassl.synth import AugmentConfig, generate_patches
from sassl.transfer import (DualEncoder, LabeledSampler, embed_views,
                            evaluation_views, finetune, make_head, predict,
                            task_loss)


def tiny_views(rng, n=4, size=24):
    flat = [rng.uniform(0.05, 1.0) for _ in range(n * 3 * size * size)]
    return np.array(flat).reshape(n, 3, size, size)


def patchset(n=64, size=32, slides=4):
    ps = generate_patches(seed=3, n_slides=slides, n_patches=n, patch_size=size,
                          perturbation=0.4)
    return PatchSet(images=np.stack([p.image for p in ps]),
                    masks=np.stack([p.mask for p in ps]),
                    slide_ids=np.array([p.slide_id for p in ps]),
                    class_ids=np.array([p.class_id for p in ps]))


class TestDualEncoder:
    def test_zero_init_reproduces_generic_taps(self):
        generic = Encoder(8, seed=21)
        dual = DualEncoder(generic, init="zero", seed=22)
        x = Tensor(tiny_views(Xoshiro256(23)))
        _, g_taps, s_taps = dual.forward_with_taps(x)
        for g, s in zip(g_taps, s_taps):
            assert np.abs(s.data - g.data).max() <= 1e-12

    def test_copy_init_starts_from_generic_weights(self):
        generic = Encoder(8, seed=24)
        dual = DualEncoder(generic, init="copy", seed=25)
        g = generic.state_arrays()
        s = dual.special.state_arrays()
        for k in g:
            assert np.array_equal(g[k], s[k])

    def test_bad_init_rejected(self):
        with pytest.raises(DataError):
            DualEncoder(Encoder(8, seed=26), init="random", seed=27)

    def test_generic_params_not_trainable(self):
        dual = DualEncoder(Encoder(8, seed=28), init="zero", seed=29)
        assert all(not p.requires_grad for _, p in dual.generic.named_parameters())
        names = [n for n, _ in dual.trainable_parameters()]
        assert names and all(n.startswith("special.") for n in names)

    def test_fused_combines_both_towers(self):
        generic = Encoder(8, seed=30)
        dual = DualEncoder(generic, init="zero", seed=31)
        x = Tensor(tiny_views(Xoshiro256(32)))
        fused, g_taps, s_taps = dual.forward_with_taps(x)
        fg, fs = g_taps[-1].data, s_taps[-1].data
        expect = fg * fs + 1.0 / (1.0 + np.exp(-fs))
        assert np.allclose(fused.data, expect)


class _FixedSampler:
    """Feeds the same batch every step, for memorization tests."""

    def __init__(self, batch):
        self.batch = batch

    def next_batch(self):
        return self.batch


class TestFinetune:
    @pytest.mark.parametrize("task", ["classification", "regression", "segmentation"])
    def test_loss_decreases_on_fixed_batch(self, task):
        data = patchset()
        generic = Encoder(8, seed=33)
        dual = DualEncoder(generic, init="zero", seed=34)
        head = make_head(task, 8, 2, view_size=24, tap_size=2, seed=35)
        batch = LabeledSampler(data, 16, AugmentConfig(crop=24, jitter=0.0,
                                                       flip_prob=0.0),
                               seed=99).next_batch()
        before = task_loss(task, dual, head, batch).item()
        finetune(dual, head, task, _FixedSampler(batch), steps=200, lr=0.1,
                 log_every=50)
        after = task_loss(task, dual, head, batch).item()
        assert after < before

    def test_generic_tower_frozen_throughout(self):
        data = patchset()
        generic = Encoder(8, seed=37)
        before = generic.param_hash()
        dual = DualEncoder(generic, init="copy", seed=38)
        head = make_head("classification", 8, 2, 24, 2, seed=39)
        sampler = LabeledSampler(data, 8, AugmentConfig(crop=24), seed=40)
        finetune(dual, head, "classification", sampler, steps=30, lr=0.05)
        assert generic.param_hash() == before

    def test_task_loss_rejects_unknown_task(self):
        data = patchset(n=8)
        dual = DualEncoder(Encoder(8, seed=41), init="zero", seed=42)
        head = make_head("classification", 8, 2, 24, 2, seed=43)
        sampler = LabeledSampler(data, 4, AugmentConfig(crop=24), seed=44)
        with pytest.raises(DataError):
            task_loss("detection", dual, head, sampler.next_batch())


class TestPredictAndViews:
    def test_prediction_shapes(self):
        data = patchset(n=16)
        views, masks = evaluation_views(data, crop=24)
        assert views.shape == (16, 3, 24, 24)
        assert masks.shape == (16, 24, 24)
        dual = DualEncoder(Encoder(8, seed=45), init="zero", seed=46)
        cls_head = make_head("classification", 8, 2, 24, 2, seed=47)
        reg_head = make_head("regression", 8, 2, 24, 2, seed=48)
        seg_head = make_head("segmentation", 8, 2, 24, 2, seed=49)
        cls = predict("classification", dual, cls_head, views)
        reg = predict("regression", dual, reg_head, views)
        seg = predict("segmentation", dual, seg_head, views)
        assert cls.shape == (16,) and set(np.unique(cls)) <= {0, 1}
        assert reg.shape == (16,)
        assert seg.shape == (16, 24, 24)

    def test_segmentation_head_needs_integer_factor(self):
        from sassl.errors import ShapeError
        with pytest.raises(ShapeError):
            make_head("segmentation", 8, 2, view_size=25, tap_size=2, seed=50)

    def test_embed_views_unit_norm(self):
        data = patchset(n=12)
        views, _ = evaluation_views(data, crop=24)
        emb = embed_views(Encoder(8, seed=51), views)
        assert emb.shape == (12, 8)
        assert np.allclose((emb ** 2).sum(axis=1), 1.0)

    def test_labeled_sampler_targets_track_crops(self):
        data = patchset(n=16)
        sampler = LabeledSampler(data, 8, AugmentConfig(crop=24, jitter=0.2), seed=52)
        batch = sampler.next_batch()
        assert batch.views.shape == (8, 3, 24, 24)
        assert batch.masks.shape == (8, 24, 24)
        fracs = batch.fractions()
        assert np.all(fracs >= 0.0) and np.all(fracs <= 1.0)
        expect = batch.masks.reshape(8, -1).mean(axis=1)
        assert np.allclose(fracs, expect)
