"""Synthetic histology patch generator.

Patches are rendered with a two-dye optical-density model: each dye has
a concentration field (Gaussian blobs) and an RGB absorption vector, and
pixel values follow background * exp(-sum_dye concentration * od). Each
synthetic slide perturbs the dye vectors and background tint, so "which
slide did this come from" is purely a color/stain question while the
blob geometry carries the content class.

Class 0 patches contain a few large nuclei blobs, class 1 many small
ones, with amplitudes tuned so both classes deposit roughly the same
total dye mass (no trivial mean-intensity shortcut).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError
from .rng import Xoshiro256, derive_seed

# absorption (optical density) per RGB channel for the two dyes:
# row 0 = hematoxylin-like (blue-purple), row 1 = eosin-like (pink)
REFERENCE_OD = np.array([
    [0.65, 0.70, 0.29],
    [0.07, 0.99, 0.11],
])

BASE_BACKGROUND = np.array([0.96, 0.95, 0.97])

MASK_THRESHOLD = 0.5

# stream-domain tags so slide/content/augment draws never collide
_TAG_SLIDE = 0x534C4944
_TAG_CONTENT = 0x434F4E54
_TAG_AUG = 0x41554731


@dataclass(frozen=True)
class SlideSpec:
    """Per-slide staining appearance: dye absorption matrix and background."""
    slide_id: int
    stain_matrix: np.ndarray  # [2,3], nonnegative
    background: np.ndarray    # [3], each in (0,1]
    rng_seed: int             # seed of the stream that drew this profile


@dataclass
class Patch:
    """One rendered patch plus its ground truth."""
    image: np.ndarray         # [3,S,S] float64 in (0,1]
    mask: np.ndarray          # [S,S] uint8, 1 where nuclei dye dominates
    slide_id: int
    class_id: int
    content_seed: int

    @property
    def size(self) -> int:
        return self.image.shape[1]

    def content_fraction(self) -> float:
        return float(self.mask.mean())


def make_slide(seed: int, perturbation: float, slide_id: int = 0) -> SlideSpec:
    """Sample a slide's staining profile.

    Every dye matrix entry gets an independent multiplicative factor in
    [1-p, 1+p], so entries never stray more than the perturbation
    fraction from the reference. The background picks up a per-channel
    darkening of at most 35% of p, standing in for scanner/illumination
    differences; it is the strongest per-slide color cue because it
    shows through on every pixel. Perturbation 0 reproduces the
    reference appearance exactly.
    """
    if not 0.0 <= perturbation <= 1.0:
        raise DataError(f"stain perturbation must be in [0, 1], got {perturbation}")
    stream_seed = derive_seed(seed, _TAG_SLIDE, slide_id)
    rng = Xoshiro256(stream_seed)
    factors = np.array([[1.0 + perturbation * rng.uniform(-1.0, 1.0) for _ in range(3)]
                        for _ in range(2)])
    stain_matrix = np.maximum(REFERENCE_OD * factors, 0.01)
    bg = BASE_BACKGROUND * np.array(
        [1.0 - 0.35 * perturbation * rng.uniform(0.0, 1.0) for _ in range(3)])
    return SlideSpec(slide_id=slide_id, stain_matrix=stain_matrix, background=bg,
                     rng_seed=stream_seed)


def _blob_field(rng: Xoshiro256, size: int, n_blobs: int,
                r_lo: float, r_hi: float, amp_lo: float, amp_hi: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size))
    for _ in range(n_blobs):
        cy = rng.uniform(0.0, size)
        cx = rng.uniform(0.0, size)
        r = rng.uniform(r_lo, r_hi) * size
        amp = rng.uniform(amp_lo, amp_hi)
        field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * r * r))
    return field


def _content_fields(rng: Xoshiro256, size: int, class_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Nuclei and stroma concentration fields for one patch."""
    if class_id == 0:
        # few large nuclei clusters
        n = rng.randint(3, 5)
        nuclei = _blob_field(rng, size, n, 0.14, 0.22, 0.55, 0.80)
    elif class_id == 1:
        # many small nuclei; higher amplitude keeps total dye mass comparable
        n = rng.randint(12, 18)
        nuclei = _blob_field(rng, size, n, 0.05, 0.09, 0.95, 1.40)
    else:
        raise DataError(f"unknown content class {class_id}")
    stroma = 0.18 + _blob_field(rng, size, 2, 0.30, 0.50, 0.15, 0.30)
    return nuclei, stroma


def render_patch(slide: SlideSpec, content_seed: int, class_id: int, size: int = 32) -> Patch:
    """Render one patch on the given slide.

    The content RNG is seeded independently of the slide, so the same
    content seed produces the same geometry (and mask) no matter which
    slide renders it; only the colors change.
    """
    rng = Xoshiro256(derive_seed(content_seed, _TAG_CONTENT))
    nuclei, stroma = _content_fields(rng, size, class_id)
    od = (nuclei[:, :, None] * slide.stain_matrix[0][None, None, :]
          + stroma[:, :, None] * slide.stain_matrix[1][None, None, :])
    image = slide.background[None, None, :] * np.exp(-od)
    image = np.ascontiguousarray(image.transpose(2, 0, 1))
    if image.min() < 1.0 / 255.0:
        raise NumericError("rendered patch too dark for 8-bit storage")
    mask = (nuclei > MASK_THRESHOLD).astype(np.uint8)
    return Patch(image=image, mask=mask, slide_id=slide.slide_id,
                 class_id=class_id, content_seed=content_seed)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    crop: int                 # view side length
    flip_prob: float = 0.5
    jitter: float = 0.15         # max relative brightness change, shared by channels
    channel_jitter: float = 0.0  # max extra relative change drawn per channel
    erase: float = 0.0           # max erased square side, as a fraction of crop


def augment_view(image: np.ndarray, rng: Xoshiro256, cfg: AugmentConfig,
                 mask: np.ndarray | None = None):
    """Random crop + horizontal flip + erasing + brightness/contrast jitter.

    Photometric noise has two parts: a brightness factor shared across
    channels (illumination) and an independent per-channel factor
    (color cast). Keeping the amplitudes separate matters because the
    per-channel part scrambles exactly the hue cues that identify a
    slide; how much of that an augmentation applies decides whether
    stain is still learnable from the views. Erasing blanks a random
    square with the view's per-channel mean, so it perturbs structure
    heavily while leaving the average color untouched. The mask, if
    given, receives the same geometric transform (never the photometric
    ones). With erasing and both jitters 0 and flip_prob 0 the view is
    a bitwise-equal window of the input.
    """
    size = image.shape[1]
    if cfg.crop > size:
        raise DataError(f"crop {cfg.crop} exceeds patch size {size}")
    oy = rng.randbelow(size - cfg.crop + 1)
    ox = rng.randbelow(size - cfg.crop + 1)
    view = image[:, oy: oy + cfg.crop, ox: ox + cfg.crop].copy()
    mview = mask[oy: oy + cfg.crop, ox: ox + cfg.crop].copy() if mask is not None else None
    if rng.random() < cfg.flip_prob:
        view = view[:, :, ::-1].copy()
        if mview is not None:
            mview = mview[:, ::-1].copy()
    if cfg.erase > 0.0:
        side = rng.randbelow(int(cfg.erase * cfg.crop) + 1)
        if side > 0:
            ey = rng.randbelow(cfg.crop - side + 1)
            ex = rng.randbelow(cfg.crop - side + 1)
            view[:, ey: ey + side, ex: ex + side] = view.mean(axis=(1, 2),
                                                              keepdims=True)
    jittered = False
    if cfg.jitter > 0.0:
        view *= 1.0 + rng.uniform(-cfg.jitter, cfg.jitter)
        jittered = True
    if cfg.channel_jitter > 0.0:
        for c in range(3):
            view[c] *= 1.0 + rng.uniform(-cfg.channel_jitter, cfg.channel_jitter)
        jittered = True
    if jittered:
        np.clip(view, 1.0 / 512.0, 1.0, out=view)
    if mask is not None:
        return view, mview
    return view


def center_crop(image: np.ndarray, crop: int) -> np.ndarray:
    """Deterministic evaluation view: the centered crop window."""
    size = image.shape[-1]
    if crop > size:
        raise DataError(f"crop {crop} exceeds patch size {size}")
    o = (size - crop) // 2
    return image[..., o: o + crop, o: o + crop].copy()


# ---------------------------------------------------------------------------
# batch sampling for pretraining
# ---------------------------------------------------------------------------

@dataclass
class MiniBatch:
    """Two augmented views per patch plus slide provenance."""
    view1: np.ndarray         # [N,3,c,c]
    view2: np.ndarray         # [N,3,c,c]
    slide_ids: np.ndarray     # [N] int64


class BatchSampler:
    """Balanced same-slide batch sampler over an in-memory patch set.

    Each batch draws ``batch_size / group_size`` distinct slides and
    ``group_size`` patches from each, so every patch has same-slide
    companions for the affinity supervision.
    """

    def __init__(self, images: np.ndarray, slide_ids: np.ndarray,
                 batch_size: int, group_size: int, aug: AugmentConfig, seed: int):
        if group_size < 2:
            raise DataError(
                f"group size must be >= 2 so every patch has a same-slide "
                f"companion, got {group_size}")
        if batch_size % group_size != 0:
            raise DataError(f"batch size {batch_size} not divisible by group size {group_size}")
        self.images = images
        self.slide_ids = np.asarray(slide_ids, dtype=np.int64)
        self.batch_size = batch_size
        self.group_size = group_size
        self.aug = aug
        unique = np.unique(self.slide_ids)
        self._pools = {int(s): np.flatnonzero(self.slide_ids == s) for s in unique}
        n_groups = batch_size // group_size
        if len(unique) < n_groups:
            raise DataError(f"need {n_groups} slides per batch but only {len(unique)} present")
        for s, pool in self._pools.items():
            if len(pool) < group_size:
                raise DataError(f"slide {s} has {len(pool)} patches, fewer than group size")
        self._slides = [int(s) for s in unique]
        self._rng = Xoshiro256(derive_seed(seed, _TAG_AUG))

    def next_batch(self) -> MiniBatch:
        rng = self._rng
        n_groups = self.batch_size // self.group_size
        order = rng.permutation(len(self._slides))
        chosen = [self._slides[order[i]] for i in range(n_groups)]
        v1, v2, sids = [], [], []
        for s in chosen:
            pool = self._pools[s]
            picks = rng.permutation(len(pool))[: self.group_size]
            for j in picks:
                img = self.images[pool[j]]
                v1.append(augment_view(img, rng, self.aug))
                v2.append(augment_view(img, rng, self.aug))
                sids.append(s)
        return MiniBatch(view1=np.stack(v1), view2=np.stack(v2),
                         slide_ids=np.array(sids, dtype=np.int64))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def generate_patches(seed: int, n_slides: int, n_patches: int, patch_size: int,
                     perturbation: float, n_classes: int = 2,
                     split_tag: int = 0) -> list[Patch]:
    """Render a split of patches, round-robin over slides and classes.

    Round-robin assignment guarantees every slide and class is evenly
    represented, which the balanced batch sampler depends on.
    """
    if n_classes != 2:
        raise DataError(f"generator defines 2 content classes, got {n_classes}")
    slides = [make_slide(seed, perturbation, slide_id=s) for s in range(n_slides)]
    patches = []
    for i in range(n_patches):
        slide = slides[i % n_slides]
        class_id = (i // n_slides) % n_classes
        content_seed = derive_seed(seed, split_tag, i)
        patches.append(render_patch(slide, content_seed, class_id, patch_size))
    return patches
