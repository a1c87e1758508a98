"""Downstream transfer with a frozen generic encoder and a trainable twin.

The pretrained ("generic") encoder is kept frozen as a feature bank. A
structurally identical "special" encoder is trained on the labeled
task, but each of its stages receives the generic stage output as an
additive side input:

    f_s[l] = stage_s[l](f_s[l-1]) + f_g[l]

so a zero-initialized special encoder starts out computing exactly the
generic features and finetuning only ever learns a correction. The two
final embeddings are fused elementwise as f_g * f_s + sigmoid(f_s)
before the task head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor, backward
from .errors import DataError, ShapeError
from .nn import Conv2d, Encoder, Linear, Module, global_mean_pool
from .patchio import PatchSet
from .rng import Xoshiro256, derive_seed
from .synth import AugmentConfig, augment_view, center_crop

TASKS = ("classification", "regression", "segmentation")


class DualEncoder(Module):
    """Frozen generic encoder plus trainable special twin with stage taps."""

    def __init__(self, generic: Encoder, init: str, seed: int):
        super().__init__()
        self.generic = self.add_child("generic", generic)
        self.special = self.add_child(
            "special", Encoder(generic.embed_dim, derive_seed(seed, 0x53504543),
                               in_ch=generic.in_ch))
        if init == "zero":
            for _, p in self.special.named_parameters():
                p.data[...] = 0.0
        elif init == "copy":
            self.special.load_state_arrays(
                {k: v.copy() for k, v in generic.state_arrays().items()})
        else:
            raise DataError(f"special encoder init must be 'zero' or 'copy', got '{init}'")
        self.generic.set_trainable(False)

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [("special." + n, p) for n, p in self.special.named_parameters()]

    def forward_with_taps(self, x: Tensor):
        """Returns (fused embedding, generic taps, special taps)."""
        g_taps = []
        h = x
        for i in range(self.generic.num_stages):
            h = self.generic.stage(i, h)
            g_taps.append(h)
        s_taps = []
        f = x
        for i in range(self.special.num_stages):
            f = ad.add(self.special.stage(i, f), g_taps[i])
            s_taps.append(f)
        fg, fs = g_taps[-1], s_taps[-1]
        fused = ad.add(ad.mul(fg, fs), ad.sigmoid(fs))
        return fused, g_taps, s_taps

    def __call__(self, x: Tensor) -> Tensor:
        fused, _, _ = self.forward_with_taps(x)
        return fused


def _zero_params(module: Module) -> Module:
    """Zero a readout layer so training starts from a neutral output.

    The fused embedding's scale depends on the pretrained encoder, so a
    randomly initialized readout can start deep in softmax/sigmoid
    saturation where gradients carry no class information.
    """
    for _, p in module.named_parameters():
        p.data[...] = 0.0
    return module


class ClassifierHead(Module):
    def __init__(self, dim: int, n_classes: int, seed: int):
        super().__init__()
        rng = Xoshiro256(derive_seed(seed, 0x434C5346))
        self.fc = self.add_child("fc", _zero_params(Linear(dim, n_classes, rng)))

    def __call__(self, fused: Tensor) -> Tensor:
        return self.fc(fused)


class RegressorHead(Module):
    """Linear readout squashed through a sigmoid, so predictions live in
    (0,1) like the mask-fraction targets they regress."""

    def __init__(self, dim: int, seed: int):
        super().__init__()
        rng = Xoshiro256(derive_seed(seed, 0x52454746))
        self.fc = self.add_child("fc", _zero_params(Linear(dim, 1, rng)))

    def __call__(self, fused: Tensor) -> Tensor:
        return ad.sigmoid(self.fc(fused))


class SegmentationHead(Module):
    """Nearest-upsample the fused spatial tap back to view resolution,
    then two 1x1 convolutions produce a per-pixel foreground logit map."""

    def __init__(self, in_ch: int, hidden: int, view_size: int, tap_size: int, seed: int):
        super().__init__()
        if view_size % tap_size != 0:
            raise ShapeError(
                f"view size {view_size} not an integer multiple of tap size {tap_size}")
        self.factor = view_size // tap_size
        rng = Xoshiro256(derive_seed(seed, 0x53454748))
        self.conv1 = self.add_child("conv1", Conv2d(in_ch, hidden, 1, 1, rng))
        self.conv2 = self.add_child("conv2", _zero_params(Conv2d(hidden, 1, 1, 1, rng)))

    def __call__(self, spatial_tap: Tensor) -> Tensor:
        up = ad.upsample_nearest(spatial_tap, self.factor)
        logits = self.conv2(ad.leaky_relu(self.conv1(up), 0.01))
        B, _, H, W = logits.shape
        return ad.reshape(logits, (B, H, W))


def make_head(task: str, embed_dim: int, n_classes: int, view_size: int,
              tap_size: int, seed: int) -> Module:
    if task == "classification":
        return ClassifierHead(embed_dim, n_classes, seed)
    if task == "regression":
        return RegressorHead(embed_dim, seed)
    if task == "segmentation":
        return SegmentationHead(Encoder.STAGE_CHANNELS[-1], 16, view_size, tap_size, seed)
    raise DataError(f"unknown task '{task}', expected one of {TASKS}")


@dataclass
class LabeledBatch:
    views: np.ndarray        # [N,3,c,c]
    masks: np.ndarray        # [N,c,c]
    class_ids: np.ndarray    # [N]

    def fractions(self) -> np.ndarray:
        return self.masks.reshape(len(self.views), -1).mean(axis=1)


class LabeledSampler:
    """Uniform with-replacement batches over a labeled split.

    Masks ride along through the geometric transforms so segmentation
    targets and recomputed tissue fractions always match the view.
    """

    def __init__(self, data: PatchSet, batch_size: int, aug: AugmentConfig, seed: int):
        self.data = data
        self.batch_size = batch_size
        self.aug = aug
        self._rng = Xoshiro256(derive_seed(seed, 0x4C424C44))

    def next_batch(self) -> LabeledBatch:
        views, masks, classes = [], [], []
        for _ in range(self.batch_size):
            i = self._rng.randbelow(len(self.data))
            v, m = augment_view(self.data.images[i], self._rng, self.aug,
                                mask=self.data.masks[i])
            views.append(v)
            masks.append(m)
            classes.append(self.data.class_ids[i])
        return LabeledBatch(views=np.stack(views), masks=np.stack(masks),
                            class_ids=np.array(classes, dtype=np.int64))


def fused_spatial_tap(g_taps: list[Tensor], s_taps: list[Tensor]) -> Tensor:
    """Elementwise fusion g*s + sigmoid(s) of the deepest spatial taps."""
    g, s = g_taps[-2], s_taps[-2]
    return ad.add(ad.mul(g, s), ad.sigmoid(s))


def task_loss(task: str, dual: DualEncoder, head: Module, batch: LabeledBatch) -> Tensor:
    x = Tensor(batch.views)
    fused, g_taps, s_taps = dual.forward_with_taps(x)
    if task == "classification":
        return ad.softmax_cross_entropy(head(fused), batch.class_ids)
    if task == "regression":
        pred = ad.reshape(head(fused), (-1,))
        diff = ad.sub(pred, Tensor(batch.fractions()))
        return ad.reduce_mean(ad.mul(diff, diff))
    if task == "segmentation":
        logits = head(fused_spatial_tap(g_taps, s_taps))    # [B,H,W]
        return ad.bce_with_logits(logits, batch.masks.astype(np.float64))
    raise DataError(f"unknown task '{task}'")


def finetune(dual: DualEncoder, head: Module, task: str, sampler: LabeledSampler,
             steps: int, lr: float, sgd_momentum: float = 0.9,
             log_every: int = 50) -> list[dict]:
    """Train the special encoder and head; the generic tower never moves."""
    params = dual.trainable_parameters() + [
        ("head." + n, p) for n, p in head.named_parameters()]
    opt = SGD(params, lr=lr, momentum=sgd_momentum)
    logs = []
    for step in range(1, steps + 1):
        batch = sampler.next_batch()
        with Tape() as tape:
            loss = task_loss(task, dual, head, batch)
        backward(loss, tape)
        opt.step()
        if step % log_every == 0 or step == steps:
            logs.append({"step": step, "loss": loss.item()})
    return logs


def predict(task: str, dual: DualEncoder, head: Module, views: np.ndarray,
            batch_size: int = 64) -> np.ndarray:
    """Model outputs on evaluation views.

    Classification: argmax class ids (the softmax probability vector and
    its argmax agree, so the simplex never needs materializing).
    Regression: sigmoid outputs in (0,1). Segmentation: binary masks
    from thresholding sigmoid(logit) at 0.5.
    """
    outs = []
    for start in range(0, len(views), batch_size):
        x = Tensor(views[start: start + batch_size])
        fused, g_taps, s_taps = dual.forward_with_taps(x)
        if task == "classification":
            outs.append(head(fused).data.argmax(axis=1))
        elif task == "regression":
            outs.append(head(fused).data.reshape(-1))
        else:
            logits = head(fused_spatial_tap(g_taps, s_taps)).data
            prob = 1.0 / (1.0 + np.exp(-logits))
            outs.append((prob > 0.5).astype(np.int64))
    return np.concatenate(outs)


def evaluation_views(data: PatchSet, crop: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic center-crop views and co-cropped masks for a split."""
    views = np.stack([center_crop(img, crop) for img in data.images])
    masks = np.stack([center_crop(m, crop) for m in data.masks])
    return views, masks


def embed_views(encoder: Encoder, views: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Unit-normalized encoder embeddings for probing; no gradients kept."""
    out = []
    for start in range(0, len(views), batch_size):
        emb = encoder(Tensor(views[start: start + batch_size])).data
        norms = np.sqrt((emb * emb).sum(axis=1, keepdims=True))
        out.append(emb / np.maximum(norms, 1e-12))
    return np.concatenate(out)
