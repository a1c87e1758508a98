"""Small neural-net layer zoo on top of the autodiff engine.

Everything is built from the primitive ops so gradients come for free.
Parameter initialization draws from the package RNG, so a module built
from the same seed is bit-identical across runs and platforms.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .rng import Xoshiro256, derive_seed


def _he_uniform(rng: Xoshiro256, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(3.0 / fan_in))
    flat = np.array([rng.uniform(-bound, bound) for _ in range(int(np.prod(shape)))])
    return flat.reshape(shape)


class Module:
    """Base class: parameter registry, freezing, and state hashing."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def register(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag
            if not flag:
                p.zero_grad()

    def param_hash(self) -> str:
        """SHA-256 over the exact parameter bytes, order-stable."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))
            extra = sorted(set(arrays) - set(own))
            raise ShapeError(f"state mismatch: missing={missing} extra={extra}")
        for name, p in own.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter '{name}': expected {p.data.shape}, got {arr.shape}")
            p.data = arr.copy()


@contextlib.contextmanager
def frozen(module: Module):
    """Temporarily stop gradients into a module's parameters.

    Gradients still flow *through* the module to its inputs, which is
    exactly what the generator phase of adversarial training needs.
    """
    saved = [(p, p.requires_grad) for _, p in module.named_parameters()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield module
    finally:
        for p, flag in saved:
            p.requires_grad = flag


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Xoshiro256, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = self.register("weight", Tensor(_he_uniform(rng, (in_dim, out_dim), in_dim)))
        self.bias = self.register("bias", Tensor(np.zeros(out_dim))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add_rowvec(y, self.bias)
        return y


class Conv2d(Module):
    """Valid convolution layer; bias is added per output channel."""

    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int,
                 rng: Xoshiro256, bias: bool = True):
        super().__init__()
        self.stride = stride
        fan_in = in_ch * ksize * ksize
        self.kernel = self.register(
            "kernel", Tensor(_he_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in)))
        self.bias = self.register("bias", Tensor(np.zeros(out_ch))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.kernel, self.stride)
        if self.bias is not None:
            y = _add_channel_bias(y, self.bias)
        return y


def _add_channel_bias(y: Tensor, bias: Tensor) -> Tensor:
    """Add bias[c] to every spatial position of channel c.

    There is no implicit broadcasting in the op set, so the channel axis
    is rotated to the last position and add_rowvec does the work. For
    batched input the bias is first tiled differentiably across the
    batch via ones[B,1] @ bias[1,C].
    """
    if y.data.ndim == 3:
        C, H, W = y.shape
        flat = ad.transpose(ad.reshape(y, (C, H * W)))  # [HW, C]
        flat = ad.add_rowvec(flat, bias)
        return ad.reshape(ad.transpose(flat), (C, H, W))
    B, C, H, W = y.shape
    flat = ad.reshape(y, (B * C, H * W))
    flat_t = ad.transpose(flat)                         # [HW, B*C]
    ones = Tensor(np.ones((B, 1)))
    tiled = ad.reshape(ad.matmul(ones, ad.reshape(bias, (1, C))), (B * C,))
    out = ad.transpose(ad.add_rowvec(flat_t, tiled))
    return ad.reshape(out, (B, C, H, W))


def batch_standardize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each feature over the batch: (x - mean) / sqrt(var + eps).

    Built entirely from primitive ops so the gradient, including the
    dependence of the batch statistics on every row, comes from the tape.
    Twin-view heads collapse to a constant without this.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_standardize requires [N,d], got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ShapeError("batch_standardize needs at least 2 rows")
    mu = ad.reduce_mean(x, axis=0)
    xc = ad.add_rowvec(x, ad.scale(mu, -1.0))
    var = ad.reduce_mean(ad.mul(xc, xc), axis=0)
    inv = ad.exp(ad.scale(ad.log(ad.add_scalar(var, eps)), -0.5))
    ones = Tensor(np.ones((n, 1)))
    return ad.mul(xc, ad.matmul(ones, ad.reshape(inv, (1, d))))


def global_mean_pool(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C] (or [C,H,W] -> [C]) by spatial averaging."""
    if x.data.ndim == 4:
        B, C, H, W = x.shape
        return ad.reduce_mean(ad.reshape(x, (B, C, H * W)), axis=2)
    if x.data.ndim == 3:
        C, H, W = x.shape
        return ad.reduce_mean(ad.reshape(x, (C, H * W)), axis=1)
    raise ShapeError(f"global_mean_pool requires [B,C,H,W] or [C,H,W], got {x.shape}")


class Encoder(Module):
    """Four-stage convolutional encoder producing a d-dimensional embedding.

    Stages: conv(3->8,k3,s2), conv(8->16,k3,s2), conv(16->32,k3,s2),
    then global mean pool and a linear projection to ``embed_dim``.
    Intermediate activations are exposed as taps so a trailing encoder
    can mirror the computation stage by stage.
    """

    STAGE_CHANNELS = (8, 16, 32)

    def __init__(self, embed_dim: int, seed: int, in_ch: int = 3):
        super().__init__()
        self.embed_dim = embed_dim
        self.in_ch = in_ch
        rng = Xoshiro256(derive_seed(seed, 0x454E43))
        chans = (in_ch,) + self.STAGE_CHANNELS
        self.convs = []
        for i in range(3):
            conv = Conv2d(chans[i], chans[i + 1], ksize=3, stride=2, rng=rng)
            self.add_child(f"conv{i}", conv)
            self.convs.append(conv)
        self.head = self.add_child("head", Linear(self.STAGE_CHANNELS[-1], embed_dim, rng))

    @property
    def num_stages(self) -> int:
        return 4

    def stage(self, i: int, x: Tensor) -> Tensor:
        """Run stage i on the previous stage's output."""
        if i < 3:
            return ad.leaky_relu(self.convs[i](x), 0.01)
        return self.head(global_mean_pool(x))

    def forward_with_taps(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        taps = []
        h = x
        for i in range(self.num_stages):
            h = self.stage(i, h)
            taps.append(h)
        return h, taps

    def __call__(self, x: Tensor) -> Tensor:
        out, _ = self.forward_with_taps(x)
        return out


class ProjectionHead(Module):
    """Two-layer width-preserving MLP with batch standardization.

    The standardized output keeps the per-feature variance pinned at 1
    across the batch, which is what stops the twin-view objectives from
    collapsing everything to a single point.
    """

    def __init__(self, dim: int, seed: int):
        super().__init__()
        self.dim = dim
        rng = Xoshiro256(derive_seed(seed, 0x50524F4A))
        self.fc1 = self.add_child("fc1", Linear(dim, dim, rng))
        self.fc2 = self.add_child("fc2", Linear(dim, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(batch_standardize(self.fc1(x)), 0.01)
        return batch_standardize(self.fc2(h))
