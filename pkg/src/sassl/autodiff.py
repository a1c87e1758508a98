"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: a ``Tape`` is opened as a context manager, every
differentiable operation executed inside appends a record (inputs,
output, backward rule) in execution order, and ``backward`` walks the
records in reverse to accumulate gradients. The tape is rebuilt for
every forward pass and consumed exactly once.

All values are 64-bit floats and every operation validates that its
output is finite, so a NaN/Inf anywhere aborts immediately instead of
poisoning a training run.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients.

    ``grad`` is a same-shape buffer that exists only while
    ``requires_grad`` is true; it accumulates across backward passes and
    is cleared by the optimizer after each step.
    """

    __slots__ = ("data", "requires_grad", "_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        """Internal constructor for op outputs (data already float64)."""
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out._grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray | None:
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        self._grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Tensor":
        """Stop-gradient marker: same values, no gradient flow."""
        return Tensor._wrap(self.data, False)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars route to scale/add_scalar
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None):
        return reduce_sum(self, axis)

    def mean(self, axis: int | None = None):
        return reduce_mean(self, axis)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Execution-ordered record of differentiable operations.

    Records are appended in forward order (a topological order by
    construction) and consumed exactly once by ``backward``.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self._consumed:
            raise NumericError("cannot record onto a consumed tape")
        self._records.append((output, inputs, backward_fn))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Wrap an op result, validate finiteness, and record on the tape."""
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad)
    tape = _active_tape()
    if tape is not None and requires_grad:
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d loss / d t into ``t.grad`` for every tracked tensor.

    The tape is consumed; reuse raises. Tensors reachable only through
    ``detach`` receive no gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise NumericError("tape already consumed by a previous backward()")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}

    for output, inputs, backward_fn in reversed(tape._records):
        g = grads.pop(id(output), None)
        if g is None:
            continue
        holders.pop(id(output), None)
        if output.requires_grad:
            output.accumulate_grad(g)
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t

    # remaining entries are leaves (no producing record on this tape)
    for key, g in grads.items():
        t = holders[key]
        if t.requires_grad:
            t.accumulate_grad(g)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires equal shapes, got {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("add_scalar", a.data + c, (a,), lambda g: (g,))


def leaky_relu(a: Tensor, alpha: float = 0.01) -> Tensor:
    d = a.data
    slope = np.where(d >= 0.0, 1.0, alpha)
    return _make("leaky_relu", d * slope, (a,), lambda g: (g * slope,))


def sigmoid(a: Tensor) -> Tensor:
    d = a.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    y[~pos] = ed / (1.0 + ed)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    d = a.data
    if np.any(d <= 0.0):
        raise NumericError("log requires strictly positive inputs")
    return _make("log", np.log(d), (a,), lambda g: (g / d,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul requires [M,K]x[K,N], got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose requires a 2-d tensor, got shape {a.shape}")
    return _make("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[N,d] + v[d] broadcast over rows; the only non-scalar broadcast."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec requires [N,d] and [d], got {x.shape} and {v.shape}")
    return _make("add_rowvec", x.data + v.data[None, :], (x, v),
                 lambda g: (g, g.sum(axis=0)))


def _normalize_axis(op: str, axis: int, rank: int) -> int:
    if not -rank <= axis < rank:
        raise ShapeError(f"{op}: axis {axis} out of range for rank {rank}")
    return axis % rank


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        shape = a.shape
        return _make("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = _normalize_axis("sum", axis, a.data.ndim)
    return _make("sum", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),))


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.size
        shape = a.shape
        return _make("mean", np.asarray(a.data.mean()), (a,),
                     lambda g: (np.broadcast_to(g / n, shape).copy(),))
    ax = _normalize_axis("mean", axis, a.data.ndim)
    n = a.shape[ax]
    return _make("mean", a.data.mean(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy(),))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit-normalize along the last axis; degenerate rows are an error."""
    d = a.data
    norms = np.sqrt((d * d).sum(axis=-1, keepdims=True))
    if np.any(norms < eps):
        raise NumericError("l2_normalize: input row with near-zero norm")
    y = d / norms

    def _back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make("l2_normalize", y, (a,), _back)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, k: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) cross-correlation.

    Accepts a single image [C,H,W] or a batch [B,C,H,W]; the kernel is
    [C_out,C_in,kh,kw]. Output spatial size is floor((H-kh)/stride)+1.
    """
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    kd = k.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError(f"conv2d requires [B,C,H,W] and [Co,Ci,kh,kw], got {x.shape} and {k.shape}")
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = kd.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input has {C} channels but kernel expects {Ci}")
    if kh > H or kw > W:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {H}x{W}")
    windows = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", windows, kd, optimize=True)
    Ho, Wo = out.shape[2], out.shape[3]

    def _back(g):
        if single:
            g = g[None] if g.ndim == 3 else g
        gk = np.einsum("bohw,bchwij->ocij", g, windows, optimize=True)
        gx = np.zeros_like(xd)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i: i + stride * (Ho - 1) + 1: stride,
                      j: j + stride * (Wo - 1) + 1: stride] += np.einsum(
                    "bohw,oc->bchw", g, kd[:, :, i, j], optimize=True)
        return (gx[0] if single else gx, gk)

    return _make("conv2d", out[0] if single else out, (x, k), _back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; works on [C,H,W] or [B,C,H,W]."""
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    d = x.data
    if d.ndim not in (3, 4):
        raise ShapeError(f"upsample_nearest requires [C,H,W] or [B,C,H,W], got {x.shape}")
    out = np.repeat(np.repeat(d, factor, axis=-2), factor, axis=-1)
    H, W = d.shape[-2], d.shape[-1]

    def _back(g):
        lead = g.shape[:-2]
        blocks = g.reshape(lead + (H, factor, W, factor))
        return (blocks.sum(axis=(-3, -1)),)

    return _make("upsample_nearest", out, (x,), _back)


# ---------------------------------------------------------------------------
# fused losses
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits[B,C]) against integer labels[B]."""
    labels = np.asarray(labels, dtype=np.int64)
    d = logits.data
    if d.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy requires [B,C] logits, got {logits.shape}")
    B, C = d.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {B} logit rows but labels shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ShapeError(f"softmax_cross_entropy: label out of range [0,{C})")
    m = d.max(axis=1, keepdims=True)
    z = d - m
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    loss = -logp[np.arange(B), labels].mean()

    def _back(g):
        grad = ez / denom
        grad[np.arange(B), labels] -= 1.0
        return (grad * (g / B),)

    return _make("softmax_cross_entropy", np.asarray(loss), (logits,), _back)


def bce_with_logits(z: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on sigmoid(z) against constant targets in [0,1]."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    d = z.data
    if d.shape != t.shape:
        raise ShapeError(f"bce_with_logits requires equal shapes, got {d.shape} and {t.shape}")
    # stable form: max(z,0) - z*t + log(1 + exp(-|z|))
    loss = (np.maximum(d, 0.0) - d * t + np.log1p(np.exp(-np.abs(d)))).mean()
    n = d.size

    def _back(g):
        sig = np.empty_like(d)
        pos = d >= 0
        sig[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ed = np.exp(d[~pos])
        sig[~pos] = ed / (1.0 + ed)
        return ((sig - t) * (g / n),)

    return _make("bce_with_logits", np.asarray(loss), (z,), _back)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class SGD:
    """Momentum SGD over named parameters.

    v <- momentum * v + grad; p <- p - lr * v; gradients are zeroed
    after the step. Named parameters let NaN aborts say which tensor
    blew up.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]],
                 lr: float, momentum: float = 0.0):
        self.named_params = [(name, p) for name, p in named_params]
        if lr < 0.0:
            raise NumericError(f"SGD: learning rate must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise NumericError(f"SGD: momentum must be in [0,1), got {momentum}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for _, p in self.named_params]

    def step(self) -> None:
        for (name, p), v in zip(self.named_params, self._velocity):
            g = p._grad
            if g is None:
                g = 0.0
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            p.zero_grad()

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()
