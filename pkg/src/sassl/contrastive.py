"""Self-supervised pretraining frameworks over two augmented views.

Two paradigms are provided behind one small interface:

* ``MomentumInfoNceFramework``: query encoder + slowly-updated momentum
  key encoder + FIFO queue of past keys as negatives, trained with the
  InfoNCE objective.
* ``SimSiamFramework``: shared encoder with projector and predictor
  heads, trained by symmetrized negative-cosine against stop-gradient
  targets (no negatives at all).

Both expose ``affinity_features(view1, view2)``, the raw encoder
embeddings of the two views, which is what the stain adversary scores.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Encoder, Linear, Module, ProjectionHead, batch_standardize
from .rng import Xoshiro256, derive_seed


def _require_unit_rows(name: str, data: np.ndarray, tol: float = 1e-6) -> None:
    norms = np.sqrt((data * data).sum(axis=1))
    worst = float(np.abs(norms - 1.0).max())
    if worst > tol:
        raise ShapeError(f"{name} rows must be unit-normalized "
                         f"(worst norm deviation {worst:.3e})")


def info_nce_loss(queries: Tensor, positives: Tensor, negatives: Tensor,
                  temperature: float) -> Tensor:
    """Mean InfoNCE over the batch.

    ``queries`` and ``positives`` are aligned [N,d]; ``negatives`` is a
    shared bank [K,d]. All inputs must be unit-normalized; scores are
    plain dot products divided by ``temperature``. With every score
    equal the loss is exactly ln(K+1), the chance-level value.
    """
    if temperature <= 0.0:
        raise ShapeError(f"temperature must be positive, got {temperature}")
    if queries.shape != positives.shape or queries.data.ndim != 2:
        raise ShapeError(
            f"queries/positives must be matching [N,d], got {queries.shape} and {positives.shape}")
    if negatives.data.ndim != 2 or negatives.shape[1] != queries.shape[1]:
        raise ShapeError(f"negatives must be [K,{queries.shape[1]}], got {negatives.shape}")
    K = negatives.shape[0]
    if K < 1:
        raise ShapeError("InfoNCE requires at least one negative")
    _require_unit_rows("queries", queries.data)
    _require_unit_rows("positives", positives.data)
    _require_unit_rows("negatives", negatives.data)
    l_pos = ad.reshape(ad.reduce_sum(ad.mul(queries, positives), axis=1), (-1, 1))
    l_neg = ad.matmul(queries, ad.transpose(negatives))
    # column-concat [l_pos | l_neg] via exact 0/1 selection matrices
    e0 = Tensor(np.eye(1, K + 1))
    shift = Tensor(np.hstack([np.zeros((K, 1)), np.eye(K)]))
    logits = ad.add(ad.matmul(l_pos, e0), ad.matmul(l_neg, shift))
    logits = ad.scale(logits, 1.0 / temperature)
    labels = np.zeros(queries.shape[0], dtype=np.int64)
    return ad.softmax_cross_entropy(logits, labels)


def cosine_regression_loss(p: Tensor, z: Tensor) -> Tensor:
    """Mean of 1 - cos(p_i, z_i) over rows.

    Zero when each pair is parallel, 1 when orthogonal, 2 when opposed.
    """
    if p.shape != z.shape or p.data.ndim != 2:
        raise ShapeError(f"cosine loss needs matching [N,d], got {p.shape} and {z.shape}")
    pn = ad.l2_normalize(p)
    zn = ad.l2_normalize(z)
    cos = ad.reduce_mean(ad.reduce_sum(ad.mul(pn, zn), axis=1))
    return ad.add_scalar(ad.scale(cos, -1.0), 1.0)


def momentum_update(target: Module, online: Module, m: float) -> None:
    """In-place t <- m*t + (1-m)*o over paired parameters.

    m == 1 leaves the target bit-for-bit untouched (no arithmetic at
    all, so signed zeros survive).
    """
    if not 0.0 <= m <= 1.0:
        raise ShapeError(f"momentum must be in [0,1], got {m}")
    if m == 1.0:
        return
    tp = dict(target.named_parameters())
    op = dict(online.named_parameters())
    if set(tp) != set(op):
        raise ShapeError("momentum_update: parameter sets differ")
    for name, t in tp.items():
        t.data *= m
        t.data += (1.0 - m) * op[name].data


class NegativeQueue:
    """Fixed-size FIFO of key vectors serving as InfoNCE negatives.

    Starts full of deterministic random unit vectors so the very first
    step already has a complete negative bank.
    """

    def __init__(self, dim: int, capacity: int, seed: int):
        if capacity < 1:
            raise ShapeError(f"queue capacity must be >= 1, got {capacity}")
        rng = Xoshiro256(derive_seed(seed, 0x51554555))
        buf = np.array([[rng.normal() for _ in range(dim)] for _ in range(capacity)])
        buf /= np.sqrt((buf * buf).sum(axis=1, keepdims=True))
        self._buf = buf
        self._head = 0
        self.capacity = capacity
        self.dim = dim

    def push(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys, dtype=np.float64)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"queue expects [N,{self.dim}] keys, got {keys.shape}")
        _require_unit_rows("queue keys", keys)
        for row in keys:
            self._buf[self._head] = row
            self._head = (self._head + 1) % self.capacity

    def snapshot(self) -> np.ndarray:
        return self._buf.copy()


class MomentumInfoNceFramework:
    """Query/key twin towers with a momentum-updated key branch.

    The key branch is a structural copy of the query branch whose
    parameters are advanced by ``momentum_update`` after each optimizer
    step instead of by gradients; its outputs therefore never join the
    tape (parameters are flagged untrainable).
    """

    name = "moco"

    def __init__(self, encoder: Encoder, projector: ProjectionHead,
                 temperature: float, momentum: float,
                 queue_size: int, seed: int):
        self.encoder = encoder
        self.projector = projector
        self.temperature = temperature
        self.momentum = momentum
        self.key_encoder = Encoder(encoder.embed_dim, seed=0, in_ch=encoder.in_ch)
        self.key_projector = ProjectionHead(projector.dim, seed=0)
        self.key_encoder.load_state_arrays(
            {k: v.copy() for k, v in encoder.state_arrays().items()})
        self.key_projector.load_state_arrays(
            {k: v.copy() for k, v in projector.state_arrays().items()})
        self.key_encoder.set_trainable(False)
        self.key_projector.set_trainable(False)
        self.queue = NegativeQueue(projector.dim, queue_size, seed)
        self._pending_keys: np.ndarray | None = None

    def trainable_modules(self) -> list[tuple[str, Module]]:
        return [("encoder", self.encoder), ("projector", self.projector)]

    def affinity_features(self, view1: Tensor, view2: Tensor) -> tuple[Tensor, Tensor]:
        """Encoder embeddings of the two views (key branch for the second)."""
        return self.encoder(view1), self.key_encoder(view2)

    def ssl_loss(self, view1: Tensor, view2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        s1 = self.encoder(view1)
        s2 = self.key_encoder(view2)
        q = ad.l2_normalize(self.projector(s1))
        k = ad.l2_normalize(self.key_projector(s2))
        self._pending_keys = k.data.copy()
        negatives = Tensor(self.queue.snapshot())
        loss = info_nce_loss(q, k.detach(), negatives, self.temperature)
        return loss, s1, s2

    def post_step(self) -> None:
        momentum_update(self.key_encoder, self.encoder, self.momentum)
        momentum_update(self.key_projector, self.projector, self.momentum)
        if self._pending_keys is not None:
            self.queue.push(self._pending_keys)
            self._pending_keys = None


class PredictorHead(Module):
    """Width-preserving MLP mapping projections to predicted twin projections."""

    def __init__(self, dim: int, seed: int):
        super().__init__()
        self.dim = dim
        rng = Xoshiro256(derive_seed(seed, 0x50524544))
        self.fc1 = self.add_child("fc1", Linear(dim, dim, rng))
        self.fc2 = self.add_child("fc2", Linear(dim, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.leaky_relu(batch_standardize(self.fc1(x)), 0.01))


class SimSiamFramework:
    """Twin-view framework trained by prediction against stop-gradients.

    Loss is the symmetrized negative cosine: each view's predictor
    output chases the other view's detached projection.
    """

    name = "simsiam"

    def __init__(self, encoder: Encoder, projector: ProjectionHead,
                 predictor: PredictorHead):
        self.encoder = encoder
        self.projector = projector
        self.predictor = predictor

    def trainable_modules(self) -> list[tuple[str, Module]]:
        return [("encoder", self.encoder), ("projector", self.projector),
                ("predictor", self.predictor)]

    def affinity_features(self, view1: Tensor, view2: Tensor) -> tuple[Tensor, Tensor]:
        """Encoder embeddings of the two views (shared tower)."""
        return self.encoder(view1), self.encoder(view2)

    def ssl_loss(self, view1: Tensor, view2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        s1 = self.encoder(view1)
        s2 = self.encoder(view2)
        z1 = self.projector(s1)
        z2 = self.projector(s2)
        p1 = self.predictor(z1)
        p2 = self.predictor(z2)
        l1 = cosine_regression_loss(p1, z2.detach())
        l2 = cosine_regression_loss(p2, z1.detach())
        loss = ad.scale(ad.add(l1, l2), 0.5)
        return loss, s1, s2

    def post_step(self) -> None:
        pass
