"""Adversarial stain suppression during pretraining.

A small discriminator re-embeds the encoder features of both augmented
views, and an affinity matrix A (sigmoid-squashed pairwise cosines
between the two re-embedded view batches) is compared against the batch
relation matrix R, where R[i,j] records whether patches i and j come
from the same slide. The discriminator is trained to make A match R
(recover slide identity); the encoder is trained to defeat it by
driving all affinities up, which is only possible if its features stop
encoding the slide.

The two players are updated in strict alternation: a discriminator
step touches no encoder parameter and vice versa.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tape, Tensor, backward
from .errors import NumericError, ShapeError
from .nn import Linear, Module, frozen
from .rng import Xoshiro256, derive_seed
from .synth import BatchSampler, MiniBatch


class Discriminator(Module):
    """Three width-preserving linear layers with coupled leaky activations.

    The input skip connection is added to the last layer's output, so at
    zero weights the module is exactly the identity map and the affinity
    matrix reduces to plain feature cosines.
    """

    def __init__(self, dim: int, seed: int):
        super().__init__()
        self.dim = dim
        rng = Xoshiro256(derive_seed(seed, 0x44495343))
        self.fc1 = self.add_child("fc1", Linear(dim, dim, rng))
        self.fc2 = self.add_child("fc2", Linear(dim, dim, rng))
        self.fc3 = self.add_child("fc3", Linear(dim, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.fc1(x), 0.01)
        h = ad.leaky_relu(self.fc2(h), 0.01)
        return ad.add(self.fc3(h), x)


def relation_matrix(slide_ids: np.ndarray) -> np.ndarray:
    """R[i,j] = 1 when patches i and j share a slide (diagonal included)."""
    s = np.asarray(slide_ids)
    if s.ndim != 1:
        raise ShapeError(f"slide_ids must be 1-d, got shape {s.shape}")
    return (s[:, None] == s[None, :]).astype(np.float64)


def affinity_matrix(s1: Tensor, s2: Tensor, disc: Discriminator, tau: float) -> Tensor:
    """A[i,j] = sigmoid(cos(disc(s1)_i, disc(s2)_j) / tau).

    Rows index the first view's patches, columns the second view's, so
    the diagonal holds each patch's twin-view affinity. The sigmoid
    keeps every entry in (0,1) so the two group means in the
    discriminator loss are directly comparable.
    """
    if tau <= 0.0:
        raise ShapeError(f"affinity temperature must be positive, got {tau}")
    if s1.shape != s2.shape or s1.data.ndim != 2:
        raise ShapeError(
            f"affinity needs two matching [N,d] feature batches, got {s1.shape} and {s2.shape}")
    l1 = ad.l2_normalize(disc(s1))
    l2 = ad.l2_normalize(disc(s2))
    cos = ad.matmul(l1, ad.transpose(l2))
    return ad.sigmoid(ad.scale(cos, 1.0 / tau))


def discriminator_loss(affinity: Tensor, relation: np.ndarray) -> Tensor:
    """Mean off-relation affinity minus mean on-relation affinity.

    Minimizing drives same-slide pairs toward affinity 1 and
    cross-slide pairs toward 0; the best achievable value is -1.
    """
    if affinity.shape != relation.shape:
        raise ShapeError(
            f"affinity {affinity.shape} and relation {relation.shape} shapes differ")
    n_on = relation.sum()
    n_off = relation.size - n_on
    if n_on == 0 or n_off == 0:
        raise ShapeError("relation matrix needs both same-slide and cross-slide pairs")
    on = Tensor(relation)
    off = Tensor(1.0 - relation)
    off_term = ad.scale(ad.reduce_sum(ad.mul(off, affinity)), 1.0 / n_off)
    on_term = ad.scale(ad.reduce_sum(ad.mul(on, affinity)), 1.0 / n_on)
    return ad.sub(off_term, on_term)


def generator_adversarial_loss(affinity: Tensor) -> Tensor:
    """-mean(A): the encoder profits from indiscriminately high affinity."""
    n = affinity.size
    return ad.scale(ad.reduce_sum(affinity), -1.0 / n)


class SasslPretrainer:
    """Alternating two-player pretraining loop.

    Each ``step`` runs one discriminator update on detached features,
    then one encoder update on the SSL loss plus ``lambda_adv`` times
    the adversarial term (computed through a frozen discriminator).
    With ``lambda_adv`` 0 the adversarial machinery is skipped outright
    and the loop is the plain SSL trainer, bit for bit.
    """

    def __init__(self, framework, discriminator: Discriminator, sampler: BatchSampler,
                 lambda_adv: float, tau_affinity: float,
                 lr_g: float, lr_d: float, sgd_momentum: float = 0.9,
                 disc_steps: int = 1):
        if lambda_adv < 0.0:
            raise ShapeError(f"lambda_adv must be >= 0, got {lambda_adv}")
        if disc_steps < 1:
            raise ShapeError(f"disc_steps must be >= 1, got {disc_steps}")
        self.framework = framework
        self.discriminator = discriminator
        self.sampler = sampler
        self.lambda_adv = lambda_adv
        self.tau_affinity = tau_affinity
        self.disc_steps = disc_steps
        gen_params = []
        for mod_name, module in framework.trainable_modules():
            for name, p in module.named_parameters():
                gen_params.append((f"{mod_name}.{name}", p))
        self.opt_g = SGD(gen_params, lr=lr_g, momentum=sgd_momentum)
        self.opt_d = SGD(list(discriminator.named_parameters()), lr=lr_d,
                         momentum=sgd_momentum)
        self.step_count = 0

    def discriminator_step(self, batch: MiniBatch) -> float:
        """One update of the discriminator on frozen, detached features."""
        s1, s2 = self.framework.affinity_features(
            Tensor(batch.view1), Tensor(batch.view2))
        s1, s2 = s1.detach(), s2.detach()
        relation = relation_matrix(batch.slide_ids)
        try:
            with Tape() as tape:
                affinity = affinity_matrix(s1, s2, self.discriminator,
                                           self.tau_affinity)
                loss = discriminator_loss(affinity, relation)
            backward(loss, tape)
            self.opt_d.step()
        except NumericError as e:
            raise NumericError(f"discriminator phase, step {self.step_count}: {e}") from e
        return loss.item()

    def generator_step(self, batch: MiniBatch) -> tuple[float, float]:
        """One update of the encoder stack; discriminator params untouched."""
        try:
            with Tape() as tape:
                ssl_loss, s1, s2 = self.framework.ssl_loss(
                    Tensor(batch.view1), Tensor(batch.view2))
                adv_val = 0.0
                if self.lambda_adv > 0.0:
                    with frozen(self.discriminator):
                        affinity = affinity_matrix(s1, s2, self.discriminator,
                                                   self.tau_affinity)
                        adv = generator_adversarial_loss(affinity)
                    total = ad.add(ssl_loss, ad.scale(adv, self.lambda_adv))
                    adv_val = adv.item()
                else:
                    total = ssl_loss
            backward(total, tape)
            self.opt_g.step()
        except NumericError as e:
            raise NumericError(f"generator phase, step {self.step_count}: {e}") from e
        self.framework.post_step()
        return ssl_loss.item(), adv_val

    def step(self) -> dict:
        """Draw one batch and run both phases (discriminator first)."""
        batch = self.sampler.next_batch()
        d_loss = None
        if self.lambda_adv > 0.0:
            for _ in range(self.disc_steps):
                d_loss = self.discriminator_step(batch)
        ssl_loss, adv_loss = self.generator_step(batch)
        self.step_count += 1
        return {"step": self.step_count, "ssl_loss": ssl_loss,
                "gen_loss": ssl_loss + self.lambda_adv * adv_loss,
                "adv_loss": adv_loss, "d_loss": d_loss}
