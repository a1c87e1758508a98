"""Shared test utilities, chiefly the finite-difference gradient checker."""

from __future__ import annotations

import numpy as np

from sassl.autodiff import Tape, Tensor, backward


def check_gradients(build_loss, arrays, h=1e-5, tol=1e-6):
    """Compare tape gradients of a scalar loss against central differences.

    ``build_loss`` maps a list of Tensors to a scalar Tensor and must be
    a pure function of the values. Every element of every input is
    perturbed by +-h; the analytic gradient must match the numeric one
    with error at most ``tol`` relative to max(1, |analytic|, |numeric|).
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(tensors)
    backward(loss, tape)
    analytic = [t.grad.copy() for t in tensors]

    def value_at(k, idx, v):
        probe = [a.copy() for a in arrays]
        probe[k][idx] = v
        return build_loss([Tensor(a) for a in probe]).item()

    worst = 0.0
    for k, a in enumerate(arrays):
        for idx in np.ndindex(a.shape):
            x = a[idx]
            num = (value_at(k, idx, x + h) - value_at(k, idx, x - h)) / (2 * h)
            ana = analytic[k][idx]
            err = abs(ana - num) / max(1.0, abs(ana), abs(num))
            worst = max(worst, err)
            assert err <= tol, (
                f"gradient mismatch on input {k} at {idx}: "
                f"analytic {ana!r} vs numeric {num!r} (err {err:.3e})")
    return worst


def away_from(arr: np.ndarray, point: float, margin: float) -> np.ndarray:
    """Push values out of the dead zone around a kink so finite
    differences stay on one side of it."""
    out = arr.copy()
    near = np.abs(out - point) < margin
    out[near] = point + margin * np.where(out[near] >= point, 1.0, -1.0)
    return out
