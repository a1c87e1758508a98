"""Evaluation metrics and the linear readout probe.

Everything here is plain numpy on final predictions; nothing touches
the autodiff engine. Conventions for degenerate cases (empty masks,
constant targets) are documented on each function rather than silently
returning NaN.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .rng import Xoshiro256, derive_seed


def _as_labels(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise DataError(f"{name} must be 1-d, got shape {arr.shape}")
    return arr.astype(np.int64)


def confusion(y_true, y_pred, n_classes: int) -> np.ndarray:
    t = _as_labels(y_true, "y_true")
    p = _as_labels(y_pred, "y_pred")
    if t.shape != p.shape:
        raise DataError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("cannot score empty label arrays")
    for arr, name in ((t, "y_true"), (p, "y_pred")):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise DataError(f"{name} contains labels outside [0,{n_classes})")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out


def quadratic_weighted_kappa(y_true, y_pred, n_classes: int) -> float:
    """Agreement on an ordinal scale, penalizing errors by squared distance.

    kappa = 1 - sum(w*O) / sum(w*E) with w[i,j] = (i-j)^2 / (n-1)^2,
    O the observed confusion counts and E the marginal-product
    expectation. 1 is perfect, 0 chance-level, negative worse than
    chance. When both marginals sit on a single shared class the
    expectation term vanishes and the agreement is trivially perfect,
    so 1.0 is returned.
    """
    if n_classes < 2:
        raise DataError(f"kappa needs at least 2 classes, got {n_classes}")
    obs = confusion(y_true, y_pred, n_classes).astype(np.float64)
    n = obs.sum()
    idx = np.arange(n_classes, dtype=np.float64)
    w = (idx[:, None] - idx[None, :]) ** 2 / (n_classes - 1) ** 2
    expected = np.outer(obs.sum(axis=1), obs.sum(axis=0)) / n
    denom = float((w * expected).sum())
    num = float((w * obs).sum())
    if denom == 0.0:
        return 1.0
    return 1.0 - num / denom


def classification_scores(y_true, y_pred, n_classes: int) -> dict:
    """Accuracy, per-class F1, macro/micro F1, and kappa.

    Micro-F1 is computed from pooled true/false positive counts; for
    single-label problems it coincides with accuracy, which doubles as
    a cross-check between the two code paths.
    """
    cm = confusion(y_true, y_pred, n_classes).astype(np.float64)
    n = cm.sum()
    tp = np.diag(cm)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    accuracy = float(tp.sum() / n)

    f1s = []
    for c in range(n_classes):
        p = tp[c] / pred_tot[c] if pred_tot[c] > 0 else 0.0
        r = tp[c] / true_tot[c] if true_tot[c] > 0 else 0.0
        f1s.append(float(2 * p * r / (p + r)) if p + r > 0 else 0.0)
    macro_f1 = float(np.mean(f1s))

    fp_total = float(pred_tot.sum() - tp.sum())
    fn_total = float(true_tot.sum() - tp.sum())
    tp_total = float(tp.sum())
    micro_p = tp_total / (tp_total + fp_total) if tp_total + fp_total > 0 else 0.0
    micro_r = tp_total / (tp_total + fn_total) if tp_total + fn_total > 0 else 0.0
    micro_f1 = (2 * micro_p * micro_r / (micro_p + micro_r)
                if micro_p + micro_r > 0 else 0.0)
    return {"accuracy": accuracy, "f1_per_class": f1s, "macro_f1": macro_f1,
            "micro_f1": micro_f1,
            "qwk": quadratic_weighted_kappa(y_true, y_pred, n_classes)}


def regression_scores(y_true, y_pred) -> dict:
    """MAE, MSE and R^2.

    With a constant target, R^2 is 1.0 for exact predictions and 0.0
    otherwise (the usual sklearn-style convention).
    """
    t = np.asarray(y_true, dtype=np.float64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if t.shape != p.shape or t.size == 0:
        raise DataError(f"bad regression arrays: {t.shape} vs {p.shape}")
    err = p - t
    mae = float(np.abs(err).mean())
    mse = float((err * err).mean())
    ss_res = float((err * err).sum())
    ss_tot = float(((t - t.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return {"mae": mae, "mse": mse, "r2": r2}


def segmentation_scores(true_masks, pred_masks) -> dict:
    """Pixel accuracy, foreground Dice, and mean IoU over both classes.

    Dice of two empty masks is 1.0. Classes absent from both prediction
    and truth are left out of the IoU mean; if that empties the mean the
    score is 1.0.
    """
    t = np.asarray(true_masks).astype(np.int64)
    p = np.asarray(pred_masks).astype(np.int64)
    if t.shape != p.shape or t.size == 0:
        raise DataError(f"bad mask arrays: {t.shape} vs {p.shape}")
    if t.max() > 1 or t.min() < 0 or p.max() > 1 or p.min() < 0:
        raise DataError("masks must be binary 0/1")
    pa = float((t == p).mean())

    inter = float(((t == 1) & (p == 1)).sum())
    size_t = float((t == 1).sum())
    size_p = float((p == 1).sum())
    if size_t + size_p == 0.0:
        dice = 1.0
    else:
        dice = 2.0 * inter / (size_t + size_p)

    ious = []
    for c in (0, 1):
        ci = float(((t == c) & (p == c)).sum())
        cu = float(((t == c) | (p == c)).sum())
        if cu > 0:
            ious.append(ci / cu)
    miou = float(np.mean(ious)) if ious else 1.0
    return {"pixel_accuracy": pa, "dice": dice, "miou": miou}


_PROBE_SPLIT_TAG = 0x50524F42


def linear_probe(features, labels, split_seed: int,
                 steps: int = 500, lr: float = 0.1, l2: float = 1e-4) -> float:
    """Held-out accuracy of a multinomial logistic readout on frozen features.

    The samples are split 80/20 by a seeded permutation, a linear
    softmax classifier is fit on the 80% by full-batch gradient descent
    from a zero init (fixed step count, L2 decay on the weights only),
    and accuracy on the remaining 20% is returned. The hyperparameters
    are deliberately not tunable per call, so probe numbers compare
    feature quality rather than tuning effort.

    The data term is normalized by the mean squared feature norm, which
    makes the logit trajectory (and so the returned accuracy) exactly
    invariant under duplicating feature columns and independent of any
    global feature scale; for unit-normalized rows the normalizer is 1
    and the update is the textbook one.
    """
    X = np.asarray(features, dtype=np.float64)
    y = _as_labels(labels, "labels")
    if X.ndim != 2:
        raise DataError(f"features must be [N,d], got shape {X.shape}")
    if len(X) != len(y):
        raise DataError(f"features/labels length mismatch: {len(X)} vs {len(y)}")
    n = len(X)
    if n < 20:
        raise DataError(f"probe needs at least 20 samples, got {n}")
    perm = Xoshiro256(derive_seed(split_seed, _PROBE_SPLIT_TAG)).permutation(n)
    n_train = (4 * n) // 5
    tr, ev = perm[:n_train], perm[n_train:]
    train_classes = set(np.unique(y[tr]).tolist())
    if len(train_classes) < 2:
        raise DataError("probe training split holds fewer than 2 classes")
    missing = sorted(set(np.unique(y).tolist()) - train_classes)
    if missing:
        raise DataError(f"class {missing[0]} missing from probe training split")

    Xt, yt = X[tr], y[tr]
    n_classes = int(y.max()) + 1
    d = X.shape[1]
    scale = max(float((Xt * Xt).sum(axis=1).mean()), 1e-12)
    W = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    onehot = np.zeros((len(Xt), n_classes))
    onehot[np.arange(len(Xt)), yt] = 1.0
    for _ in range(steps):
        logits = Xt @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        ez = np.exp(logits)
        probs = ez / ez.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / len(Xt)
        W -= lr * (Xt.T @ delta / scale + l2 * W)
        b -= lr * delta.sum(axis=0)
    pred = (X[ev] @ W + b).argmax(axis=1)
    return float((pred == y[ev]).mean())
