"""Task losses and the encoder-similarity regulariser."""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .tensor import AutodiffError, ShapeMismatch, Tensor, concat, log_softmax, mul, pick, reshape, square, sub, sum_


class AllMasked(AutodiffError):
    pass


class ClassIndexOutOfRange(AutodiffError):
    pass


class EmptyClass(AutodiffError):
    pass


class NameSetMismatch(AutodiffError):
    pass


def class_weights(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``.

    The weights average to 1 under the empirical class distribution.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise EmptyClass("need at least one class count")
    if np.any(counts <= 0):
        raise EmptyClass(f"class counts must be positive, got {counts.tolist()}")
    return counts.sum() / (counts.size * counts)


def weighted_cross_entropy(logits: Tensor, targets, weights=None, mask=None) -> Tensor:
    """Weighted-mean cross entropy over the unmasked rows of a batch.

    ``-sum_i m_i w[y_i] log softmax(z_i)[y_i] / sum_i m_i w[y_i]``
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeMismatch(f"targets shape {targets.shape} does not match batch {n}")
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise AllMasked("every example in the batch is masked out")
    live = targets[mask]
    if live.size and (live.min() < 0 or live.max() >= k):
        raise ClassIndexOutOfRange(f"targets must lie in [0, {k})")
    weights = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if weights.shape != (k,):
        raise ShapeMismatch(f"expected {k} class weights, got {weights.shape}")

    safe_targets = np.where(mask, targets, 0)
    row_w = np.where(mask, weights[safe_targets], 0.0)
    row_w = row_w / row_w.sum()
    logp = pick(log_softmax(logits, axis=-1), safe_targets)
    return mul(sum_(mul(logp, row_w.astype(logits.dtype))), -1.0)


def l2_pairwise_reg(encoders: Sequence[Mapping[str, Tensor]], reg_layers: Iterable[str] | None,
                    lam: float) -> Tensor:
    """``lam * sum_{t<s} sum_l ||theta_t^l - theta_s^l||^2`` over named layers.

    ``encoders`` maps layer names (relative to each encoder) to parameters.
    ``reg_layers=None`` regularises every layer.
    """
    if len(encoders) < 2:
        first = next(iter(encoders[0].values())) if encoders else None
        dtype = first.dtype if first is not None else np.float64
        return Tensor(np.zeros((), dtype=dtype))
    names = set(encoders[0])
    for enc in encoders[1:]:
        if set(enc) != names:
            raise NameSetMismatch("encoders expose different parameter names")
    layers = sorted(names if reg_layers is None else set(reg_layers))
    missing = [name for name in layers if name not in names]
    if missing:
        raise NameSetMismatch(f"unknown regularised layers: {missing}")

    for name in layers:
        shapes = {enc[name].shape for enc in encoders}
        if len(shapes) > 1:
            raise ShapeMismatch(f"layer {name}: shapes {sorted(shapes)} differ across encoders")
    if not layers:
        return Tensor(np.zeros(()))
    # one flat vector per encoder keeps the graph small
    flat = [concat([reshape(enc[name], (-1,)) for name in layers]) for enc in encoders]
    total = None
    for t in range(len(flat)):
        for s in range(t + 1, len(flat)):
            term = sum_(square(sub(flat[t], flat[s])))
            total = term if total is None else total + term
    return mul(total, lam)
