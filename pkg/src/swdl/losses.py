"""Training objectives: soft Dice, cross-entropy, deep supervision, MSE consistency."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError

DICE_EPS = 1e-5
CE_CLAMP = 1e-12
DEFAULT_DS_WEIGHTS = (0.8, 0.6, 0.4, 0.2, 0.1)


def ds_weights_for(strata: int) -> tuple[float, ...]:
    """Default per-stratum weights; shallower configurations use the leading entries."""
    if strata <= len(DEFAULT_DS_WEIGHTS):
        return DEFAULT_DS_WEIGHTS[:strata]
    raise ArgumentError(f"no default deep-supervision weights for {strata} strata")


@dataclass
class LossReport:
    loss_dc: float
    loss_delpu: float
    loss_ds: float
    loss_sup: float
    loss_unsup: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def mean(cls, reports: Sequence["LossReport"]) -> "LossReport":
        n = len(reports)
        return cls(**{k: sum(getattr(r, k) for r in reports) / n for k in asdict(reports[0])})


def _labels_like(labels, shape) -> np.ndarray:
    g = np.asarray(labels)
    if g.ndim == len(shape) and g.shape[1] == 1:
        g = g[:, 0]
    if g.shape != (shape[0],) + tuple(shape[2:]):
        raise ArgumentError(f"labels shape {g.shape} does not match predictions {shape}")
    return g


def dice_loss(probs: Tensor, labels, channel: int = 1, eps: float = DICE_EPS) -> Tensor:
    """Batch-mean of 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) on one channel."""
    g = _labels_like(labels, probs.shape).astype(probs.data.dtype)
    n = probs.shape[0]
    p = probs.data[:, channel]
    axes = tuple(range(1, p.ndim))
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + eps
    per = 1.0 - (2.0 * inter + eps) / denom

    def backward(grad):
        shape = (n,) + (1,) * (p.ndim - 1)
        coef = (2.0 * inter + eps).reshape(shape)
        den = denom.reshape(shape)
        dp = -(2.0 * g * den - coef) / den ** 2
        full = np.zeros_like(probs.data)
        full[:, channel] = dp * (grad / n)
        return (full,)

    return Tensor.from_op(np.asarray(per.mean(), dtype=probs.data.dtype), (probs,), backward, "dice_loss")


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Voxel-mean of -log softmax at the true class; log argument clamped at 1e-12."""
    y = _labels_like(labels, logits.shape).astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logsm, y[:, None], axis=1)[:, 0]
    floor = np.log(CE_CLAMP)
    live = picked > floor
    count = picked.size
    value = -np.maximum(picked, floor).mean()

    def backward(grad):
        sm = np.exp(logsm)
        onehot = np.zeros_like(sm)
        np.put_along_axis(onehot, y[:, None], 1.0, axis=1)
        return ((sm - onehot) * live[:, None] * (grad / count),)

    return Tensor.from_op(np.asarray(value, dtype=logits.data.dtype), (logits,), backward, "ce_loss")


def mse_consistency(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ArgumentError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    size = diff.size

    def backward(grad):
        ga = diff * (2.0 * grad / size)
        return ga, -ga

    return Tensor.from_op(np.asarray((diff ** 2).mean(), dtype=a.data.dtype), (a, b), backward, "mse")


def ds_loss(heads: Sequence[Tensor], labels, weights: Sequence[float]) -> Tensor:
    if len(heads) != len(weights):
        raise ArgumentError(f"{len(heads)} heads but {len(weights)} weights")
    if not heads:
        raise ArgumentError("no deep-supervision heads")
    if any(w <= 0 for w in weights):
        raise ArgumentError("deep-supervision weights must be positive")
    total = dice_loss(heads[0], labels) * weights[0]
    for h, w in zip(heads[1:], weights[1:]):
        total = total + dice_loss(h, labels) * w
    return total


def total_loss(dc_logits: Tensor, delpu_logits: Tensor, ds_probs: Sequence[Tensor], labels,
               n_labeled: int, weights: Sequence[float], assignment: str = "eq7",
               use_ds: bool = True) -> tuple[Tensor, LossReport]:
    """Supervised + consistency objective over a batch whose first ``n_labeled`` rows carry labels.

    ``ds_probs`` may cover the whole batch or just the labeled rows.

    ``assignment='eq7'`` puts Dice on the DC decoder and CE on the DelPU
    decoder; ``'swapped'`` exchanges them.
    """
    n = dc_logits.shape[0]
    if n_labeled < 1:
        raise ArgumentError("total_loss needs at least one labeled sample")
    if assignment not in ("eq7", "swapped"):
        raise ArgumentError(f"unknown loss assignment {assignment!r}")
    dc_probs = ad.softmax_channel(dc_logits)
    delpu_probs = ad.softmax_channel(delpu_logits)

    def rows(t, a, b):
        return t if (a, b) == (0, n) else ad.take(t, a, b)

    if assignment == "eq7":
        l_dc = dice_loss(rows(dc_probs, 0, n_labeled), labels)
        l_delpu = ce_loss(rows(delpu_logits, 0, n_labeled), labels)
    else:
        l_dc = ce_loss(rows(dc_logits, 0, n_labeled), labels)
        l_delpu = dice_loss(rows(delpu_probs, 0, n_labeled), labels)
    sup = l_dc + l_delpu
    l_ds = None
    if use_ds:
        heads = [h if h.shape[0] == n_labeled else rows(h, 0, n_labeled) for h in ds_probs]
        l_ds = ds_loss(heads, labels, weights)
        sup = sup + l_ds
    total = sup
    l_unsup = None
    if n > n_labeled:
        l_unsup = mse_consistency(rows(dc_probs, n_labeled, n), rows(delpu_probs, n_labeled, n))
        total = total + l_unsup
    parts = [l_dc.item(), l_delpu.item(), l_ds.item() if l_ds is not None else 0.0]
    unsup = l_unsup.item() if l_unsup is not None else 0.0
    # components summed in float64 so the report identities hold exactly
    report = LossReport(*parts, loss_sup=sum(parts), loss_unsup=unsup, total=sum(parts) + unsup)
    return total, report
