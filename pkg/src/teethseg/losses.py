"""Squared Dice loss and its deep-supervision aggregate."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops

LOSS_VARIANTS = ("squared-dice", "eq1-verbatim")


def squared_dice_loss(y_p, y_t, eps: float = 1e-6) -> Tensor:
    """``1 - (2*sum(yt*yp) + eps) / (sum(yt**2) + sum(yp**2) + eps)`` over all pixels and channels."""
    y_p, y_t = as_tensor(y_p), as_tensor(y_t)
    if y_p.shape != y_t.shape:
        raise ValueError(f"squared_dice_loss: prediction {y_p.shape} and target {y_t.shape} differ")
    if not eps > 0:
        raise ValueError(f"squared_dice_loss: eps must be positive, got {eps}")
    inter = ops.sum(ops.mul(y_t, y_p))
    denom = ops.add(ops.add(ops.sum(ops.mul(y_t, y_t)), ops.sum(ops.mul(y_p, y_p))), eps)
    return ops.sub(1.0, ops.div(ops.add(ops.scale(inter, 2.0), eps), denom))


def literal_dice_loss(y_p, y_t, eps: float = 1e-6) -> Tensor:
    """``1 - (2*sum((yt*yp)**2) + eps) / (2*sum(yt**2 + yp**2) + eps)``, kept for fidelity runs.

    Note that this form is not zero on a perfect prediction.
    """
    y_p, y_t = as_tensor(y_p), as_tensor(y_t)
    if y_p.shape != y_t.shape:
        raise ValueError(f"literal_dice_loss: prediction {y_p.shape} and target {y_t.shape} differ")
    if not eps > 0:
        raise ValueError(f"literal_dice_loss: eps must be positive, got {eps}")
    prod = ops.mul(y_t, y_p)
    num = ops.add(ops.scale(ops.sum(ops.mul(prod, prod)), 2.0), eps)
    den = ops.add(ops.scale(ops.add(ops.sum(ops.mul(y_t, y_t)), ops.sum(ops.mul(y_p, y_p))), 2.0), eps)
    return ops.sub(1.0, ops.div(num, den))


def loss_fn(variant: str):
    if variant == "squared-dice":
        return squared_dice_loss
    if variant == "eq1-verbatim":
        return literal_dice_loss
    raise ValueError(f"unknown loss variant {variant!r}; expected one of {LOSS_VARIANTS}")


def downsample_targets(y_t: np.ndarray, levels: int) -> list[np.ndarray]:
    """Per-class occupancy max-pooling of a one-hot map to scales 1/2 .. 1/2**levels."""
    out = []
    cur = np.asarray(y_t, dtype=np.float64)
    for _ in range(levels):
        cur = ops.max_pool2d(cur).data
        out.append(cur)
    return out


def total_loss(outputs, y_t, eps: float = 1e-6, variant: str = "squared-dice") -> Tensor:
    """Main loss plus the mean of the auxiliary losses (when any)."""
    fn = loss_fn(variant)
    y_t = np.asarray(y_t.data if isinstance(y_t, Tensor) else y_t, dtype=np.float64)
    loss = fn(outputs.main, y_t, eps)
    k = len(outputs.aux)
    if k == 0:
        return loss
    targets = downsample_targets(y_t, k)
    aux_losses = []
    for i, (pred, tgt) in enumerate(zip(outputs.aux, targets), start=1):
        if pred.shape != tgt.shape:
            raise ValueError(f"total_loss: aux output {i} has shape {pred.shape}, expected {tgt.shape}")
        aux_losses.append(fn(pred, tgt, eps))
    acc = aux_losses[0]
    for extra in aux_losses[1:]:
        acc = ops.add(acc, extra)
    return ops.add(loss, ops.scale(acc, 1.0 / k))
