"""Training objective: dice loss with false-positive suppression for
attention alignment, per-class binary cross-entropy for classification, and
their unweighted sum. Every loss returns its exact analytic gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class DiceFpConfig:
    alpha: float = 1.0       # dice smoothing
    epsilon: float = 1e-6    # guards the empty-prediction limit
    w_fp: float = 2.0        # false-positive weight, >= 1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError("epsilon must be > 0")
        if self.alpha < 0:
            raise DomainError("alpha must be >= 0")
        if self.w_fp < 1:
            raise DomainError("w_fp must be >= 1")


def _validate_pair(mask: np.ndarray, pred: np.ndarray):
    mask = np.asarray(mask, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if mask.shape != pred.shape:
        raise DimensionError(f"dice: mask {mask.shape} vs pred {pred.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise DomainError("dice: mask must be binary")
    if np.any(pred < 0) or np.any(pred > 1):
        raise DomainError("dice: pred entries must lie in [0, 1]")
    if not mask.any():
        raise DomainError("dice: all-zero mask; negative samples must be skipped")
    return mask, pred


def dice_fp_loss(mask: np.ndarray, pred: np.ndarray,
                 cfg: DiceFpConfig = DiceFpConfig()):
    """Dice loss with false positives up-weighted by w_fp.

    loss = 1 - (2*sum(Y*P) + a + e)
               / (sum(Y+P) + (w_fp-1)*sum(P*(1-Y)) + a + e)

    Sums run over all pixels of the map; callers restrict to positive-labeled
    samples. Returns (loss, dloss/dP) with dloss/dP the same shape as pred.
    """
    mask, pred = _validate_pair(mask, pred)
    num = 2.0 * np.sum(mask * pred) + cfg.alpha + cfg.epsilon
    fp = pred * (1.0 - mask)
    den = np.sum(mask + pred) + (cfg.w_fp - 1.0) * np.sum(fp) + cfg.alpha + cfg.epsilon
    loss = 1.0 - num / den
    # d(num)/dP = 2Y ; d(den)/dP = 1 + (w_fp-1)(1-Y)
    dden = 1.0 + (cfg.w_fp - 1.0) * (1.0 - mask)
    grad = (num * dden - 2.0 * mask * den) / (den * den)
    return float(loss), grad


def dice_fp_batch(masks: np.ndarray, preds: np.ndarray,
                  cfg: DiceFpConfig = DiceFpConfig()):
    """Vectorized dice over M (mask, pred) pairs of flattened maps (M, N).

    Same math as dice_fp_loss; used on the training hot path.
    """
    masks = np.asarray(masks, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if masks.shape != preds.shape or masks.ndim != 2:
        raise DimensionError(f"dice batch: masks {masks.shape} vs preds {preds.shape}")
    num = 2.0 * np.sum(masks * preds, axis=1) + cfg.alpha + cfg.epsilon
    den = (np.sum(masks + preds, axis=1)
           + (cfg.w_fp - 1.0) * np.sum(preds * (1.0 - masks), axis=1)
           + cfg.alpha + cfg.epsilon)
    losses = 1.0 - num / den
    dden = 1.0 + (cfg.w_fp - 1.0) * (1.0 - masks)
    grads = (num[:, None] * dden - 2.0 * masks * den[:, None]) / (den * den)[:, None]
    return losses, grads


def cross_entropy(labels: np.ndarray, logits: np.ndarray):
    """Multi-label binary cross-entropy summed over classes, in the stable
    logit form. Returns (loss, grad) with grad_c = sigmoid(z_c) - y_c."""
    labels = np.asarray(labels, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if labels.shape != logits.shape:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    # max(z,0) - y*z + log(1 + exp(-|z|)) avoids log of a saturated sigmoid
    loss = np.sum(np.maximum(logits, 0.0) - labels * logits
                  + np.log1p(np.exp(-np.abs(logits))))
    p = np.where(logits >= 0, 1.0 / (1.0 + np.exp(-np.abs(logits))),
                 np.exp(-np.abs(logits)) / (1.0 + np.exp(-np.abs(logits))))
    return float(loss), p - labels


def total_loss(ce: float, al: float) -> float:
    """L_total = classification loss + alignment loss (unweighted)."""
    total = ce + al
    if not np.isfinite(total):
        raise DomainError(f"total_loss: non-finite inputs ({ce}, {al})")
    return float(total)
