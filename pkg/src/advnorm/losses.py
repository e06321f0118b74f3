"""Segmentation and adversarial objectives.

* weighted soft Dice loss for the segmenter,
* log loss of the discriminator on raw images (true domain) and on generated
  images (the extra "generated" class),
* the two sides of the min-max game: ``objective_gs`` minimized by the
  generator and segmenter, ``objective_d`` minimized by the discriminator.

Domains are 1-based (``1..K``); in probability vectors the generated class is
the last entry, index ``K`` in 0-based terms.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch.nn import functional as F

from .exceptions import DivergenceError, ValidationError

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    adv_weight: float = 1.0
    epsilon: float = 1e-8
    class_weights: object = "inverse_frequency"
    include_background: bool = True

    def __post_init__(self):
        if not self.adv_weight >= 0:
            raise ValidationError(f"adversarial weight must be >= 0, got {self.adv_weight}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if not isinstance(self.class_weights, str):
            w = np.asarray(self.class_weights, dtype=np.float64)
            if w.ndim != 1 or (w < 0).any() or not (w > 0).any():
                raise ValidationError("class weights must be non-negative with at least one > 0")
            self.class_weights = [float(v) for v in w]
        elif self.class_weights not in ("inverse_frequency", "uniform"):
            raise ValidationError(f"unknown class weighting {self.class_weights!r}")

    def resolve_weights(self, masks, n_classes):
        if isinstance(self.class_weights, str):
            if self.class_weights == "uniform":
                w = np.ones(n_classes)
                if not self.include_background:
                    w[0] = 0.0
                return w / w.sum()
            return inverse_frequency_weights(masks, n_classes, self.include_background)
        w = np.asarray(self.class_weights, dtype=np.float64)
        if len(w) != n_classes:
            raise ValidationError(f"expected {n_classes} class weights, got {len(w)}")
        if not self.include_background:
            w = w.copy()
            w[0] = 0.0
        return w


def inverse_frequency_weights(masks, n_classes, include_background=True):
    """``w_c ~ 1 / freq_c`` over all voxels of ``masks``, normalized to sum 1.

    Absent classes (and the background when excluded) get weight 0.
    """
    counts = np.bincount(np.asarray(masks).ravel(), minlength=n_classes)[:n_classes].astype(np.float64)
    w = np.zeros(n_classes)
    present = counts > 0
    if not include_background:
        present[0] = False
    if not present.any():
        raise ValidationError("no labelled voxels to derive class weights from")
    w[present] = counts.sum() / counts[present]
    return w / w.sum()


def _as_float(t):
    if isinstance(t, torch.Tensor):
        return t
    return torch.as_tensor(np.asarray(t, dtype=np.float64))


def _one_hot_like(y, s):
    y = torch.as_tensor(y) if not isinstance(y, torch.Tensor) else y
    if y.shape == s.shape:
        return y.to(s.dtype)
    if y.shape != s.shape[:1] + s.shape[2:]:
        raise ValidationError(f"labels of shape {tuple(y.shape)} do not match predictions {tuple(s.shape)}")
    return torch.movedim(F.one_hot(y.long(), s.shape[1]), -1, 1).to(s.dtype)


def dice_loss(s, y, weights=None, epsilon=1e-8):
    """Weighted soft Dice loss, one value per sample.

    Parameters
    ----------
    s : (N, C, ...) class probabilities.
    y : (N, C, ...) one-hot targets or (N, ...) integer labels.
    weights : (C,) non-negative class weights; uniform when omitted.

    Returns ``1 - (eps + 2 sum_c w_c sum_v s*y) / (eps + sum_c w_c sum_v (s + y))``
    as a tensor of shape (N,).
    """
    s = _as_float(s)
    y = _one_hot_like(y, s)
    if s.ndim < 2:
        raise ValidationError("predictions need shape (N, C, ...)")
    n_classes = s.shape[1]
    w = torch.ones(n_classes, dtype=s.dtype) if weights is None else torch.as_tensor(weights, dtype=s.dtype)
    if w.shape != (n_classes,):
        raise ValidationError(f"expected {n_classes} class weights, got shape {tuple(w.shape)}")
    dims = tuple(range(2, s.ndim))
    inter = (s * y).sum(dim=dims) if dims else s * y
    total = (s + y).sum(dim=dims) if dims else s + y
    num = epsilon + 2.0 * (inter * w).sum(dim=1)
    den = epsilon + (total * w).sum(dim=1)
    return 1.0 - num / den


def _check_probs(p):
    p = _as_float(p)
    if p.ndim == 1:
        p = p.unsqueeze(0)
    if p.ndim != 2 or p.shape[1] < 2:
        raise ValidationError(f"domain probabilities need shape (N, K+1), got {tuple(p.shape)}")
    return p


def dis_loss_real(p, z):
    """``-log p[z]`` for raw images of (1-based) domain ``z``; shape (N,)."""
    p = _check_probs(p)
    z = torch.as_tensor(z).long().reshape(-1)
    k = p.shape[1] - 1
    if z.numel() != p.shape[0]:
        raise ValidationError("one domain label per probability row is required")
    if (z < 1).any() or (z > k).any():
        raise ValidationError(f"domain labels must lie in [1, {k}]")
    picked = p.gather(1, (z - 1).unsqueeze(1)).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR))


def dis_loss_fake(p):
    """``-log p[K+1]``: log loss of generated images against the generated class."""
    p = _check_probs(p)
    return -torch.log(p[:, -1].clamp_min(PROB_FLOOR))


def dis_loss_fake_complement(p):
    """Same quantity written as ``-log(1 - P(Z <= K))``."""
    p = _check_probs(p)
    return -torch.log((1.0 - p[:, :-1].sum(dim=1)).clamp_min(PROB_FLOOR))


def dis_loss_real_logits(logits, z):
    """``dis_loss_real`` evaluated from logits with log-softmax.

    Used on the training path: it cannot reach ``-inf`` so no probability floor
    is applied, and gradients survive when the discriminator saturates.
    """
    z = torch.as_tensor(z).long().reshape(-1)
    k = logits.shape[1] - 1
    if (z < 1).any() or (z > k).any():
        raise ValidationError(f"domain labels must lie in [1, {k}]")
    return -torch.log_softmax(logits, dim=1).gather(1, (z - 1).unsqueeze(1)).squeeze(1)


def dis_loss_fake_logits(logits):
    return -torch.log_softmax(logits, dim=1)[:, -1]


def _domain_logits(discriminator, x):
    return discriminator.logits(x) if hasattr(discriminator, "logits") else torch.log(
        discriminator(x).clamp_min(PROB_FLOOR))


def combine_gs(dice_losses, fake_losses, adv_weight):
    """``sum(dice) - adv_weight * sum(fake)``."""
    return _as_float(dice_losses).sum() - adv_weight * _as_float(fake_losses).sum()


def combine_d(real_losses, fake_losses):
    return _as_float(real_losses).sum() + _as_float(fake_losses).sum()


class Batch(NamedTuple):
    x: torch.Tensor   # (N, 1, P, P, P) intensities
    y: torch.Tensor   # (N, P, P, P) integer labels
    z: torch.Tensor   # (N,) 1-based domains


def _finite(value, what):
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite {what}")
    return value


def objective_gs(batch, generator, segmenter, discriminator, weights, adv_weight=1.0, epsilon=1e-8):
    """Generator/segmenter side of the min-max game.

    ``generator`` may be ``None`` (segmenter trained on raw inputs) and the
    adversarial term is skipped when ``discriminator`` is ``None`` or
    ``adv_weight == 0``. The discriminator is only evaluated here; callers
    are responsible for freezing its parameters.
    """
    x = batch.x
    normalized = generator(x) if generator is not None else x
    _finite(normalized, "generator output")
    dice = dice_loss(segmenter(normalized), batch.y, weights, epsilon)
    if discriminator is None or adv_weight == 0:
        return _finite(dice.sum(), "segmentation objective")
    fake = dis_loss_fake_logits(_domain_logits(discriminator, normalized))
    return _finite(combine_gs(dice, fake, adv_weight), "generator/segmenter objective")


def objective_d(batch, generator, discriminator):
    """Discriminator side: classify raw patches by domain and generated patches as generated.

    Gradients never reach the generator (its output is detached).
    """
    real = dis_loss_real_logits(_domain_logits(discriminator, batch.x), batch.z)
    with torch.no_grad():
        normalized = generator(batch.x)
    fake = dis_loss_fake_logits(_domain_logits(discriminator, normalized))
    return _finite(combine_d(real, fake), "discriminator objective")


def mse(a, b):
    return torch.mean((a - b) ** 2)


__all__ = [
    "LossConfig", "Batch", "PROB_FLOOR", "inverse_frequency_weights", "dice_loss",
    "dis_loss_real", "dis_loss_fake", "dis_loss_fake_complement",
    "dis_loss_real_logits", "dis_loss_fake_logits", "combine_gs", "combine_d",
    "objective_gs", "objective_d", "mse",
]
