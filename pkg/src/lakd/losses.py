"""Training objectives: hard/soft logit losses, per-layer feature loss,
attention transfer, and the two total-loss compositions.

The attention loss is an AT-style surrogate: per-sample spatial maps
``a = sum_c tap_c**2``, L2-normalized, compared by squared distance.  It is
independent of channel count and of positive rescaling of either input.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 1e-3
    temperature: float = 4.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def _labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(np.flatnonzero((labels < 0) | (labels >= k))[0])
        raise ContractError(f"label {int(labels[bad])} at position {bad} outside [0, {k})")
    return labels.astype(np.int64)


def one_hot(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def hard_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy against integer labels."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N,K], got {logits.shape}")
    n, k = logits.shape
    y = _labels(labels, n, k)
    picked = ag.sum(ag.log_softmax(logits, axis=1) * Tensor(one_hot(y, k)), axis=1)
    return ag.scale(ag.sum(picked), -1.0 / n)


def soft_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 4.0) -> Tensor:
    """T^2 * mean_n KL(softmax(teacher/T) || softmax(student/T))."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(f"soft_loss shape mismatch: {student_logits.shape} vs {teacher_logits.shape}")
    n = student_logits.shape[0]
    t = float(temperature)
    log_p_t = ag.log_softmax(ag.scale(teacher_logits, 1.0 / t), axis=1)
    log_p_s = ag.log_softmax(ag.scale(student_logits, 1.0 / t), axis=1)
    kl = ag.sum(ag.exp(log_p_t) * (log_p_t - log_p_s))
    return ag.scale(kl, t * t / n)


def feature_loss(teacher_tap: Tensor, student_tap: Tensor) -> Tensor:
    """(1/N) * sum over samples of the squared L2 distance between the two
    maps, the norm taken over all channel and spatial elements of a sample."""
    if teacher_tap.shape != student_tap.shape:
        raise DimensionError(f"feature_loss shape mismatch: teacher {teacher_tap.shape} vs student {student_tap.shape}")
    n = teacher_tap.shape[0]
    return ag.scale(ag.sum(ag.square(student_tap - teacher_tap)), 1.0 / n)


def attention_map(tap: Tensor) -> Tensor:
    """[N,C,H,W] -> [N, H*W] unit-norm spatial attention."""
    n, _, h, w = tap.shape
    a = ag.reshape(ag.sum(ag.square(tap), axis=1), (n, h * w))
    norm = ag.sqrt(ag.sum(ag.square(a), axis=1, keepdims=True))
    if np.any(norm.data == 0):
        bad = int(np.flatnonzero(norm.data.reshape(-1) == 0)[0])
        raise ContractError(f"degenerate attention: all-zero feature map for sample {bad}")
    return a / norm


def attention_loss(teacher_tap: Tensor, student_tap: Tensor) -> Tensor:
    if teacher_tap.ndim != 4 or student_tap.ndim != 4:
        raise DimensionError("attention_loss expects [N,C,H,W] maps")
    t, s = teacher_tap.shape, student_tap.shape
    if (t[0], t[2], t[3]) != (s[0], s[2], s[3]):
        raise DimensionError(f"attention_loss needs matching N,H,W: teacher {t} vs student {s}")
    diff = attention_map(teacher_tap) - attention_map(student_tap)
    return ag.scale(ag.sum(ag.square(diff)), 1.0 / t[0])


def total_loss_traditional(weights: LossWeights, hard, soft, feature_losses: Sequence):
    """alpha*hard + (1-alpha)*soft + beta*sum(feature_losses)."""
    total = weights.alpha * hard + (1.0 - weights.alpha) * soft
    if feature_losses:
        feat = feature_losses[0]
        for f in feature_losses[1:]:
            feat = feat + f
        total = total + weights.beta * feat
    return total


def total_loss_lakd(weights: LossWeights, hard, attention, feature_loss_l):
    """alpha*hard + (1-alpha)*attention + beta*feature, for one block's feature term."""
    return weights.alpha * hard + (1.0 - weights.alpha) * attention + weights.beta * feature_loss_l
