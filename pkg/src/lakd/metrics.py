"""Evaluation and analysis metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autograd import Tensor
from .errors import ContractError, DimensionError
from .losses import feature_loss


@dataclass
class PredictionLog:
    teacher_pred: np.ndarray
    student_pred: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.teacher_pred = np.asarray(self.teacher_pred, dtype=np.int64)
        self.student_pred = np.asarray(self.student_pred, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape
        if self.teacher_pred.shape != n or self.student_pred.shape != n:
            raise DimensionError("prediction log arrays must have equal lengths")


def ek_metric(log: PredictionLog) -> float:
    """Fraction of teacher-misclassified samples that the student gets right."""
    teacher_wrong = log.teacher_pred != log.labels
    denom = int(teacher_wrong.sum())
    if denom == 0:
        raise ContractError("EK undefined: the teacher is correct on every sample")
    return int((teacher_wrong & (log.student_pred == log.labels)).sum()) / denom


def _as_2d(x) -> np.ndarray:
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def cka_linear(x, y) -> float:
    """Linear CKA between two [samples, features] activation matrices,
    computed from centered Gram matrices."""
    x, y = _as_2d(x), _as_2d(y)
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"CKA inputs need equal sample counts, got {x.shape[0]} and {y.shape[0]}")
    if x.shape[0] < 2:
        raise ContractError("CKA needs at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    if not np.any(xc) or not np.any(yc):
        raise ContractError("degenerate activations: zero variance input to CKA")
    kx, ky = xc @ xc.T, yc @ yc.T
    hsic = np.sum(kx * ky)
    return float(hsic / np.sqrt(np.sum(kx * kx) * np.sum(ky * ky)))


def sample_features(acts, max_features: int = 2048, seed: int = 0) -> np.ndarray:
    """Flatten per sample; keep at most ``max_features`` columns by a seeded
    evenly-strided selection."""
    a = _as_2d(acts)
    f = a.shape[1]
    if f <= max_features:
        return a
    stride = f // max_features
    start = int(np.random.default_rng(seed).integers(0, f - stride * (max_features - 1)))
    return a[:, start + stride * np.arange(max_features)]


def cka_matrix(rows: Sequence, cols: Sequence, max_features: int = 2048, seed: int = 0) -> np.ndarray:
    rs = [sample_features(r, max_features, seed) for r in rows]
    cs = [sample_features(c, max_features, seed) for c in cols]
    return np.array([[cka_linear(r, c) for c in cs] for r in rs])


def topk_accuracy(logits, labels, k: int) -> float:
    """Ties are broken toward the lower class index."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, n_classes = z.shape
    if not 1 <= k <= n_classes:
        raise ContractError(f"k={k} outside [1, {n_classes}]")
    target = z[np.arange(n), labels][:, None]
    cls = np.arange(n_classes)[None, :]
    rank = ((z > target) | ((z == target) & (cls < labels[:, None]))).sum(axis=1)
    return float(np.mean(rank < k))


def predictions(logits) -> np.ndarray:
    """Arg-max with lowest-index tie-breaking."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return z.argmax(axis=1)


def layer_l2_report(teacher_taps: Sequence[Tensor], student_taps_projected: Sequence[Tensor]) -> list[float]:
    if len(teacher_taps) != len(student_taps_projected):
        raise ContractError(f"tap lists differ in length: {len(teacher_taps)} vs {len(student_taps_projected)}")
    return [float(feature_loss(t, s).data) for t, s in zip(teacher_taps, student_taps_projected)]


@dataclass
class MemoryComparison:
    baseline_peak: int
    candidate_peak: int
    baseline_bytes: int = 0
    candidate_bytes: int = 0

    @property
    def reduction(self) -> float:
        """Relative drop in peak retained activations (positive = fewer)."""
        if self.baseline_peak == 0:
            return 0.0
        return (self.baseline_peak - self.candidate_peak) / self.baseline_peak

    @property
    def bytes_reduction(self) -> float:
        if self.baseline_bytes == 0:
            return 0.0
        return (self.baseline_bytes - self.candidate_bytes) / self.baseline_bytes


def memory_report(baseline_peaks: Sequence[int], candidate_peaks: Sequence[int],
                  baseline_bytes: Sequence[int] = (), candidate_bytes: Sequence[int] = ()) -> MemoryComparison:
    """Compare per-step peak retained-activation counts of two regimes."""
    return MemoryComparison(max(baseline_peaks), max(candidate_peaks),
                            max(baseline_bytes, default=0), max(candidate_bytes, default=0))
