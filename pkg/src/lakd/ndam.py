"""Non-directional activation mapping: teacher-derived spatial weights.

    fsum = sum_c |T_c|                       (channel_sum)
    W    = a * avgpool3(fsum) + b * maxpool3(fsum)   (pool_combine)

Both pools are 3x3, stride 1, same-size output.  Average pooling divides by
the number of real cells in a border window; max pooling pads with -inf,
which gives the same result as edge replication for a 3x3/stride-1 window.

The map weights a student feature map as ``x * (1 + W_hat)`` where ``W_hat``
is W scaled to unit mean absolute value per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError

POOL_KERNEL = 3


@dataclass(frozen=True)
class NdamSettings:
    alpha_pool: float = 0.25
    beta_pool: float = 0.75
    use_abs: bool = True
    enabled: bool = True
    # "student": weight only the student map before the feature loss;
    # "both": weight teacher and student maps alike.
    apply_to: str = "student"

    def __post_init__(self):
        if self.apply_to not in ("student", "both"):
            raise ConfigError(f"ndam apply_to must be 'student' or 'both', got {self.apply_to!r}")
        if self.alpha_pool < 0 or self.beta_pool < 0:
            raise ConfigError("ndam pooling coefficients must be non-negative")


def channel_sum(t: Tensor, use_abs: bool = True) -> Tensor:
    """[N,C,H,W] -> [N,1,H,W]"""
    if t.ndim != 4:
        raise DimensionError(f"channel_sum expects [N,C,H,W], got {t.shape}")
    src = ag.abs(t) if use_abs else t
    return ag.sum(src, axis=1, keepdims=True)


def pool_combine(fsum: Tensor, alpha_pool: float, beta_pool: float) -> Tensor:
    pad = POOL_KERNEL // 2
    avg = ag.avg_pool2d(fsum, POOL_KERNEL, 1, pad, count_include_pad=False)
    mx = ag.max_pool2d(fsum, POOL_KERNEL, 1, pad)
    return ag.scale(avg, alpha_pool) + ag.scale(mx, beta_pool)


@dataclass
class AttentionWeight:
    map: Tensor
    alpha_pool: float
    beta_pool: float
    use_abs: bool = True

    @property
    def disabled(self) -> bool:
        return self.alpha_pool == 0 and self.beta_pool == 0


def build_weight(teacher_source: Tensor, alpha_pool: float, beta_pool: float,
                 use_abs: bool = True) -> AttentionWeight:
    """Weight map from a teacher feature map (entered detached, so no gradient
    ever reaches the teacher)."""
    src = ag.detach(teacher_source)
    with ag.no_grad():
        w = pool_combine(channel_sum(src, use_abs), alpha_pool, beta_pool)
    return AttentionWeight(w, float(alpha_pool), float(beta_pool), use_abs)


def normalized_map(w: AttentionWeight) -> np.ndarray:
    m = w.map.data
    scale = np.abs(m).mean(axis=(1, 2, 3), keepdims=True)
    return np.divide(m, scale, out=np.zeros_like(m), where=scale > 0)


def apply_weighting(student_tap: Tensor, w: AttentionWeight) -> Tensor:
    if w.disabled:
        return student_tap
    if student_tap.ndim != 4 or student_tap.shape[2:] != w.map.shape[2:] or student_tap.shape[0] != w.map.shape[0]:
        raise DimensionError(f"weight map {w.map.shape} does not match feature map {student_tap.shape}")
    return student_tap * Tensor(1.0 + normalized_map(w))


def to_pgm(map2d: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255), min-max scaled."""
    m = np.asarray(map2d, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"PGM export needs a 2-d map, got shape {m.shape}")
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi == lo else (m - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(np.uint8)
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(path, map2d: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(to_pgm(map2d))


def read_pgm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    return np.frombuffer(raw[len(raw) - w * h:], dtype=np.uint8).reshape(h, w)
