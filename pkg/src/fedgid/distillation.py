"""Feature-level KL distillation toward the frozen global encoder.

Features are not distributions, so each row is turned into one with a
temperature softmax over the feature dimensions before taking
KL(student || teacher).  Teacher features are constants: no gradient is ever
returned for them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import log_softmax

LAMBDA_SWEEP = (0.1, 1.0, 5.0, 10.0)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 1.0
    lambda_gd: float = 1.0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.lambda_gd < 0:
            raise ValueError(f"lambda_gd must be non-negative, got {self.lambda_gd}")


def _check(student, teacher, temperature):
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if np.shape(student) != np.shape(teacher):
        raise ValueError(f"student {np.shape(student)} and teacher {np.shape(teacher)} differ")


def feature_kl_and_grad(f_student, f_teacher, temperature: float = 1.0):
    """Batch-mean KL(softmax(s/T) || softmax(t/T)) and its gradient w.r.t. ``s``."""
    _check(f_student, f_teacher, temperature)
    s = np.asarray(f_student, dtype=np.float64)
    t = np.asarray(f_teacher, dtype=np.float64)
    log_p = log_softmax(s / temperature)
    log_q = log_softmax(t / temperature)
    p = np.exp(log_p)
    diff = log_p - log_q
    row_kl = np.sum(p * diff, axis=1, keepdims=True)
    n = s.shape[0]
    grad = p * (diff - row_kl) / (temperature * n)
    return max(float(row_kl.mean()), 0.0), grad


def feature_kl(f_student, f_teacher, temperature: float = 1.0) -> float:
    return feature_kl_and_grad(f_student, f_teacher, temperature)[0]


def gd_loss_and_grads(f_i, f_inv, f_g, temperature: float = 1.0):
    """Returns ``(L_GD, d/df_i, d/df_inv)``; ``f_inv=None`` drops its term."""
    l_i, g_i = feature_kl_and_grad(f_i, f_g, temperature)
    if f_inv is None:
        return l_i, g_i, None
    l_inv, g_inv = feature_kl_and_grad(f_inv, f_g, temperature)
    return l_i + l_inv, g_i, g_inv


def gd_loss(f_i, f_inv, f_g, temperature: float = 1.0) -> float:
    """KL(f_i || f_g) + KL(f_inv || f_g)."""
    if np.shape(f_inv) != np.shape(f_i):
        raise ValueError("f_i and f_inv must have the same shape")
    return gd_loss_and_grads(f_i, f_inv, f_g, temperature)[0]
