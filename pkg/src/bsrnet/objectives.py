"""Segmentation, consistency and total losses with gradients w.r.t. probabilities.

Probability maps are ``C x H x W`` or batched ``N x C x H x W``.  Targets are
either hard integer label maps (``H x W`` / ``N x H x W``) or soft maps with
the same shape as the probabilities.  Every loss has an ``*_and_grad`` form
returning ``(value, d value / d probs)``; the plain form returns the value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balclust import SubclassMap, map_to_parent
from .segnet import PredictionMaps

PROB_CLAMP = 1e-7
DICE_SMOOTH = 1e-5


@dataclass
class LossWeights:
    alpha: float = 0.1
    beta1: float = 0.1
    beta2_final: float = 0.5
    warmup_fraction: float = 0.25
    total_iters: int = 2000

    def __post_init__(self):
        for name in ("alpha", "beta1", "beta2_final", "warmup_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.warmup_fraction > 1:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")

    def beta2_at(self, iteration: int) -> float:
        return 0.0 if iteration < self.warmup_fraction * self.total_iters else self.beta2_final


@dataclass
class LossBreakdown:
    sup: float
    con_model: float
    con_task: float
    total: float
    active_beta2: float
    beta1: float = 0.0
    alpha: float = 0.0


def _channel_axis(probs: np.ndarray) -> int:
    if probs.ndim not in (3, 4):
        raise ValueError(f"probabilities must be C x H x W or N x C x H x W, got {probs.shape}")
    return probs.ndim - 3


def as_target(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Return a soft target with the same shape as ``probs``.

    Hard label maps are one-hot encoded; out-of-range labels are rejected.
    """
    target = np.asarray(target)
    if target.shape == probs.shape and np.issubdtype(target.dtype, np.floating):
        return target
    axis = _channel_axis(probs)
    n_ch = probs.shape[axis]
    expected = probs.shape[:axis] + probs.shape[axis + 1:]
    if target.shape != expected:
        raise ValueError(f"label map shape {target.shape} does not match probabilities {probs.shape}")
    if target.size and (target.min() < 0 or target.max() >= n_ch):
        raise ValueError(f"labels must lie in 0..{n_ch - 1}, found range {target.min()}..{target.max()}")
    onehot = np.arange(n_ch).reshape((n_ch,) + (1,) * (probs.ndim - axis - 1)) == np.expand_dims(target, axis)
    return onehot.astype(np.float64)


def ce_loss_and_grad(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    axis = _channel_axis(probs)
    t = as_target(probs, target)
    npix = probs.size // probs.shape[axis]
    p = np.maximum(probs, PROB_CLAMP)
    value = float(-(t * np.log(p)).sum() / npix)
    grad = np.where(probs > PROB_CLAMP, -t / p, 0.0) / npix
    return value, grad


def dice_loss_and_grad(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    """1 - mean over all channels (background included) of the smoothed soft Dice."""
    axis = _channel_axis(probs)
    g = as_target(probs, target)
    red = tuple(i for i in range(probs.ndim) if i != axis)
    inter = (probs * g).sum(axis=red, keepdims=True)
    denom = probs.sum(axis=red, keepdims=True) + g.sum(axis=red, keepdims=True) + DICE_SMOOTH
    dice = (2 * inter + DICE_SMOOTH) / denom
    n_ch = probs.shape[axis]
    value = float(1.0 - dice.mean())
    grad = -(2 * g * denom - (2 * inter + DICE_SMOOTH)) / denom ** 2 / n_ch
    return value, grad


def seg_loss_and_grad(probs: np.ndarray, target) -> tuple[float, np.ndarray]:
    ce, dce = ce_loss_and_grad(probs, target)
    dice, ddice = dice_loss_and_grad(probs, target)
    return ce + dice, dce + ddice


def ce_loss(probs, target) -> float:
    return ce_loss_and_grad(probs, target)[0]


def dice_loss(probs, target) -> float:
    return dice_loss_and_grad(probs, target)[0]


def seg_loss(probs, target) -> float:
    return ce_loss(probs, target) + dice_loss(probs, target)


def sup_loss_and_grad(student: PredictionMaps, y_l, y_lsub, weights: LossWeights):
    """Labeled-batch loss: MoS segmentation loss plus alpha times the SCS one.

    Returns ``(value, dmos, dscs)``.
    """
    if y_lsub is None or student.scs is None:
        raise ValueError("subclass labels and SCS predictions are required; run subclass generation first")
    mos, dmos = seg_loss_and_grad(student.mos, y_l)
    scs, dscs = seg_loss_and_grad(student.scs, y_lsub)
    return mos + weights.alpha * scs, dmos, weights.alpha * dscs


def sup_loss(student: PredictionMaps, y_l, y_lsub, weights: LossWeights) -> float:
    return sup_loss_and_grad(student, y_l, y_lsub, weights)[0]


def _mse_and_grad(s: np.ndarray, t: np.ndarray):
    if s.shape != t.shape:
        raise ValueError(f"student/teacher shape mismatch {s.shape} vs {t.shape}")
    d = s - t
    return float((d * d).mean()), 2.0 * d / d.size


def model_consistency_and_grad(student: PredictionMaps, teacher: PredictionMaps):
    """Sum over heads of the mean squared student/teacher probability gap.

    Heads missing on either side are skipped.  Teacher maps are constants.
    Returns ``(value, dmos, dscs)`` with ``None`` for skipped heads.
    """
    value = 0.0
    grads = {"mos": None, "scs": None}
    for head in ("mos", "scs"):
        s, t = getattr(student, head), getattr(teacher, head)
        if s is None or t is None:
            continue
        v, grads[head] = _mse_and_grad(s, t)
        value += v
    return value, grads["mos"], grads["scs"]


def model_consistency(student: PredictionMaps, teacher: PredictionMaps) -> float:
    return model_consistency_and_grad(student, teacher)[0]


def task_consistency_and_grad(teacher_scs: np.ndarray, student_mos: np.ndarray,
                              smap: SubclassMap, mode: str = "soft-sum"):
    """CE + Dice of the student MoS map against parent-mapped teacher subclasses."""
    target = map_to_parent(teacher_scs, smap, mode)
    axis = _channel_axis(student_mos)
    if target.shape != student_mos.shape:
        raise ValueError(f"mapped teacher shape {target.shape} != student MoS shape {student_mos.shape}")
    if mode == "hard-argmax":
        target = target.argmax(axis=axis)
    return seg_loss_and_grad(student_mos, target)


def task_consistency(teacher_scs, student_mos, smap: SubclassMap, mode: str = "soft-sum") -> float:
    return task_consistency_and_grad(teacher_scs, student_mos, smap, mode)[0]


def total_loss(sup: float, con_model: float, con_task: float, weights: LossWeights,
               iteration: int) -> LossBreakdown:
    beta2 = weights.beta2_at(iteration)
    total = sup + weights.beta1 * con_model + beta2 * con_task
    return LossBreakdown(sup, con_model, con_task, total, beta2, weights.beta1, weights.alpha)
