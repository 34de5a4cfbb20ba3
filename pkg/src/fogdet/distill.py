"""Teacher-student training with a perceptual feature-matching loss.

The teacher is frozen; the student sees foggy inputs and is pulled toward
the teacher's clear-image backbone features on top of the usual detection
loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import autodiff as ad
from . import detector as det
from .autodiff import Tensor


class PerceptualConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PerceptualConfig:
    """Which backbone stages enter the perceptual loss, and their weights.

    Stage indices are 1-based; defaults favor the deeper, more semantic
    stages.
    """
    layers: tuple = (2, 3)
    weights: tuple = (0.5, 1.0)
    global_weight: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise PerceptualConfigError("layer set must be non-empty")
        if len(self.layers) != len(self.weights):
            raise PerceptualConfigError("one weight per layer required")
        if any(w < 0 for w in self.weights):
            raise PerceptualConfigError("layer weights must be >= 0")
        if not any(w > 0 for w in self.weights):
            raise PerceptualConfigError("at least one layer weight must be > 0")
        if any(l not in (1, 2, 3) for l in self.layers):
            raise PerceptualConfigError("stage indices must be in {1,2,3}")


@dataclass
class TeacherStudentPair:
    teacher: det.Detector      # frozen: forwarded under no_grad only
    student: det.Detector
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)


def feature_loss(teacher_feats: list, student_feats: list,
                 cfg: PerceptualConfig) -> Tensor:
    """Sum over chosen stages of lambda_l * mean squared feature difference.

    Mean (not sum) over elements keeps the per-stage weights comparable
    across stages of different sizes.
    """
    total = Tensor(0.0)
    for stage, lam in zip(cfg.layers, cfg.weights):
        ft, fs = teacher_feats[stage - 1], student_feats[stage - 1]
        if ft.shape != fs.shape:
            raise det.ConfigError(
                f"stage {stage} shapes differ: teacher {ft.shape} vs "
                f"student {fs.shape}")
        diff = ad.sub(fs, ft)
        total = ad.add(total, ad.scale(ad.scale(ad.sum_sq(diff),
                                                1.0 / ft.data.size), lam))
    return ad.scale(total, cfg.global_weight)


def perceptual_loss(clear: np.ndarray, foggy: np.ndarray,
                    pair: TeacherStudentPair) -> Tensor:
    """Teacher features on the clear image vs student features on the foggy
    one; differentiable w.r.t. the student only."""
    with ad.no_grad():
        teacher_feats = pair.teacher.image_features(clear)
    teacher_feats = [Tensor(f.data) for f in teacher_feats]
    student_feats = pair.student.image_features(foggy)
    return feature_loss(teacher_feats, student_feats, pair.perceptual)


def total_loss(obj: Tensor, perc: Tensor) -> Tensor:
    """Unit-weighted sum of the detection and perceptual terms."""
    return ad.add(obj, perc)


class SGD:
    """Stochastic gradient descent with momentum and global-norm clipping.

    Fully deterministic: no state beyond the velocity buffers.
    """

    def __init__(self, params: dict, lr: float, momentum: float = 0.9,
                 max_grad_norm: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.max_grad_norm = max_grad_norm
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self):
        scale = 1.0
        if self.max_grad_norm is not None:
            sq = sum(float(np.sum(t.grad * t.grad))
                     for t in self.params.values() if t.grad is not None)
            norm = math.sqrt(sq)
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, t in self.params.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v -= self.lr * scale * t.grad
            t.data += v


def distill_step(samples: list, pair: TeacherStudentPair, optimizer: SGD) -> dict:
    """One student update over a small batch; returns the loss terms.

    The teacher is only ever run under no_grad, so its parameters never
    acquire gradients.
    """
    cfg = pair.student.cfg
    optimizer.zero_grad()
    obj_terms, perc_terms = [], []
    for sample in samples:
        fog_map = (pair.student.fog_input(sample)
                   if cfg.needs_fog_stream else None)
        pred = pair.student.forward(sample.foggy, fog_map)
        check_finite(pred)
        match = det.hungarian_match(pred, sample.annotation,
                                    cfg.w_cls, cfg.w_l1, cfg.w_giou)
        obj_terms.append(det.detection_loss(
            pred, sample.annotation, match,
            cfg.w_cls, cfg.w_l1, cfg.w_giou, cfg.eos_coef))
        perc_terms.append(perceptual_loss(sample.clear, sample.foggy, pair))
    n = len(samples)
    obj = ad.scale(_sum(obj_terms), 1.0 / n)
    perc = ad.scale(_sum(perc_terms), 1.0 / n)
    loss = total_loss(obj, perc)
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"non-finite loss: l_obj={float(obj.data)} l_perc={float(perc.data)}")
    ad.backward(loss)
    optimizer.step()
    return {"l_obj": float(obj.data), "l_perc": float(perc.data),
            "l_total": float(loss.data)}


def check_finite(pred: det.DetectionOutput):
    """Abort the step (divergence path) when the forward pass blew up."""
    if not (np.isfinite(pred.class_logits.data).all()
            and np.isfinite(pred.boxes.data).all()):
        raise FloatingPointError("non-finite detector output")


def _sum(terms: list) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return acc
