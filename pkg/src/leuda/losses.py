"""Differentiable training objectives, the self-information transform, and schedules.

Conventions, fixed across the package:
- cross-entropy uses the natural log; self-information uses base-2.
- consistency losses operate on softmax probabilities, averaged so values
  are independent of resolution and class count where possible.
- ensemble adversarial losses consume raw discriminator scores; the log
  variant applies the sigmoid internally in a numerically safe form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import InvalidInputError, ProbMap

DICE_EPS = 1e-5


class NonFiniteLossError(RuntimeError):
    """A loss component became NaN or infinite; the step must be aborted."""


@dataclass(frozen=True)
class WeightSnapshot:
    """The four ramped weights at one step: (con_intra, adv_intra, con_inter, adv_inter)."""

    con_intra: float
    adv_intra: float
    con_inter: float
    adv_inter: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.con_intra, self.adv_intra, self.con_inter, self.adv_inter)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar components of one student step plus the weights they carried."""

    seg: float
    con_intra: float
    adv_intra: float
    con_inter: float
    adv_inter: float
    total: float
    weights: WeightSnapshot

    def recompute_total(self) -> float:
        w = self.weights
        return (
            self.seg
            + w.con_intra * self.con_intra
            + w.adv_intra * self.adv_intra
            + w.con_inter * self.con_inter
            + w.adv_inter * self.adv_inter
        )

    def as_dict(self) -> dict:
        return {
            "seg": self.seg,
            "con_intra": self.con_intra,
            "adv_intra": self.adv_intra,
            "con_inter": self.con_inter,
            "adv_inter": self.adv_inter,
            "total": self.total,
            "w_con_intra": self.weights.con_intra,
            "w_adv_intra": self.weights.adv_intra,
            "w_con_inter": self.weights.con_inter,
            "w_adv_inter": self.weights.adv_inter,
        }


@dataclass(frozen=True)
class SelfInfoMap:
    """Element-wise -p * log2(p) of a probability map; zero where p is 0 or 1."""

    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3:
            raise InvalidInputError(f"self-information map must be (C, H, W), got {values.shape}")
        if values.min() < 0:
            raise InvalidInputError("self-information entries must be non-negative")
        object.__setattr__(self, "values", values)


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss, averaged over foreground classes.

    probs: (B, C, H, W) softmax output; target: (B, H, W) integer labels.
    Per class c >= 1: 1 - 2*sum(p_c*g_c) / (sum(p_c) + sum(g_c) + eps),
    sums taken over batch and pixels together.
    """
    num_classes = probs.shape[1]
    one_hot = F.one_hot(target, num_classes).permute(0, 3, 1, 2).to(probs.dtype)
    losses = []
    for c in range(1, num_classes):
        p, g = probs[:, c], one_hot[:, c]
        inter = (p * g).sum()
        losses.append(1.0 - 2.0 * inter / (p.sum() + g.sum() + eps))
    return torch.stack(losses).mean()


def supervised_seg_loss(
    logits_per_level: dict[int, torch.Tensor],
    target: torch.Tensor,
    lambda_seg: dict[int, float],
) -> torch.Tensor:
    """Deeply supervised segmentation loss: sum_i lambda_i * (CE + Dice) at level i."""
    if target.dtype not in (torch.int64, torch.int32):
        raise InvalidInputError("target must be an integer label map")
    missing = set(lambda_seg) - set(logits_per_level)
    if missing:
        raise InvalidInputError(f"no logits for configured levels {sorted(missing)}")
    total = None
    for level, weight in lambda_seg.items():
        logits = logits_per_level[level]
        if target.min() < 0 or target.max() >= logits.shape[1]:
            raise InvalidInputError(
                f"labels out of range [0, {logits.shape[1]}): "
                f"min={int(target.min())}, max={int(target.max())}"
            )
        level_loss = F.cross_entropy(logits, target) + dice_loss(F.softmax(logits, dim=1), target)
        term = weight * level_loss
        total = term if total is None else total + term
    assert total is not None
    return total


def intra_consistency(student_probs: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """MSE between two probability maps, averaged over batch, classes, and pixels."""
    _check_same_shape(student_probs, teacher_probs, "intra_consistency")
    return F.mse_loss(student_probs, teacher_probs)


def self_information(p: torch.Tensor) -> torch.Tensor:
    """Element-wise -p * log2(p) with the convention 0*log2(0) = 0."""
    return -p * torch.log2(p.clamp_min(1e-12))


def self_information_map(p: ProbMap) -> SelfInfoMap:
    """Array-level variant of self_information for core ProbMap values."""
    values = self_information(torch.from_numpy(np.array(p.probs, dtype=np.float64)))
    return SelfInfoMap(values.numpy().astype(np.float32))


def inter_consistency(student_probs: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """Squared distance between self-information maps.

    Per pixel the squared difference is summed over class channels; the
    result is averaged over pixels, then over the batch.
    """
    _check_same_shape(student_probs, teacher_probs, "inter_consistency")
    diff = self_information(student_probs) - self_information(teacher_probs)
    return diff.pow(2).sum(dim=1).mean()


def ensemble_adv_losses(
    d_on_student: torch.Tensor,
    d_on_teacher: torch.Tensor,
    variant: str = "least_squares",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator losses for the self-ensembling critics.

    Teacher outputs are treated as real, student outputs as fake. Inputs are
    raw score grids. The log variant's generator term is non-saturating.
    """
    if not (torch.isfinite(d_on_student).all() and torch.isfinite(d_on_teacher).all()):
        raise NonFiniteLossError(
            "discriminator produced non-finite scores "
            f"(student finite={bool(torch.isfinite(d_on_student).all())}, "
            f"teacher finite={bool(torch.isfinite(d_on_teacher).all())})"
        )
    if variant == "log":
        # -mean(log sigmoid(real)) - mean(log(1 - sigmoid(fake))), via softplus.
        d_loss = F.softplus(-d_on_teacher).mean() + F.softplus(d_on_student).mean()
    elif variant == "least_squares":
        d_loss = (d_on_teacher - 1.0).pow(2).mean() + d_on_student.pow(2).mean()
    else:
        raise InvalidInputError(f"unknown GAN variant {variant!r}")
    return d_loss, generator_adv_loss(d_on_student, variant)


def generator_adv_loss(d_on_student: torch.Tensor, variant: str = "least_squares") -> torch.Tensor:
    """Student-side adversarial term: push student outputs toward the real label."""
    if variant == "log":
        return F.softplus(-d_on_student).mean()
    if variant == "least_squares":
        return (d_on_student - 1.0).pow(2).mean()
    raise InvalidInputError(f"unknown GAN variant {variant!r}")


def multi_level_adv(
    per_level_losses: dict[int, torch.Tensor], lambda_adv: dict[int, float]
) -> torch.Tensor:
    """Weighted sum of per-level adversarial losses: sum_i lambda_i * L_i."""
    missing = set(lambda_adv) - set(per_level_losses)
    if missing:
        raise InvalidInputError(f"missing adversarial losses for levels {sorted(missing)}")
    total = None
    for level, weight in lambda_adv.items():
        term = weight * per_level_losses[level]
        total = term if total is None else total + term
    assert total is not None
    return total


def total_student_loss(
    seg: torch.Tensor,
    con_intra: torch.Tensor,
    adv_intra: torch.Tensor,
    con_inter: torch.Tensor,
    adv_inter: torch.Tensor,
    weights: WeightSnapshot,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Combine the five components into the student objective.

    Returns the differentiable total plus a scalar breakdown whose recorded
    total always equals the weighted sum of its components.
    """
    components = {
        "seg": seg,
        "con_intra": con_intra,
        "adv_intra": adv_intra,
        "con_inter": con_inter,
        "adv_inter": adv_inter,
    }
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(f"component {name} is non-finite: {value}")
    total = (
        seg
        + weights.con_intra * con_intra
        + weights.adv_intra * adv_intra
        + weights.con_inter * con_inter
        + weights.adv_inter * adv_inter
    )
    scalars = {name: float(value.detach()) for name, value in components.items()}
    breakdown = LossBreakdown(
        **scalars,
        total=scalars["seg"]
        + weights.con_intra * scalars["con_intra"]
        + weights.adv_intra * scalars["adv_intra"]
        + weights.con_inter * scalars["con_inter"]
        + weights.adv_inter * scalars["adv_inter"],
        weights=weights,
    )
    return total, breakdown


def rampup_weight(t: float, t_max: float, l_max: float) -> float:
    """Sigmoid-shaped ramp l_max * exp(-5 * (1 - t/t_max)^2), clamped at l_max past t_max."""
    if t < 0:
        raise InvalidInputError("t must be non-negative")
    if t_max <= 0:
        raise InvalidInputError("t_max must be positive")
    if l_max < 0:
        raise InvalidInputError("l_max must be non-negative")
    if t >= t_max:
        return l_max
    return l_max * math.exp(-5.0 * (1.0 - t / t_max) ** 2)


def lr_at(epoch: int, lr_peak: float, warmup_epochs: int) -> float:
    """Linear warm-up from 0 to lr_peak over warmup_epochs, constant afterwards."""
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return lr_peak
    return lr_peak * epoch / warmup_epochs
