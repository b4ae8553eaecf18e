"""Dual-teacher orchestration: EMA updates, routing, and the adversarial step.

Two teachers share the student's architecture. The intra-domain teacher sees
a differently perturbed copy of the same source-appearance image the student
sees; the inter-domain teacher sees the anatomy-matched target-appearance
member of each pair. Per configured decoder level a discriminator scores
student outputs as fake against teacher outputs as real; discriminators are
updated on detached copies after the student's backward pass, so gradients
never cross between the three parameter sets.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .core import (
    INTER_TEACHER_KINDS,
    STUDENT_KINDS,
    ImageKind,
    ImageTensor,
    InvalidInputError,
    PairedSample,
    TrainingConfig,
)
from .losses import ensemble_adv_losses, generator_adv_loss, multi_level_adv, self_information
from .networks import MultiLevelOutput, UNetSegmenter


@dataclass
class TeacherState:
    """An EMA copy of the student; never receives gradients."""

    model: nn.Module
    t: int = 0


def make_teacher(student: nn.Module) -> TeacherState:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherState(model=teacher)


def ema_update(teacher: TeacherState, student: nn.Module, alpha: float) -> TeacherState:
    """theta'_t = alpha * theta'_{t-1} + (1 - alpha) * theta_t, in place."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError("alpha must be in [0, 1]")
    t_params = dict(teacher.model.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise InvalidInputError("teacher/student parameter sets differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise InvalidInputError(f"shape mismatch at {name}: {tp.shape} vs {sp.shape}")
            tp.mul_(alpha).add_(sp, alpha=1.0 - alpha)
    teacher.t += 1
    return teacher


@dataclass
class ModelBundle:
    """Every parameterized piece of stage 2, plus the stage-1 translators."""

    student: UNetSegmenter
    teacher_intra: TeacherState | None = None
    teacher_inter: TeacherState | None = None
    disc_intra: dict[int, nn.Module] = field(default_factory=dict)
    disc_inter: dict[int, nn.Module] = field(default_factory=dict)
    g_s: nn.Module | None = None
    g_t: nn.Module | None = None


@dataclass
class BranchStepResult:
    """Student-phase outcome of one ensembling branch."""

    con: torch.Tensor
    adv_g: torch.Tensor
    # per level: (student probs detached, teacher probs) cached for the
    # discriminator update of the same iteration.
    cache: dict[int, tuple[torch.Tensor, torch.Tensor]]
    n_images: int


def set_requires_grad(modules: list[nn.Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _zero() -> torch.Tensor:
    return torch.zeros(())


def _noise_like(x: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    if sigma == 0:
        return x
    rng = np.random.default_rng(seed)
    noise = torch.from_numpy(rng.normal(0.0, sigma, size=tuple(x.shape)).astype(np.float32))
    return x + noise


def _stack_images(images: list[ImageTensor]) -> torch.Tensor:
    return torch.from_numpy(np.stack([img.data for img in images]))


def _disc_in(probs: torch.Tensor, config: TrainingConfig) -> torch.Tensor:
    return self_information(probs) if config.disc_input == "selfinfo" else probs


def _check_kinds(images: list[ImageTensor], allowed: frozenset[ImageKind], who: str) -> None:
    bad = {img.kind for img in images} - allowed
    if bad:
        raise InvalidInputError(f"{who} received disallowed image kinds {sorted(k.value for k in bad)}")


def _branch_adv(
    student_out: MultiLevelOutput,
    teacher_out: MultiLevelOutput,
    sup_probs: dict[int, torch.Tensor] | None,
    discs: dict[int, nn.Module],
    config: TrainingConfig,
) -> tuple[torch.Tensor, dict[int, tuple[torch.Tensor, torch.Tensor]]]:
    """Generator adversarial term plus the cached maps for the later D update.

    Student outputs are the fakes (sup_probs, when given, joins that pool),
    teacher outputs the reals. An empty side yields a zero contribution.
    """
    cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}
    per_level: dict[int, torch.Tensor] = {}
    for level in config.layer_set:
        fake = student_out.prob(level)
        if sup_probs is not None:
            fake = torch.cat([fake, sup_probs[level]])
        real = teacher_out.prob(level)
        if fake.shape[0] == 0 or real.shape[0] == 0:
            return _zero(), {}
        scores = discs[level](_disc_in(fake, config))
        per_level[level] = generator_adv_loss(scores, config.gan_loss_variant)
        cache[level] = (_disc_in(fake, config).detach(), _disc_in(real, config).detach())
    return multi_level_adv(per_level, config.lambda_adv), cache


def intra_step(
    bundle: ModelBundle,
    images: list[ImageTensor],
    config: TrainingConfig,
    step_seed: int,
    sup_probs: dict[int, torch.Tensor] | None = None,
) -> BranchStepResult:
    """Consistency and adversarial losses within the source-appearance family.

    Every image is perturbed twice with independent noise, once for the
    student and once for the teacher. Student outputs on original source
    images (plus the supervised batch, when provided) are the adversarial
    fakes; teacher outputs on synthetic source-like images are the reals.
    """
    if bundle.teacher_intra is None:
        raise InvalidInputError("intra_step requires an intra-domain teacher")
    allowed = config.intra_pool_kinds | {ImageKind.S}
    _check_kinds(images, frozenset(allowed & STUDENT_KINDS), "intra_step")
    if not images:
        return BranchStepResult(_zero(), _zero(), {}, 0)

    x = _stack_images(images)
    seq = np.random.SeedSequence(step_seed)
    s_student, s_teacher = (int(c.generate_state(1)[0]) for c in seq.spawn(2))
    student_out = bundle.student(_noise_like(x, config.noise_sigma, s_student))
    with torch.no_grad():
        teacher_out = bundle.teacher_intra.model(_noise_like(x, config.noise_sigma, s_teacher))

    con = torch.nn.functional.mse_loss(student_out.prob(1), teacher_out.prob(1))

    if not bundle.disc_intra:
        return BranchStepResult(con, _zero(), {}, len(images))
    is_original = torch.tensor([img.kind is ImageKind.S for img in images])
    is_synthetic = torch.tensor([img.kind.is_source_like for img in images])
    fake_side = MultiLevelOutput({lv: student_out.logits[lv][is_original] for lv in config.layer_set})
    real_side = MultiLevelOutput(
        {lv: teacher_out.logits[lv][is_synthetic] for lv in config.layer_set}
    )
    adv_g, cache = _branch_adv(fake_side, real_side, sup_probs, bundle.disc_intra, config)
    return BranchStepResult(con, adv_g, cache, len(images))


def inter_step(
    bundle: ModelBundle,
    pairs: list[PairedSample],
    config: TrainingConfig,
    step_seed: int,
) -> BranchStepResult:
    """Structural consistency and adversarial losses across appearance domains.

    The student consumes the source-style member of each pair, the teacher
    the target-style member; agreement is enforced on self-information maps.
    """
    if bundle.teacher_inter is None:
        raise InvalidInputError("inter_step requires an inter-domain teacher")
    if not pairs:
        return BranchStepResult(_zero(), _zero(), {}, 0)
    src = [p.source_style for p in pairs]
    tgt = [p.target_style for p in pairs]
    _check_kinds(src, STUDENT_KINDS, "inter_step (student side)")
    _check_kinds(tgt, INTER_TEACHER_KINDS, "inter_step (teacher side)")

    seq = np.random.SeedSequence(step_seed)
    s_student, s_teacher = (int(c.generate_state(1)[0]) for c in seq.spawn(2))
    x_s = _noise_like(_stack_images(src), config.noise_sigma, s_student)
    x_t = _noise_like(_stack_images(tgt), config.noise_sigma, s_teacher)
    student_out = bundle.student(x_s)
    with torch.no_grad():
        teacher_out = bundle.teacher_inter.model(x_t)

    diff = self_information(student_out.prob(1)) - self_information(teacher_out.prob(1))
    con = diff.pow(2).sum(dim=1).mean()

    if not bundle.disc_inter:
        return BranchStepResult(con, _zero(), {}, len(pairs))
    adv_g, cache = _branch_adv(student_out, teacher_out, None, bundle.disc_inter, config)
    return BranchStepResult(con, adv_g, cache, len(pairs))


def discriminator_step(
    discs: dict[int, nn.Module],
    cache: dict[int, tuple[torch.Tensor, torch.Tensor]],
    config: TrainingConfig,
    optimizer: torch.optim.Optimizer,
) -> dict[int, float]:
    """One optimizer step for a branch's discriminators on cached outputs.

    Both cached sides are detached, so student and teacher parameters are
    untouched by construction.
    """
    if not cache:
        return {}
    set_requires_grad(list(discs.values()), True)
    losses: dict[int, float] = {}
    total = None
    for level, (fake, real) in cache.items():
        d_loss, _ = ensemble_adv_losses(
            discs[level](fake), discs[level](real), config.gan_loss_variant
        )
        losses[level] = float(d_loss.detach())
        total = d_loss if total is None else total + d_loss
    optimizer.zero_grad()
    assert total is not None
    total.backward()
    optimizer.step()
    return losses
