"""Two-stage training pipeline, method ladder, instrumentation, and reports.

Stage 1 trains the translators and materializes the synthetic domains.
Stage 2 trains the student with the method-dependent subset of objectives:
supervised segmentation always; intra/inter consistency and the two
adversarial terms per method. Every stochastic draw derives from the run
seed, so identical specs replay identical batches and schedules.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    STUDENT_KINDS,
    DatasetSplit,
    ImageKind,
    ImageTensor,
    InvalidInputError,
    SegMask,
    Subject,
    TrainingConfig,
    assemble_batch,
    split_dataset,
)
from .ensembling import (
    BranchStepResult,
    ModelBundle,
    TeacherState,
    discriminator_step,
    ema_update,
    inter_step,
    intra_step,
    make_teacher,
    set_requires_grad,
)
from .losses import (
    LossBreakdown,
    NonFiniteLossError,
    WeightSnapshot,
    lr_at,
    rampup_weight,
    supervised_seg_loss,
    total_student_loss,
)
from .metrics import AggregateResult, aggregate, evaluate_target_subject
from .networks import SegmenterConfig, build_discriminator, build_segmenter, config_hash
from .synthdata import PhantomSpec, generate_phantoms, load_dataset, retag_direction, save_dataset
from .translation import (
    SyntheticDomains,
    TranslationConfig,
    TranslatorPair,
    load_translators,
    save_translators,
    synthesize_domains,
    train_dcam,
)

logger = logging.getLogger(__name__)

torch.set_num_threads(1)

ADDITIVITY_TOL = 1e-9


@dataclass(frozen=True)
class MethodPlan:
    use_translation: bool
    use_intra: bool
    use_inter: bool
    use_adv: bool
    train_on_target_labels: bool = False


METHODS: dict[str, MethodPlan] = {
    "no_adaptation": MethodPlan(False, False, False, False),
    "translation_only": MethodPlan(True, False, False, False),
    "intra_teacher": MethodPlan(True, True, False, False),
    "inter_teacher": MethodPlan(True, False, True, False),
    "dual_teacher": MethodPlan(True, True, True, False),
    "dual_adversarial_teacher": MethodPlan(True, True, True, True),
    "supervised_upper": MethodPlan(False, False, False, False, train_on_target_labels=True),
}

ABLATION_LADDER = (
    "no_adaptation",
    "intra_teacher",
    "inter_teacher",
    "dual_teacher",
    "dual_adversarial_teacher",
)


def benchmark_spec(out_dir: str, seeds: tuple[int, ...] = (0, 1, 2)) -> "ExperimentSpec":
    """The shipped phantom benchmark: 20+20 subjects at 64x64, 25% labels.

    Tuned for CPU: 40 translation epochs at lr 2e-4 (the adversarial game
    needs the full budget to pull the generators off their identity init),
    then 24 student epochs at peak lr 1e-3. One full ladder run takes
    roughly 20 minutes per seed on a single core.
    """
    return ExperimentSpec(
        out_dir=out_dir,
        label_ratio=0.25,
        train_fraction=0.8,
        seeds=seeds,
        config=TrainingConfig(t_max=24, warmup_epochs=8, lr_peak=1e-3),
        stage1=TranslationConfig(epochs=40, batch_size=4, lr=2e-4, width=16, n_res=2),
        segmenter=SegmenterConfig(depth=4, base_width=16, aux_levels=(1, 3)),
        phantom=PhantomSpec(),
    )


@dataclass(frozen=True)
class ExperimentSpec:
    out_dir: str
    dataset_dir: str | None = None
    direction: str = "a2b"
    label_ratio: float = 0.25
    train_fraction: float = 0.8
    method: str = "dual_adversarial_teacher"
    seeds: tuple[int, ...] = (0,)
    config: TrainingConfig = field(default_factory=TrainingConfig)
    stage1: TranslationConfig = field(default_factory=TranslationConfig)
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise InvalidInputError(
                f"unknown method {self.method!r}; choose from {sorted(METHODS)}"
            )
        if self.direction not in ("a2b", "b2a"):
            raise InvalidInputError("direction must be a2b or b2a")
        if not self.seeds:
            raise InvalidInputError("seeds must be non-empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# salts for independent seed streams within one run
_SALT_SPLIT, _SALT_STAGE1, _SALT_INIT, _SALT_BATCH, _SALT_NOISE = 11, 13, 17, 19, 23


def load_subjects(spec: ExperimentSpec) -> tuple[list[Subject], list[Subject], tuple]:
    """Source/target subjects per direction, plus voxel spacing.

    Without a dataset_dir the default phantom benchmark is generated into
    out_dir/dataset once and reused.
    """
    if spec.dataset_dir is not None:
        path = Path(spec.dataset_dir)
    else:
        path = Path(spec.out_dir) / "dataset"
        if not (path / "index.json").exists():
            subjects_a, subjects_b = generate_phantoms(spec.phantom)
            save_dataset(path, subjects_a + subjects_b, spacing=spec.phantom.spacing)
    subjects, spacing = load_dataset(path)
    subjects_a = [s for s in subjects if s.domain == "source"]
    subjects_b = [s for s in subjects if s.domain == "target"]
    source, target = retag_direction(subjects_a, subjects_b, spec.direction)
    return source, target, spacing


def make_split(spec: ExperimentSpec, seed: int) -> DatasetSplit:
    source, target, _ = load_subjects(spec)
    return split_dataset(
        source + target, spec.train_fraction, spec.label_ratio, derive_seed(seed, _SALT_SPLIT)
    )


@dataclass
class Stage1Result:
    translators: TranslatorPair
    domains: SyntheticDomains
    split: DatasetSplit
    out_dir: Path


def save_synthetic(path: str | Path, domains: SyntheticDomains) -> None:
    """Persist the synthetic image families and the pair manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[ImageTensor]] = {}
    for img in domains.source_like + domains.target_like:
        groups.setdefault(img.kind.value, []).append(img)
    arrays = {kind: np.stack([img.data for img in imgs]) for kind, imgs in groups.items()}
    np.savez_compressed(path / "synthetic.npz", **arrays)
    index = {
        "counts": {kind: len(imgs) for kind, imgs in groups.items()},
        "source_like": len(domains.source_like),
        "target_like": len(domains.target_like),
        "slice_ids": {kind: [img.slice_id for img in imgs] for kind, imgs in groups.items()},
        "pairs": [
            {"kind": p.pair_kind.name, "slice_id": p.slice_id} for p in domains.pairs
        ],
    }
    (path / "index.json").write_text(json.dumps(index, indent=2))


def run_stage1(spec: ExperimentSpec, seed: int | None = None) -> Stage1Result:
    """Train the translators and materialize/persist the synthetic domains."""
    seed = spec.seeds[0] if seed is None else seed
    split = make_split(spec, seed)
    stage1_cfg = replace(spec.stage1, seed=derive_seed(seed, _SALT_STAGE1))
    out = Path(spec.out_dir) / f"seed{seed}" / "stage1"
    out.mkdir(parents=True, exist_ok=True)

    translators = train_dcam(split, stage1_cfg, out_dir=out)
    domains = synthesize_domains(translators, split)

    save_translators(translators, out / "translators.pt", stage1_cfg)
    save_synthetic(out / "synthetic", domains)
    split.save_manifest(out / "split.json")
    (out / "stage1_log.json").write_text(json.dumps(translators.log, indent=2))
    return Stage1Result(translators, domains, split, out)


def load_stage1(spec: ExperimentSpec, seed: int) -> Stage1Result:
    out = Path(spec.out_dir) / f"seed{seed}" / "stage1"
    translators, _ = load_translators(out / "translators.pt")
    split = make_split(spec, seed)
    domains = synthesize_domains(translators, split)
    return Stage1Result(translators, domains, split, out)


class TrainingMonitor:
    """Counts invariant checks and records violations during instrumented runs.

    Checks: input-kind routing for every consumer, LossBreakdown additivity,
    student/teacher isolation across the discriminator update, and the exact
    EMA recurrence for both teachers.
    """

    def __init__(self) -> None:
        self.violations: list[str] = []
        self.counts: Counter = Counter()

    def check(self, ok: bool, message: str) -> None:
        self.counts["checks"] += 1
        if not ok:
            self.violations.append(message)

    def observe_kinds(self, who: str, kinds: list[ImageKind], allowed: frozenset) -> None:
        bad = set(kinds) - allowed
        self.check(not bad, f"{who} received kinds {sorted(k.value for k in bad)}")

    def observe_breakdown(self, breakdown: LossBreakdown) -> None:
        err = abs(breakdown.total - breakdown.recompute_total())
        self.check(err <= ADDITIVITY_TOL, f"breakdown additivity off by {err:g}")

    @staticmethod
    def _clone_params(module: torch.nn.Module) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in module.named_parameters()}

    def snapshot(self, bundle: ModelBundle) -> dict:
        snap = {"student": self._clone_params(bundle.student)}
        for name in ("teacher_intra", "teacher_inter"):
            teacher: TeacherState | None = getattr(bundle, name)
            if teacher is not None:
                snap[name] = self._clone_params(teacher.model)
        return snap

    def after_disc_step(self, bundle: ModelBundle, snap: dict) -> None:
        for name, params in self._clone_params(bundle.student).items():
            self.check(
                torch.equal(params, snap["student"][name]),
                f"discriminator step altered student parameter {name}",
            )

    def after_ema(self, bundle: ModelBundle, snap: dict, alpha: float, updated: bool) -> None:
        student = dict(bundle.student.named_parameters())
        for name in ("teacher_intra", "teacher_inter"):
            teacher: TeacherState | None = getattr(bundle, name)
            if teacher is None or name not in snap:
                continue
            for pname, current in teacher.model.named_parameters():
                self.check(current.grad is None, f"{name}.{pname} accumulated a gradient")
                pre = snap[name][pname]
                if updated:
                    expected = pre.clone()
                    expected.mul_(alpha).add_(student[pname].detach(), alpha=1.0 - alpha)
                else:
                    expected = pre
                self.check(
                    torch.equal(current, expected),
                    f"{name}.{pname} deviates from the EMA recurrence",
                )


def _active_weights(plan: MethodPlan, config: TrainingConfig, epoch: int) -> WeightSnapshot:
    ramp = [rampup_weight(epoch, config.t_max, lm) for lm in config.l_max]
    active = (
        plan.use_intra,
        plan.use_adv and plan.use_intra,
        plan.use_inter,
        plan.use_adv and plan.use_inter,
    )
    return WeightSnapshot(*(w if on else 0.0 for w, on in zip(ramp, active)))


def _labeled_tensors(batch: list[tuple[ImageTensor, SegMask]]) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([img.data for img, _ in batch]))
    y = torch.from_numpy(np.stack([mask.labels for _, mask in batch]))
    return x, y


def _build_bundle(spec: ExperimentSpec, plan: MethodPlan, seed: int,
                  translators: TranslatorPair | None) -> ModelBundle:
    init = derive_seed(seed, _SALT_INIT)
    student = build_segmenter(spec.segmenter, seed=init)
    bundle = ModelBundle(student=student)
    if plan.use_intra:
        bundle.teacher_intra = make_teacher(student)
    if plan.use_inter:
        bundle.teacher_inter = make_teacher(student)
    if plan.use_adv:
        c = spec.segmenter.num_classes
        bundle.disc_intra = {
            lv: build_discriminator(c, seed=derive_seed(init, 100 + lv))
            for lv in spec.config.layer_set
        }
        bundle.disc_inter = {
            lv: build_discriminator(c, seed=derive_seed(init, 200 + lv))
            for lv in spec.config.layer_set
        }
    if translators is not None:
        bundle.g_s = translators.g_s
        bundle.g_t = translators.g_t
    return bundle


def _train_iteration(
    bundle: ModelBundle,
    labeled: list[tuple[ImageTensor, SegMask]],
    pair_batch: list,
    plan: MethodPlan,
    config: TrainingConfig,
    weights: WeightSnapshot,
    opt_student: torch.optim.Optimizer,
    opt_d_intra: torch.optim.Optimizer | None,
    opt_d_inter: torch.optim.Optimizer | None,
    step_seed: int,
    monitor: TrainingMonitor | None,
) -> tuple[LossBreakdown, dict[str, float]]:
    all_discs = list(bundle.disc_intra.values()) + list(bundle.disc_inter.values())
    set_requires_grad(all_discs, False)

    x_l, y_l = _labeled_tensors(labeled)
    sup_out = bundle.student(x_l)
    seg = supervised_seg_loss(sup_out.logits, y_l, config.lambda_seg)
    sup_probs = None
    if plan.use_adv:
        sup_probs = {lv: F.softmax(sup_out.logits[lv], dim=1) for lv in config.layer_set}

    zero = torch.zeros(())
    intra_res = BranchStepResult(zero, zero, {}, 0)
    inter_res = BranchStepResult(zero, zero, {}, 0)
    if plan.use_intra:
        intra_images = [
            p.source_style for p in pair_batch if p.source_style.kind in config.intra_pool_kinds
        ]
        if monitor is not None:
            monitor.observe_kinds(
                "intra consistency pool", [i.kind for i in intra_images], config.intra_pool_kinds
            )
        intra_res = intra_step(
            bundle, intra_images, config, derive_seed(step_seed, _SALT_NOISE, 0), sup_probs
        )
    if plan.use_inter:
        if monitor is not None:
            monitor.observe_kinds(
                "student (inter)", [p.source_style.kind for p in pair_batch], STUDENT_KINDS
            )
            monitor.observe_kinds(
                "inter teacher",
                [p.target_style.kind for p in pair_batch],
                frozenset({ImageKind.S2T, ImageKind.T, ImageKind.T2S2T}),
            )
        inter_res = inter_step(bundle, pair_batch, config, derive_seed(step_seed, _SALT_NOISE, 1))

    total, breakdown = total_student_loss(
        seg, intra_res.con, intra_res.adv_g, inter_res.con, inter_res.adv_g, weights
    )
    opt_student.zero_grad()
    total.backward()

    snap = monitor.snapshot(bundle) if monitor is not None else None
    d_logs: dict[str, float] = {}
    if plan.use_adv:
        assert opt_d_intra is not None and opt_d_inter is not None
        for lv, value in discriminator_step(
            bundle.disc_intra, intra_res.cache, config, opt_d_intra
        ).items():
            d_logs[f"d_intra_{lv}"] = value
        for lv, value in discriminator_step(
            bundle.disc_inter, inter_res.cache, config, opt_d_inter
        ).items():
            d_logs[f"d_inter_{lv}"] = value
    if monitor is not None:
        monitor.after_disc_step(bundle, snap)

    opt_student.step()

    updated = config.ema_per == "iteration"
    if updated:
        if bundle.teacher_intra is not None:
            ema_update(bundle.teacher_intra, bundle.student, config.ema_alpha)
        if bundle.teacher_inter is not None:
            ema_update(bundle.teacher_inter, bundle.student, config.ema_alpha)
    if monitor is not None:
        monitor.after_ema(bundle, snap, config.ema_alpha, updated)
        monitor.observe_breakdown(breakdown)
        monitor.observe_kinds(
            "student (supervised)",
            [img.kind for img, _ in labeled],
            STUDENT_KINDS if not plan.train_on_target_labels else frozenset(ImageKind),
        )
    return breakdown, d_logs


@dataclass
class RunRecord:
    method: str
    seed: int
    spec_hash: str
    epoch_log: list[dict]
    schedule_log: list[dict]
    result: dict
    mean_target_dice: float
    wall_clock_s: float
    checkpoint: str | None
    notes: list[str] = field(default_factory=list)

    def save(self, out: str | Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "method": self.method,
            "seed": self.seed,
            "spec_hash": self.spec_hash,
            "epoch_log": self.epoch_log,
            "result": self.result,
            "mean_target_dice": self.mean_target_dice,
            "wall_clock_s": self.wall_clock_s,
            "checkpoint": self.checkpoint,
            "notes": self.notes,
        }
        (out / "record.json").write_text(json.dumps(payload, indent=2))
        (out / "schedule.json").write_text(json.dumps(self.schedule_log, sort_keys=True))


def save_checkpoint(bundle: ModelBundle, optimizers: dict, path: str | Path,
                    spec_hash: str, epoch: int) -> None:
    payload: dict = {"spec_hash": spec_hash, "epoch": epoch, "student": bundle.student.state_dict()}
    if bundle.teacher_intra is not None:
        payload["teacher_intra"] = bundle.teacher_intra.model.state_dict()
        payload["teacher_intra_t"] = bundle.teacher_intra.t
    if bundle.teacher_inter is not None:
        payload["teacher_inter"] = bundle.teacher_inter.model.state_dict()
        payload["teacher_inter_t"] = bundle.teacher_inter.t
    payload["disc_intra"] = {lv: d.state_dict() for lv, d in bundle.disc_intra.items()}
    payload["disc_inter"] = {lv: d.state_dict() for lv, d in bundle.disc_inter.items()}
    payload["optimizers"] = {k: opt.state_dict() for k, opt in optimizers.items() if opt}
    torch.save(payload, path)


def load_checkpoint(bundle: ModelBundle, optimizers: dict, path: str | Path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    bundle.student.load_state_dict(payload["student"])
    if bundle.teacher_intra is not None and "teacher_intra" in payload:
        bundle.teacher_intra.model.load_state_dict(payload["teacher_intra"])
        bundle.teacher_intra.t = payload["teacher_intra_t"]
    if bundle.teacher_inter is not None and "teacher_inter" in payload:
        bundle.teacher_inter.model.load_state_dict(payload["teacher_inter"])
        bundle.teacher_inter.t = payload["teacher_inter_t"]
    for lv, d in bundle.disc_intra.items():
        d.load_state_dict(payload["disc_intra"][lv])
    for lv, d in bundle.disc_inter.items():
        d.load_state_dict(payload["disc_inter"][lv])
    for k, opt in optimizers.items():
        if opt and k in payload["optimizers"]:
            opt.load_state_dict(payload["optimizers"][k])
    return payload


def _supervised_target_split(spec: ExperimentSpec, split: DatasetSplit) -> DatasetSplit:
    """Upper-bound variant: the labeled pool comes from target training subjects."""
    n_l = max(1, int(np.floor(spec.label_ratio * len(split.target))))
    labeled = split.target[:n_l]
    for s in labeled:
        if s.masks is None:
            raise InvalidInputError(f"target subject {s.id} has no labels for the upper bound")
    return DatasetSplit(
        labeled_source=labeled,
        unlabeled_source=(),
        target=(),
        label_ratio=spec.label_ratio,
        source_test=split.source_test,
        target_test=split.target_test,
        notes=split.notes + ("supervised upper bound trained on target labels",),
    )


def run_stage2(
    spec: ExperimentSpec,
    stage1: Stage1Result | None = None,
    seed: int | None = None,
    monitor: TrainingMonitor | None = None,
) -> RunRecord:
    """Train the student per spec.method, evaluate on held-out target subjects."""
    start = time.perf_counter()
    seed = spec.seeds[0] if seed is None else seed
    plan = METHODS[spec.method]
    config = spec.config
    _, _, spacing = load_subjects(spec)

    if plan.use_translation:
        if stage1 is None:
            stage1 = load_stage1(spec, seed)
        split, domains, translators = stage1.split, stage1.domains, stage1.translators
        pairs = list(domains.pairs)
    else:
        split = make_split(spec, seed)
        domains, translators, pairs = None, None, []
        config = replace(config, batch_unlabeled=0)
    if not (plan.use_intra or plan.use_inter):
        config = replace(config, batch_unlabeled=0)

    train_split = _supervised_target_split(spec, split) if plan.train_on_target_labels else split
    use_cycle = config.use_cycle_labels and plan.use_translation

    bundle = _build_bundle(spec, plan, seed, translators)
    opt_student = torch.optim.Adam(bundle.student.parameters(), lr=0.0, betas=(0.9, 0.999))
    opt_d_intra = opt_d_inter = None
    if plan.use_adv:
        opt_d_intra = torch.optim.Adam(
            [p for d in bundle.disc_intra.values() for p in d.parameters()],
            lr=0.0, betas=(0.9, 0.999),
        )
        opt_d_inter = torch.optim.Adam(
            [p for d in bundle.disc_inter.values() for p in d.parameters()],
            lr=0.0, betas=(0.9, 0.999),
        )
    optimizers = {"student": opt_student, "d_intra": opt_d_intra, "d_inter": opt_d_inter}

    n_slices = sum(s.n_slices for s in train_split.labeled_source + train_split.unlabeled_source)
    n_slices += sum(s.n_slices for s in train_split.target)
    batch_total = config.batch_labeled + config.batch_unlabeled
    steps_per_epoch = config.steps_per_epoch or max(1, n_slices // batch_total)

    sampling_config = replace(config, use_cycle_labels=use_cycle)
    out = Path(spec.out_dir) / f"seed{seed}" / spec.method
    out.mkdir(parents=True, exist_ok=True)
    epoch_log: list[dict] = []
    schedule_log: list[dict] = []
    notes = list(train_split.notes)

    try:
        for epoch in range(config.t_max):
            lr = lr_at(epoch, config.lr_peak, config.warmup_epochs)
            for opt in optimizers.values():
                if opt is not None:
                    for group in opt.param_groups:
                        group["lr"] = lr
            weights = _active_weights(plan, config, epoch)
            schedule_log.append({"epoch": epoch, "lr": lr, **dict(zip(
                ("w_con_intra", "w_adv_intra", "w_con_inter", "w_adv_inter"),
                weights.as_tuple(),
            ))})

            sums: Counter = Counter()
            for step in range(steps_per_epoch):
                step_seed = derive_seed(seed, _SALT_BATCH, epoch, step)
                labeled, pair_batch = assemble_batch(train_split, pairs, sampling_config, step_seed)
                breakdown, d_logs = _train_iteration(
                    bundle, labeled, pair_batch, plan, config, weights,
                    opt_student, opt_d_intra, opt_d_inter, step_seed, monitor,
                )
                for k, v in breakdown.as_dict().items():
                    sums[k] += v
                for k, v in d_logs.items():
                    sums[k] += v
            if config.ema_per == "epoch":
                if bundle.teacher_intra is not None:
                    ema_update(bundle.teacher_intra, bundle.student, config.ema_alpha)
                if bundle.teacher_inter is not None:
                    ema_update(bundle.teacher_inter, bundle.student, config.ema_alpha)
            epoch_log.append(
                {"epoch": epoch, "lr": lr, **{k: v / steps_per_epoch for k, v in sums.items()}}
            )
    except NonFiniteLossError:
        save_checkpoint(bundle, optimizers, out / "diverged.pt", spec.hash(), epoch)
        raise

    eval_net = bundle.student
    eval_net.eval()
    translator = bundle.g_s if plan.use_translation else None
    results = [
        evaluate_target_subject(
            eval_net,
            subject,
            translator=translator,
            use_translation=plan.use_translation,
            spacing=spacing,
            num_classes=spec.segmenter.num_classes,
        )
        for subject in split.target_test
    ]
    eval_net.train()
    agg = aggregate(results, num_classes=spec.segmenter.num_classes)

    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(bundle, optimizers, ckpt_path, spec.hash(), config.t_max - 1)
    if plan.train_on_target_labels:
        notes.append("upper_bound")
    record = RunRecord(
        method=spec.method,
        seed=seed,
        spec_hash=spec.hash(),
        epoch_log=epoch_log,
        schedule_log=schedule_log,
        result=agg.to_dict(),
        mean_target_dice=agg.dice_overall.mean,
        wall_clock_s=time.perf_counter() - start,
        checkpoint=str(ckpt_path),
        notes=notes,
    )
    record.save(out)
    return record


def run_baseline_supervised(spec: ExperimentSpec, seed: int | None = None) -> RunRecord:
    """Upper-bound run trained on labeled target subjects."""
    return run_stage2(replace(spec, method="supervised_upper"), seed=seed)


def run_ablation_suite(
    spec: ExperimentSpec, methods: tuple[str, ...] = ABLATION_LADDER
) -> dict:
    """Run the method ladder under identical seeds/splits; emit the comparison table."""
    records: list[RunRecord] = []
    for seed in spec.seeds:
        stage1 = None
        if any(METHODS[m].use_translation for m in methods):
            stage1 = run_stage1(spec, seed)
        for method in methods:
            method_spec = replace(spec, method=method)
            records.append(
                run_stage2(method_spec, stage1 if METHODS[method].use_translation else None,
                           seed=seed)
            )
    summary = summarize_records(records)
    write_report(Path(spec.out_dir), records, summary)
    return summary


def summarize_records(records: list[RunRecord]) -> dict:
    """Across-seed mean/std of mean target Dice and ASD per method."""
    by_method: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_method.setdefault(rec.method, []).append(rec)
    rows = {}
    for method, recs in by_method.items():
        dice = np.array([r.mean_target_dice for r in recs], dtype=np.float64)
        asd_values = [
            r.result["asd_overall"]["mean"] for r in recs
            if r.result["asd_overall"] is not None
        ]
        rows[method] = {
            "seeds": [r.seed for r in recs],
            "dice_mean": float(dice.mean()),
            "dice_std": float(dice.std()),
            "dice_per_seed": [float(v) for v in dice],
            "asd_mean": float(np.mean(asd_values)) if asd_values else None,
            "asd_std": float(np.std(asd_values)) if asd_values else None,
        }
    return rows


def write_report(out_dir: Path, records: list[RunRecord], summary: dict) -> None:
    """Persist the comparison as JSON, CSV, a mean(std) text table, and plots."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "mean_target_dice", "mean_target_asd"])
        for rec in records:
            asd = rec.result["asd_overall"]
            writer.writerow(
                [rec.method, rec.seed, f"{rec.mean_target_dice:.6f}",
                 "" if asd is None else f"{asd['mean']:.6f}"]
            )

    lines = [f"{'method':<28}{'Dice':<16}{'ASD':<16}"]
    for method, row in summary.items():
        dice = f"{row['dice_mean']:.3f}({row['dice_std']:.3f})"
        asd = (
            "N/A" if row["asd_mean"] is None else f"{row['asd_mean']:.3f}({row['asd_std']:.3f})"
        )
        lines.append(f"{method:<28}{dice:<16}{asd:<16}")
    (out_dir / "table.txt").write_text("\n".join(lines) + "\n")

    _plot_summary(out_dir, records, summary)


def _plot_summary(out_dir: Path, records: list[RunRecord], summary: dict) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = list(summary)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(12, 4))
    means = [summary[m]["dice_mean"] for m in methods]
    stds = [summary[m]["dice_std"] for m in methods]
    ax1.bar(range(len(methods)), means, yerr=stds, color="tab:blue", alpha=0.8)
    ax1.set_xticks(range(len(methods)))
    ax1.set_xticklabels(methods, rotation=30, ha="right")
    ax1.set_ylabel("mean target Dice")
    ax1.set_title("Across-seed comparison")

    per_method_subject_dice = []
    for m in methods:
        values = []
        for rec in records:
            if rec.method == m:
                values.extend(
                    s["dice_mean"] for s in rec.result["per_subject"]
                )
        per_method_subject_dice.append(values)
    ax2.boxplot(per_method_subject_dice, tick_labels=methods)
    ax2.tick_params(axis="x", rotation=30)
    ax2.set_ylabel("per-subject Dice")
    ax2.set_title("Subject-level spread")
    fig.tight_layout()
    fig.savefig(out_dir / "comparison.png", dpi=120)
    plt.close(fig)
