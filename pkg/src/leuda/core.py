"""Domain value types, dataset splitting under source label scarcity, and batch assembly.

Images live here as immutable numpy-backed value objects tagged with the
domain kind they belong to (original source/target, translated, or cycle
reconstruction). Training code converts them to torch tensors at the batch
boundary.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

NUM_CLASSES = 5  # background + 4 structures

PROB_SUM_TOL = 1e-5


class InvalidInputError(ValueError):
    """A precondition on user-supplied data was violated."""


class ImageKind(Enum):
    """Provenance tag of an image slice.

    S/T are original source/target images. S2T and T2S are one-way
    translations, S2T2S and T2S2T are round-trip (cycle) reconstructions.
    """

    S = "s"
    T = "t"
    S2T = "s2t"
    T2S = "t2s"
    S2T2S = "s2t2s"
    T2S2T = "t2s2t"

    @property
    def is_source_like(self) -> bool:
        """True for members of the synthetic source-like domain."""
        return self in (ImageKind.T2S, ImageKind.S2T2S)

    @property
    def is_target_like(self) -> bool:
        """True for members of the synthetic target-like domain."""
        return self in (ImageKind.S2T, ImageKind.T2S2T)


# Kinds the student network may consume during training (source-appearance
# images only); the inter-domain teacher consumes the complement.
STUDENT_KINDS = frozenset({ImageKind.S, ImageKind.S2T2S, ImageKind.T2S})
INTER_TEACHER_KINDS = frozenset({ImageKind.S2T, ImageKind.T, ImageKind.T2S2T})


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """A single-channel 2D image slice in z-normalized intensity units.

    data has shape (1, H, W) and must be finite. slice_id identifies the
    original slice the image derives from, so translated/reconstructed
    copies can be traced back to their anatomy.
    """

    data: np.ndarray
    kind: ImageKind
    slice_id: str | None = None

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or data.shape[0] != 1:
            raise InvalidInputError(f"image data must have shape (1, H, W), got {data.shape}")
        if data.shape[1] < 1 or data.shape[2] < 1:
            raise InvalidInputError("image spatial dims must be positive")
        if not np.all(np.isfinite(data)):
            raise InvalidInputError("image contains non-finite values")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def with_kind(self, kind: ImageKind) -> "ImageTensor":
        return replace(self, kind=kind)


@dataclass(frozen=True)
class SegMask:
    """Integer class mask of shape (H, W) with labels in [0, num_classes)."""

    labels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if not np.issubdtype(labels.dtype, np.integer):
            raise InvalidInputError("mask labels must be integers")
        if labels.ndim != 2:
            raise InvalidInputError(f"mask must be 2D, got shape {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise InvalidInputError(
                f"mask labels out of range [0, {self.num_classes}): "
                f"min={labels.min()}, max={labels.max()}"
            )
        object.__setattr__(self, "labels", _freeze(labels.astype(np.int64)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel class probabilities of shape (C, H, W); channels sum to 1."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        probs = np.asarray(self.probs, dtype=np.float32)
        if probs.ndim != 3:
            raise InvalidInputError(f"prob map must have shape (C, H, W), got {probs.shape}")
        if probs.min() < -PROB_SUM_TOL or probs.max() > 1 + PROB_SUM_TOL:
            raise InvalidInputError("probabilities outside [0, 1]")
        sums = probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            raise InvalidInputError("per-pixel channel sums deviate from 1")
        object.__setattr__(self, "probs", _freeze(probs))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class Subject:
    """An ordered stack of slices (optionally with masks) from one scan."""

    id: str
    slices: tuple[ImageTensor, ...]
    masks: tuple[SegMask, ...] | None
    domain: Literal["source", "target"]

    def __post_init__(self) -> None:
        object.__setattr__(self, "slices", tuple(self.slices))
        if self.masks is not None:
            object.__setattr__(self, "masks", tuple(self.masks))
            if len(self.masks) != len(self.slices):
                raise InvalidInputError(
                    f"subject {self.id}: {len(self.masks)} masks for {len(self.slices)} slices"
                )
            for img, mask in zip(self.slices, self.masks):
                if (img.height, img.width) != (mask.height, mask.width):
                    raise InvalidInputError(f"subject {self.id}: slice/mask size mismatch")
        if self.domain not in ("source", "target"):
            raise InvalidInputError(f"unknown domain {self.domain!r}")

    @property
    def n_slices(self) -> int:
        return len(self.slices)


class PairKind(Enum):
    """The four anatomy-matched (source-style, target-style) pairings."""

    S_S2T = (ImageKind.S, ImageKind.S2T)
    S2T2S_S2T = (ImageKind.S2T2S, ImageKind.S2T)
    T2S_T = (ImageKind.T2S, ImageKind.T)
    T2S_T2S2T = (ImageKind.T2S, ImageKind.T2S2T)

    @property
    def source_style_kind(self) -> ImageKind:
        return self.value[0]

    @property
    def target_style_kind(self) -> ImageKind:
        return self.value[1]


@dataclass(frozen=True)
class PairedSample:
    """Two styled views of the same anatomy, one per appearance domain."""

    source_style: ImageTensor
    target_style: ImageTensor
    pair_kind: PairKind

    def __post_init__(self) -> None:
        if self.source_style.kind != self.pair_kind.source_style_kind:
            raise InvalidInputError(
                f"source-style member has kind {self.source_style.kind}, "
                f"expected {self.pair_kind.source_style_kind}"
            )
        if self.target_style.kind != self.pair_kind.target_style_kind:
            raise InvalidInputError(
                f"target-style member has kind {self.target_style.kind}, "
                f"expected {self.pair_kind.target_style_kind}"
            )
        if (
            self.source_style.slice_id is None
            or self.source_style.slice_id != self.target_style.slice_id
        ):
            raise InvalidInputError("pair members must share the originating slice id")

    @property
    def slice_id(self) -> str:
        assert self.source_style.slice_id is not None
        return self.source_style.slice_id


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for the dual-teacher training stage.

    l_max holds the ramp-up ceilings for (intra consistency, intra
    adversarial, inter consistency, inter adversarial) in that order.
    Per-level weights are tuples aligned with layer_set.
    """

    ema_alpha: float = 0.99
    t_max: int = 150
    l_max: tuple[float, float, float, float] = (1.0, 0.01, 0.1, 0.01)
    layer_set: tuple[int, ...] = (1, 3)
    lambda_seg_per_level: tuple[float, ...] = (1.0, 0.1)
    lambda_adv_per_level: tuple[float, ...] = (1.0, 0.1)
    lr_peak: float = 0.005
    warmup_epochs: int = 30
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    noise_sigma: float = 0.1
    seed: int = 0
    gan_loss_variant: Literal["log", "least_squares"] = "least_squares"
    # EMA cadence: per optimizer step or once per epoch.
    ema_per: Literal["iteration", "epoch"] = "iteration"
    # Whether cycle reconstructions of labeled source slices join the
    # supervised pool with the original labels.
    use_cycle_labels: bool = True
    # Whether cycle-source images join the intra-domain consistency pool
    # (default excludes them; the pool is originals + translated target).
    intra_include_cycle: bool = False
    # What the ensembling discriminators consume: softmax probabilities or
    # their self-information transform.
    disc_input: Literal["probs", "selfinfo"] = "probs"
    steps_per_epoch: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise InvalidInputError("ema_alpha must be in [0, 1]")
        if self.t_max < 1:
            raise InvalidInputError("t_max must be >= 1")
        if len(self.l_max) != 4 or any(w < 0 for w in self.l_max):
            raise InvalidInputError("l_max must be 4 non-negative weights")
        if not self.layer_set:
            raise InvalidInputError("layer_set must be non-empty")
        if tuple(sorted(self.layer_set)) != tuple(self.layer_set):
            raise InvalidInputError("layer_set must be sorted")
        if len(self.lambda_seg_per_level) != len(self.layer_set):
            raise InvalidInputError("lambda_seg_per_level must align with layer_set")
        if len(self.lambda_adv_per_level) != len(self.layer_set):
            raise InvalidInputError("lambda_adv_per_level must align with layer_set")
        if any(w < 0 for w in self.lambda_seg_per_level + self.lambda_adv_per_level):
            raise InvalidInputError("per-level weights must be non-negative")
        if self.warmup_epochs > self.t_max:
            raise InvalidInputError("warmup_epochs must not exceed t_max")
        if self.warmup_epochs < 0 or self.lr_peak < 0:
            raise InvalidInputError("schedule values must be non-negative")
        if self.batch_labeled < 1:
            raise InvalidInputError("batch_labeled must be >= 1")
        if self.batch_unlabeled < 0:
            raise InvalidInputError("batch_unlabeled must be >= 0")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if self.gan_loss_variant not in ("log", "least_squares"):
            raise InvalidInputError(f"unknown gan_loss_variant {self.gan_loss_variant!r}")
        if self.ema_per not in ("iteration", "epoch"):
            raise InvalidInputError(f"unknown ema_per {self.ema_per!r}")
        if self.disc_input not in ("probs", "selfinfo"):
            raise InvalidInputError(f"unknown disc_input {self.disc_input!r}")

    @property
    def lambda_seg(self) -> dict[int, float]:
        return dict(zip(self.layer_set, self.lambda_seg_per_level))

    @property
    def lambda_adv(self) -> dict[int, float]:
        return dict(zip(self.layer_set, self.lambda_adv_per_level))

    @property
    def intra_pool_kinds(self) -> frozenset[ImageKind]:
        kinds = {ImageKind.S, ImageKind.T2S}
        if self.intra_include_cycle:
            kinds.add(ImageKind.S2T2S)
        return frozenset(kinds)


@dataclass(frozen=True)
class DatasetSplit:
    """Training partitions under source label scarcity, plus held-out test sets.

    labeled_source/unlabeled_source/target are the three training
    partitions; source_test/target_test are the held-out fractions.
    """

    labeled_source: tuple[Subject, ...]
    unlabeled_source: tuple[Subject, ...]
    target: tuple[Subject, ...]
    label_ratio: float
    source_test: tuple[Subject, ...] = ()
    target_test: tuple[Subject, ...] = ()
    notes: tuple[str, ...] = ()

    @property
    def n_l(self) -> int:
        return len(self.labeled_source)

    @property
    def n_u(self) -> int:
        return len(self.unlabeled_source)

    @property
    def m_u(self) -> int:
        return len(self.target)

    def manifest(self) -> dict:
        """Subject ids per partition, for exact reproduction of a split."""
        return {
            "labeled_source": [s.id for s in self.labeled_source],
            "unlabeled_source": [s.id for s in self.unlabeled_source],
            "target": [s.id for s in self.target],
            "source_test": [s.id for s in self.source_test],
            "target_test": [s.id for s in self.target_test],
            "label_ratio": self.label_ratio,
            "notes": list(self.notes),
        }

    def save_manifest(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=2))


def split_from_manifest(pool: Iterable[Subject], manifest: Mapping) -> DatasetSplit:
    """Rebuild a split from a manifest over the same subject pool."""
    by_id = {s.id: s for s in pool}
    missing = [
        sid
        for key in ("labeled_source", "unlabeled_source", "target", "source_test", "target_test")
        for sid in manifest.get(key, [])
        if sid not in by_id
    ]
    if missing:
        raise InvalidInputError(f"manifest references unknown subjects: {missing}")

    def grab(key: str) -> tuple[Subject, ...]:
        return tuple(by_id[sid] for sid in manifest.get(key, []))

    return DatasetSplit(
        labeled_source=grab("labeled_source"),
        unlabeled_source=grab("unlabeled_source"),
        target=grab("target"),
        label_ratio=float(manifest["label_ratio"]),
        source_test=grab("source_test"),
        target_test=grab("target_test"),
        notes=tuple(manifest.get("notes", [])),
    )


def split_dataset(
    pool: Sequence[Subject],
    train_fraction: float,
    label_ratio: float,
    seed: int,
) -> DatasetSplit:
    """Partition a mixed-domain subject pool for scarce-label adaptation.

    Each modality is shuffled independently and split train/test by
    train_fraction (floor rounding). Source training subjects are then
    split into labeled/unlabeled by label_ratio (floor rounding, minimum
    one labeled subject). Target training subjects are all unlabeled.
    Deterministic for a fixed seed.
    """
    pool = list(pool)
    if not pool:
        raise InvalidInputError("subject pool is empty")
    if not 0 < train_fraction <= 1:
        raise InvalidInputError("train_fraction must be in (0, 1]")
    if not 0 < label_ratio <= 1:
        raise InvalidInputError("label_ratio must be in (0, 1]")

    source = [s for s in pool if s.domain == "source"]
    target = [s for s in pool if s.domain == "target"]
    if not source:
        raise InvalidInputError("pool contains no source subjects")
    if not target:
        raise InvalidInputError("pool contains no target subjects")

    rng = np.random.default_rng(seed)
    notes: list[str] = []

    def train_test(subjects: list[Subject]) -> tuple[list[Subject], list[Subject]]:
        order = rng.permutation(len(subjects))
        n_train = max(1, int(np.floor(train_fraction * len(subjects)))) if subjects else 0
        train = [subjects[i] for i in order[:n_train]]
        test = [subjects[i] for i in order[n_train:]]
        return train, test

    source_train, source_test = train_test(source)
    target_train, target_test = train_test(target)

    n_l = int(np.floor(label_ratio * len(source_train)))
    if n_l == 0:
        n_l = 1
        notes.append(
            f"label_ratio {label_ratio} yields zero labeled subjects over "
            f"{len(source_train)} training subjects; clamped to one"
        )
        logger.warning(notes[-1])
    labeled = source_train[:n_l]
    unlabeled = source_train[n_l:]

    for s in labeled:
        if s.masks is None:
            raise InvalidInputError(f"subject {s.id} selected as labeled but carries no masks")

    return DatasetSplit(
        labeled_source=tuple(labeled),
        unlabeled_source=tuple(unlabeled),
        target=tuple(target_train),
        label_ratio=label_ratio,
        source_test=tuple(source_test),
        target_test=tuple(target_test),
        notes=tuple(notes),
    )


def labeled_slice_pool(
    split: DatasetSplit,
    pairs: Sequence[PairedSample] = (),
    use_cycle_labels: bool = True,
) -> list[tuple[ImageTensor, SegMask]]:
    """Supervised pool: labeled source slices plus, optionally, their cycle
    reconstructions carrying the original masks."""
    pool: list[tuple[ImageTensor, SegMask]] = []
    mask_by_slice: dict[str, SegMask] = {}
    for subject in split.labeled_source:
        assert subject.masks is not None
        for img, mask in zip(subject.slices, subject.masks):
            pool.append((img, mask))
            if img.slice_id is not None:
                mask_by_slice[img.slice_id] = mask
    if use_cycle_labels:
        for pair in pairs:
            if pair.pair_kind is PairKind.S2T2S_S2T and pair.slice_id in mask_by_slice:
                pool.append((pair.source_style, mask_by_slice[pair.slice_id]))
    return pool


def assemble_batch(
    split: DatasetSplit,
    pairs: Sequence[PairedSample],
    config: TrainingConfig,
    step_seed: int,
) -> tuple[list[tuple[ImageTensor, SegMask]], list[PairedSample]]:
    """Draw one training batch: labeled (image, mask) items and unlabeled pairs.

    Sampling is without replacement while the pool allows it, with
    replacement otherwise (logged, never an error). Deterministic for a
    fixed step_seed.
    """
    rng = np.random.default_rng(step_seed)

    sup_pool = labeled_slice_pool(split, pairs, config.use_cycle_labels)
    if not sup_pool:
        raise InvalidInputError("no labeled slices available for batch assembly")
    labeled_batch = _sample(sup_pool, config.batch_labeled, rng, "labeled")

    pair_batch: list[PairedSample] = []
    if config.batch_unlabeled > 0:
        if not pairs:
            raise InvalidInputError("unlabeled pairs requested but the pair pool is empty")
        pair_batch = _sample(list(pairs), config.batch_unlabeled, rng, "pair")

    return labeled_batch, pair_batch


def _sample(pool: list, count: int, rng: np.random.Generator, what: str) -> list:
    if count <= len(pool):
        idx = rng.choice(len(pool), size=count, replace=False)
    else:
        logger.debug("%s pool smaller than batch (%d < %d); sampling with replacement",
                     what, len(pool), count)
        idx = rng.choice(len(pool), size=count, replace=True)
    return [pool[i] for i in idx]
