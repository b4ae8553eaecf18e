"""Subject-level volumetric Dice and average symmetric surface distance.

Volumes are stacks of 2D slices, shape (n_slices, H, W). Surfaces are
foreground voxels with at least one face-adjacent background neighbor,
counting out-of-volume as background. ASD is the mean of the two directed
mean nearest-surface distances between voxel centers, scaled by the voxel
spacing; it is not available when either surface is empty. Aggregation
reports across-subject means with population standard deviations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .core import InvalidInputError, NUM_CLASSES, Subject


def dice(pred: np.ndarray, gt: np.ndarray, cls: int) -> float:
    """2|P intersect G| / (|P| + |G|) for one class; 1.0 when both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"dice: shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == cls
    g = gt == cls
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def extract_surface(binary: np.ndarray) -> np.ndarray:
    """Boolean mask of foreground voxels with a face-adjacent background neighbor.

    Out-of-volume counts as background, so voxels on the volume boundary are
    surface voxels whenever they are foreground.
    """
    b = np.asarray(binary, dtype=bool)
    surface = np.zeros_like(b)
    interior = tuple(slice(1, -1) for _ in range(b.ndim))
    padded = np.pad(b, 1, constant_values=False)
    for axis in range(b.ndim):
        for shift in (-1, 1):
            neighbor = np.roll(padded, shift, axis=axis)[interior]
            surface |= b & ~neighbor
    return surface


def asd(
    pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, ...] = (1.0, 1.0, 1.0)
) -> float | None:
    """Average symmetric surface distance between two binary volumes.

    Mean of the two directed means of voxel-center nearest-surface
    distances, Euclidean under the given per-axis spacing. None when either
    surface is empty.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"asd: shape mismatch {pred.shape} vs {gt.shape}")
    if len(spacing) != pred.ndim or any(s <= 0 for s in spacing):
        raise InvalidInputError(f"spacing {spacing} does not fit volume of ndim {pred.ndim}")
    surf_p = np.argwhere(extract_surface(pred)).astype(np.float64)
    surf_g = np.argwhere(extract_surface(gt)).astype(np.float64)
    if len(surf_p) == 0 or len(surf_g) == 0:
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    surf_p *= scale
    surf_g *= scale
    d_pg, _ = cKDTree(surf_g).query(surf_p)
    d_gp, _ = cKDTree(surf_p).query(surf_g)
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


@dataclass(frozen=True)
class SubjectResult:
    """Per-class metrics for one subject; asd entries are None when undefined."""

    subject_id: str
    dice: dict[int, float]
    asd: dict[int, float | None]
    gt_present: dict[int, bool]
    pred_present: dict[int, bool]

    def mean_dice(self) -> float:
        return float(np.mean(list(self.dice.values())))

    def mean_asd(self) -> float | None:
        values = [v for v in self.asd.values() if v is not None]
        return float(np.mean(values)) if values else None


def compute_subject_result(
    subject_id: str,
    pred_volume: np.ndarray,
    gt_volume: np.ndarray,
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0),
    num_classes: int = NUM_CLASSES,
) -> SubjectResult:
    """Foreground-class Dice and ASD between label volumes of one subject."""
    if pred_volume.shape != gt_volume.shape:
        raise InvalidInputError(
            f"volume shape mismatch {pred_volume.shape} vs {gt_volume.shape}"
        )
    dice_by_class: dict[int, float] = {}
    asd_by_class: dict[int, float | None] = {}
    gt_present: dict[int, bool] = {}
    pred_present: dict[int, bool] = {}
    for cls in range(1, num_classes):
        dice_by_class[cls] = dice(pred_volume, gt_volume, cls)
        asd_by_class[cls] = asd(pred_volume == cls, gt_volume == cls, spacing)
        gt_present[cls] = bool((gt_volume == cls).any())
        pred_present[cls] = bool((pred_volume == cls).any())
    return SubjectResult(subject_id, dice_by_class, asd_by_class, gt_present, pred_present)


def predict_subject(
    student: torch.nn.Module,
    subject: Subject,
    translator: torch.nn.Module | None = None,
    use_translation: bool = True,
    batch: int = 16,
) -> np.ndarray:
    """Label volume for one subject: optional translation, then level-1 argmax."""
    if use_translation and translator is None:
        raise InvalidInputError("test-time protocol requires a trained translator")
    slices = []
    with torch.no_grad():
        for i in range(0, subject.n_slices, batch):
            x = torch.from_numpy(np.stack([img.data for img in subject.slices[i : i + batch]]))
            if use_translation:
                assert translator is not None
                x = translator(x)
            logits = student(x).logits[1]
            slices.append(logits.argmax(dim=1).numpy().astype(np.int64))
    return np.concatenate(slices, axis=0)


def evaluate_target_subject(
    student: torch.nn.Module,
    subject: Subject,
    translator: torch.nn.Module | None = None,
    use_translation: bool = True,
    spacing: tuple[float, ...] = (1.0, 1.0, 1.0),
    num_classes: int = NUM_CLASSES,
) -> SubjectResult:
    """Translate each slice to source appearance (per protocol), segment, score."""
    if subject.masks is None:
        raise InvalidInputError(f"subject {subject.id} has no ground truth")
    pred = predict_subject(student, subject, translator, use_translation)
    gt = np.stack([m.labels for m in subject.masks])
    return compute_subject_result(subject.id, pred, gt, spacing, num_classes)


@dataclass(frozen=True)
class ClassStat:
    mean: float
    std: float
    n: int

    def formatted(self, decimals: int = 3) -> str:
        return f"{self.mean:.{decimals}f}({self.std:.{decimals}f})"


def _stat(values: list[float]) -> ClassStat:
    arr = np.asarray(values, dtype=np.float64)
    return ClassStat(float(arr.mean()), float(arr.std()), len(values))


@dataclass(frozen=True)
class AggregateResult:
    """Across-subject statistics per class and overall.

    The overall row averages each subject's foreground-class mean (for ASD,
    the mean over that subject's available classes); subjects with no
    available ASD are excluded from the overall ASD with their count
    reflected in n.
    """

    dice_per_class: dict[int, ClassStat]
    asd_per_class: dict[int, ClassStat | None]
    dice_overall: ClassStat
    asd_overall: ClassStat | None
    n_subjects: int
    per_subject: tuple[dict, ...]

    def table(self) -> str:
        lines = [f"{'class':<10}{'Dice':<16}{'ASD':<16}"]
        for cls in sorted(self.dice_per_class):
            asd_stat = self.asd_per_class[cls]
            lines.append(
                f"{cls:<10}{self.dice_per_class[cls].formatted():<16}"
                f"{'N/A' if asd_stat is None else asd_stat.formatted():<16}"
            )
        lines.append(
            f"{'average':<10}{self.dice_overall.formatted():<16}"
            f"{'N/A' if self.asd_overall is None else self.asd_overall.formatted():<16}"
        )
        return "\n".join(lines)

    def to_dict(self) -> dict:
        def stat_dict(stat: ClassStat | None) -> dict | None:
            return None if stat is None else {"mean": stat.mean, "std": stat.std, "n": stat.n}

        return {
            "dice_per_class": {str(c): stat_dict(s) for c, s in self.dice_per_class.items()},
            "asd_per_class": {str(c): stat_dict(s) for c, s in self.asd_per_class.items()},
            "dice_overall": stat_dict(self.dice_overall),
            "asd_overall": stat_dict(self.asd_overall),
            "n_subjects": self.n_subjects,
            "per_subject": list(self.per_subject),
        }


def aggregate(results: list[SubjectResult], num_classes: int = NUM_CLASSES) -> AggregateResult:
    """Across-subject mean and population std, excluding unavailable ASD entries."""
    if not results:
        raise InvalidInputError("no subject results to aggregate")
    dice_per_class: dict[int, ClassStat] = {}
    asd_per_class: dict[int, ClassStat | None] = {}
    for cls in range(1, num_classes):
        dice_per_class[cls] = _stat([r.dice[cls] for r in results])
        available = [r.asd[cls] for r in results if r.asd[cls] is not None]
        asd_per_class[cls] = _stat(available) if available else None

    subject_asd = [r.mean_asd() for r in results]
    available_asd = [v for v in subject_asd if v is not None]
    per_subject = tuple(
        {
            "subject_id": r.subject_id,
            "dice_mean": r.mean_dice(),
            "asd_mean": r.mean_asd(),
        }
        for r in results
    )
    return AggregateResult(
        dice_per_class=dice_per_class,
        asd_per_class=asd_per_class,
        dice_overall=_stat([r.mean_dice() for r in results]),
        asd_overall=_stat(available_asd) if available_asd else None,
        n_subjects=len(results),
        per_subject=per_subject,
    )
