"""Synthetic two-modality phantom generator plus preprocessing and perturbation.

Phantom slices contain four foreground structures (two free ellipses, one
disc, one annulus wrapped around the disc) rendered with modality-specific
appearance: class intensity lookup, optional rank-order inversion, gamma,
a smooth multiplicative bias field, and additive noise. The two modalities
share geometry statistics but never anatomy (subjects are unpaired).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .core import ImageKind, ImageTensor, InvalidInputError, SegMask, Subject

NUM_FOREGROUND = 4

DEFAULT_LUT = (0.20, 0.55, 0.70, 0.90, 0.40)


@dataclass(frozen=True)
class ModalityAppearance:
    """Rendering recipe for one modality."""

    intensity_lut: tuple[float, ...]
    gamma: float = 1.0
    invert: bool = False
    bias_amplitude: float = 0.1
    noise_sigma: float = 0.03

    def __post_init__(self) -> None:
        if len(self.intensity_lut) != NUM_FOREGROUND + 1:
            raise InvalidInputError("intensity_lut needs one entry per class")
        if self.gamma <= 0:
            raise InvalidInputError("gamma must be positive")
        if self.bias_amplitude < 0 or self.noise_sigma < 0:
            raise InvalidInputError("appearance amplitudes must be non-negative")


@dataclass(frozen=True)
class PhantomSpec:
    """Generator parameters for one dataset (both modalities).

    Axis ranges are fractions of the image side. Structures are drawn in a
    fixed precedence order (ellipse A, ellipse B, annulus, disc last), so
    overlaps resolve deterministically.
    """

    n_subjects: int = 20
    slices_per_subject: int = 4
    image_size: int = 64
    ellipse_a_center: tuple[float, float] = (0.32, 0.30)
    ellipse_b_center: tuple[float, float] = (0.30, 0.70)
    disc_center: tuple[float, float] = (0.66, 0.52)
    center_jitter: float = 0.05
    ellipse_axis_range: tuple[float, float] = (0.09, 0.15)
    disc_axis_range: tuple[float, float] = (0.10, 0.15)
    annulus_thickness_range: tuple[float, float] = (0.05, 0.08)
    slice_profile_range: tuple[float, float] = (0.72, 1.0)
    appearance_a: ModalityAppearance = field(
        default_factory=lambda: ModalityAppearance(DEFAULT_LUT)
    )
    appearance_b: ModalityAppearance = field(
        default_factory=lambda: ModalityAppearance(
            DEFAULT_LUT, gamma=0.85, invert=True, bias_amplitude=0.25, noise_sigma=0.05
        )
    )
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_subjects < 1 or self.slices_per_subject < 1:
            raise InvalidInputError("subject and slice counts must be positive")
        if self.image_size < 16:
            raise InvalidInputError("image_size must be at least 16")
        for rng_pair in (
            self.ellipse_axis_range,
            self.disc_axis_range,
            self.annulus_thickness_range,
            self.slice_profile_range,
        ):
            lo, hi = rng_pair
            if not 0 < lo <= hi:
                raise InvalidInputError(f"degenerate range {rng_pair}")
        if any(s <= 0 for s in self.spacing):
            raise InvalidInputError("spacing must be positive")


@dataclass(frozen=True)
class AugmentParams:
    """Symmetric-about-identity affine augmentation ranges plus noise sigma."""

    rotation_deg: float = 15.0
    scale_delta: float = 0.1
    shear_deg: float = 8.0
    sigma: float = 0.1

    def __post_init__(self) -> None:
        if min(self.rotation_deg, self.scale_delta, self.shear_deg, self.sigma) < 0:
            raise InvalidInputError("augment ranges must be non-negative")


def _ellipse_mask(size: int, cy: float, cx: float, ay: float, ax: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def _subject_geometry(spec: PhantomSpec, rng: np.random.Generator) -> dict:
    """Draw one subject's anatomy: structure centers, axes, slice profile."""
    size = spec.image_size

    def center(base: tuple[float, float]) -> tuple[float, float]:
        jitter = rng.uniform(-spec.center_jitter, spec.center_jitter, size=2)
        return ((base[0] + jitter[0]) * size, (base[1] + jitter[1]) * size)

    def axes(lo_hi: tuple[float, float]) -> tuple[float, float]:
        return (rng.uniform(*lo_hi) * size, rng.uniform(*lo_hi) * size)

    return {
        "a_center": center(spec.ellipse_a_center),
        "a_axes": axes(spec.ellipse_axis_range),
        "b_center": center(spec.ellipse_b_center),
        "b_axes": axes(spec.ellipse_axis_range),
        "disc_center": center(spec.disc_center),
        "disc_axes": axes(spec.disc_axis_range),
        "annulus_thickness": rng.uniform(*spec.annulus_thickness_range) * size,
        "profile": rng.uniform(*spec.slice_profile_range, size=spec.slices_per_subject),
    }


def _render_mask(spec: PhantomSpec, geo: dict, slice_idx: int) -> np.ndarray:
    size = spec.image_size
    scale = geo["profile"][slice_idx]
    labels = np.zeros((size, size), dtype=np.int64)

    ay, ax = geo["a_axes"]
    labels[_ellipse_mask(size, *geo["a_center"], ay * scale, ax * scale)] = 1
    by, bx = geo["b_axes"]
    labels[_ellipse_mask(size, *geo["b_center"], by * scale, bx * scale)] = 2
    dy, dx = geo["disc_axes"]
    th = geo["annulus_thickness"] * scale
    outer = _ellipse_mask(size, *geo["disc_center"], dy * scale + th, dx * scale + th)
    labels[outer] = 4
    labels[_ellipse_mask(size, *geo["disc_center"], dy * scale, dx * scale)] = 3
    return labels


def _bias_field(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.standard_normal((4, 4))
    smooth = ndimage.zoom(coarse, size / 4, order=3)[:size, :size]
    smooth = smooth / max(np.abs(smooth).max(), 1e-8)
    return 1.0 + amplitude * smooth


def _render_intensity(
    labels: np.ndarray, app: ModalityAppearance, rng: np.random.Generator
) -> np.ndarray:
    lut = np.asarray(app.intensity_lut, dtype=np.float64)
    if app.invert:
        lut = lut.min() + lut.max() - lut
    img = lut[labels]
    img = np.clip(img, 1e-4, 1.0) ** app.gamma
    img = img * _bias_field(labels.shape[0], app.bias_amplitude, rng)
    img = img + rng.normal(0.0, app.noise_sigma, size=img.shape)
    return img


def zscore_normalize(volume: np.ndarray) -> np.ndarray:
    """Shift/scale a volume to zero mean, unit std. Errors on constant input."""
    volume = np.asarray(volume, dtype=np.float64)
    std = volume.std()
    if std < 1e-12:
        raise InvalidInputError("volume has zero variance; cannot normalize")
    return ((volume - volume.mean()) / std).astype(np.float32)


def crop_center(sl: np.ndarray, out_size: int, center: tuple[int, int] | None = None) -> np.ndarray:
    """Extract an out_size x out_size window around a centroid (default: image center)."""
    sl = np.asarray(sl)
    h, w = sl.shape[-2:]
    if out_size > min(h, w):
        raise InvalidInputError(f"crop size {out_size} exceeds image size {(h, w)}")
    cy, cx = center if center is not None else (h // 2, w // 2)
    y0 = int(np.clip(cy - out_size // 2, 0, h - out_size))
    x0 = int(np.clip(cx - out_size // 2, 0, w - out_size))
    return sl[..., y0 : y0 + out_size, x0 : x0 + out_size]


def _affine_matrix(params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    theta = np.deg2rad(rng.uniform(-params.rotation_deg, params.rotation_deg))
    scale = 1.0 + rng.uniform(-params.scale_delta, params.scale_delta)
    shear = np.deg2rad(rng.uniform(-params.shear_deg, params.shear_deg))
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shr = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    return scale * rot @ shr


def augment(
    image: ImageTensor, mask: SegMask, params: AugmentParams, seed: int
) -> tuple[ImageTensor, SegMask]:
    """Apply one random affine (rotation, scale, shear) to image and mask alike.

    The image is resampled bilinearly, the mask nearest-neighbor, so no new
    label values appear. Deterministic per seed.
    """
    if (image.height, image.width) != (mask.height, mask.width):
        raise InvalidInputError("image and mask must be aligned")
    rng = np.random.default_rng(seed)
    mat = _affine_matrix(params, rng)
    center = np.array([(image.height - 1) / 2.0, (image.width - 1) / 2.0])
    # affine_transform maps output coords through the matrix, so pass the inverse.
    inv = np.linalg.inv(mat)
    offset = center - inv @ center
    img_out = ndimage.affine_transform(
        image.data[0].astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0
    )
    mask_out = ndimage.affine_transform(
        mask.labels, inv, offset=offset, order=0, mode="constant", cval=0
    )
    return (
        ImageTensor(img_out[None].astype(np.float32), image.kind, image.slice_id),
        SegMask(mask_out.astype(np.int64), mask.num_classes),
    )


def perturb(image: ImageTensor, sigma: float, seed: int) -> ImageTensor:
    """Add i.i.d. Gaussian pixel noise. sigma=0 returns the input unchanged."""
    if sigma < 0:
        raise InvalidInputError("sigma must be non-negative")
    if sigma == 0:
        return image
    rng = np.random.default_rng(seed)
    noisy = image.data + rng.normal(0.0, sigma, size=image.data.shape).astype(np.float32)
    return ImageTensor(noisy, image.kind, image.slice_id)


def _generate_modality(
    spec: PhantomSpec,
    app: ModalityAppearance,
    modality: str,
    domain: str,
    kind: ImageKind,
    seed_seq: np.random.SeedSequence,
) -> list[Subject]:
    subjects = []
    for child in seed_seq.spawn(spec.n_subjects):
        rng = np.random.default_rng(child)
        sid = f"{modality}{len(subjects):03d}"
        geo = _subject_geometry(spec, rng)
        masks = [_render_mask(spec, geo, k) for k in range(spec.slices_per_subject)]
        raw = np.stack([_render_intensity(m, app, rng) for m in masks])
        norm = zscore_normalize(raw)
        slices = tuple(
            ImageTensor(norm[k][None], kind, slice_id=f"{sid}/{k:03d}")
            for k in range(spec.slices_per_subject)
        )
        subjects.append(
            Subject(
                id=sid,
                slices=slices,
                masks=tuple(SegMask(m) for m in masks),
                domain=domain,
            )
        )
    return subjects


def generate_phantoms(spec: PhantomSpec) -> tuple[list[Subject], list[Subject]]:
    """Generate unpaired source (modality a) and target (modality b) subjects.

    Geometry draws are independent per subject and per modality; every slice
    carries a ground-truth mask; volumes are z-normalized. Deterministic per
    spec.seed.
    """
    root = np.random.SeedSequence(spec.seed)
    a_seq, b_seq = root.spawn(2)
    source = _generate_modality(spec, spec.appearance_a, "a", "source", ImageKind.S, a_seq)
    target = _generate_modality(spec, spec.appearance_b, "b", "target", ImageKind.T, b_seq)
    return source, target


def retag_direction(
    subjects_a: Sequence[Subject], subjects_b: Sequence[Subject], direction: str
) -> tuple[list[Subject], list[Subject]]:
    """Assign source/target roles per translation direction (a2b or b2a)."""
    if direction not in ("a2b", "b2a"):
        raise InvalidInputError(f"direction must be a2b or b2a, got {direction!r}")
    src, tgt = (subjects_a, subjects_b) if direction == "a2b" else (subjects_b, subjects_a)

    def retag(subs: Sequence[Subject], domain: str, kind: ImageKind) -> list[Subject]:
        return [
            replace(
                s,
                domain=domain,
                slices=tuple(img.with_kind(kind) for img in s.slices),
            )
            for s in subs
        ]

    return retag(src, "source", ImageKind.S), retag(tgt, "target", ImageKind.T)


def save_dataset(
    path: str | Path,
    subjects: Sequence[Subject],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    num_classes: int = NUM_FOREGROUND + 1,
) -> None:
    """Persist subjects as per-subject npz arrays plus a JSON index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {"spacing": list(spacing), "num_classes": num_classes, "subjects": []}
    for s in subjects:
        images = np.stack([sl.data for sl in s.slices])
        payload = {"images": images}
        if s.masks is not None:
            payload["masks"] = np.stack([m.labels for m in s.masks])
        np.savez_compressed(path / f"{s.id}.npz", **payload)
        index["subjects"].append(
            {
                "id": s.id,
                "domain": s.domain,
                "file": f"{s.id}.npz",
                "shape": list(images.shape),
                "dtype": str(images.dtype),
                "has_masks": s.masks is not None,
            }
        )
    (path / "index.json").write_text(json.dumps(index, indent=2))


def load_dataset(path: str | Path) -> tuple[list[Subject], tuple[float, float, float]]:
    """Load a dataset directory written by save_dataset."""
    path = Path(path)
    index = json.loads((path / "index.json").read_text())
    num_classes = index.get("num_classes", NUM_FOREGROUND + 1)
    subjects = []
    for entry in index["subjects"]:
        with np.load(path / entry["file"]) as data:
            images = data["images"]
            masks = data["masks"] if entry["has_masks"] else None
        kind = ImageKind.S if entry["domain"] == "source" else ImageKind.T
        slices = tuple(
            ImageTensor(images[k], kind, slice_id=f"{entry['id']}/{k:03d}")
            for k in range(images.shape[0])
        )
        subjects.append(
            Subject(
                id=entry["id"],
                slices=slices,
                masks=None
                if masks is None
                else tuple(SegMask(masks[k], num_classes) for k in range(masks.shape[0])),
                domain=entry["domain"],
            )
        )
    return subjects, tuple(index["spacing"])
