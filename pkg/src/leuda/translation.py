"""Unpaired bidirectional translation and materialization of the synthetic domains.

Stage 1 trains two generators (g_s: target to source appearance, g_t: the
reverse) against two patch discriminators with adversarial plus cycle
reconstruction objectives. Afterwards synthesize_domains runs every training
slice through both directions, yielding the source-like and target-like
image families and the four anatomy-matched pair kinds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import (
    DatasetSplit,
    ImageKind,
    ImageTensor,
    InvalidInputError,
    PairKind,
    PairedSample,
    SegMask,
    Subject,
)
from .networks import _init_gan_weights, build_discriminator, load_params, save_params

logger = logging.getLogger(__name__)

LOG_PROB_FLOOR = 1e-7


class TrainingDivergedError(RuntimeError):
    """Translation training produced non-finite losses."""


@dataclass(frozen=True)
class TranslationConfig:
    epochs: int = 8
    batch_size: int = 4
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_cyc: float = 10.0
    lambda_identity: float = 0.0
    variant: str = "least_squares"
    width: int = 16
    n_res: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be positive")
        if self.variant not in ("log", "least_squares"):
            raise InvalidInputError(f"unknown GAN variant {self.variant!r}")
        if min(self.lr, self.lambda_cyc, self.lambda_identity) < 0:
            raise InvalidInputError("rates and loss weights must be non-negative")


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class ResidualGenerator(nn.Module):
    """Small residual encoder-decoder predicting an additive appearance change.

    The final convolution is zero-initialized, so a freshly built generator
    is exactly the identity map.
    """

    def __init__(self, width: int = 16, n_res: int = 2):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(1, w, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * w),
            nn.ReLU(inplace=True),
            *[ResidualBlock(4 * w) for _ in range(n_res)],
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(4 * w, 2 * w, 3, padding=1),
            nn.InstanceNorm2d(2 * w),
            nn.ReLU(inplace=True),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            nn.Conv2d(2 * w, w, 3, padding=1),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, 1, 7, padding=3, padding_mode="reflect"),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % 4 or x.shape[-1] % 4:
            raise InvalidInputError(f"generator input size {tuple(x.shape[-2:])} not divisible by 4")
        return x + self.net(x)


def build_generator(width: int = 16, n_res: int = 2, seed: int = 0) -> ResidualGenerator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = ResidualGenerator(width, n_res)
        _init_gan_weights(gen)
    final = gen.net[-1]
    nn.init.zeros_(final.weight)
    nn.init.zeros_(final.bias)
    return gen


@dataclass
class TranslatorPair:
    """Both translators, their discriminators, and the stage-1 training log."""

    g_s: nn.Module
    g_t: nn.Module
    d_s: nn.Module
    d_t: nn.Module
    log: list[dict] = field(default_factory=list)


def translation_gan_losses(
    d_real_out: torch.Tensor, d_fake_out: torch.Tensor, variant: str
) -> tuple[torch.Tensor, torch.Tensor]:
    """Adversarial losses for translation.

    `log` expects post-sigmoid probabilities (clamped away from 0/1, never
    NaN); `least_squares` expects raw scores. The generator term is
    non-saturating in the log variant.
    """
    if variant == "log":
        with torch.no_grad():
            needs_clamp = bool(
                (d_real_out.min() < LOG_PROB_FLOOR) | (d_fake_out.max() > 1 - LOG_PROB_FLOOR)
            )
        if needs_clamp:
            logger.debug("clamping discriminator probabilities to [%g, %g]",
                         LOG_PROB_FLOOR, 1 - LOG_PROB_FLOOR)
        real = d_real_out.clamp(LOG_PROB_FLOOR, 1 - LOG_PROB_FLOOR)
        fake = d_fake_out.clamp(LOG_PROB_FLOOR, 1 - LOG_PROB_FLOOR)
        d_loss = -real.log().mean() - (1 - fake).log().mean()
        g_loss = -fake.log().mean()
    elif variant == "least_squares":
        d_loss = (d_real_out - 1.0).pow(2).mean() + d_fake_out.pow(2).mean()
        g_loss = (d_fake_out - 1.0).pow(2).mean()
    else:
        raise InvalidInputError(f"unknown GAN variant {variant!r}")
    return d_loss, g_loss


def cycle_loss(x: torch.Tensor | ImageTensor, x_rec: torch.Tensor | ImageTensor) -> torch.Tensor:
    """Mean absolute per-pixel reconstruction error."""
    if isinstance(x, ImageTensor):
        x = torch.from_numpy(np.array(x.data))
    if isinstance(x_rec, ImageTensor):
        x_rec = torch.from_numpy(np.array(x_rec.data))
    if x.shape != x_rec.shape:
        raise InvalidInputError(f"cycle_loss: shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    return (x - x_rec).abs().mean()


def _training_slices(subjects: tuple[Subject, ...]) -> list[ImageTensor]:
    return [img for s in subjects for img in s.slices]


def _stack(images: list[ImageTensor], idx: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.stack([images[i].data for i in idx]))


def _set_requires_grad(modules: list[nn.Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad = flag


def _d_out(disc: nn.Module, x: torch.Tensor, variant: str) -> torch.Tensor:
    out = disc(x)
    return torch.sigmoid(out) if variant == "log" else out


def train_dcam(
    split: DatasetSplit, config: TranslationConfig, out_dir: str | Path | None = None
) -> TranslatorPair:
    """Train the bidirectional translators on all training slices, unlabeled.

    Deterministic per config.seed. On divergence the last finite state is
    checkpointed (when out_dir is given) before raising.
    """
    source = _training_slices(split.labeled_source + split.unlabeled_source)
    target = _training_slices(split.target)
    if not source or not target:
        raise InvalidInputError("stage 1 needs source and target training slices")

    g_s = build_generator(config.width, config.n_res, seed=config.seed)
    g_t = build_generator(config.width, config.n_res, seed=config.seed + 1)
    d_s = build_discriminator(1, seed=config.seed + 2)
    d_t = build_discriminator(1, seed=config.seed + 3)
    pair = TranslatorPair(g_s, g_t, d_s, d_t)

    opt_g = torch.optim.Adam(
        list(g_s.parameters()) + list(g_t.parameters()), lr=config.lr, betas=config.betas
    )
    opt_d = torch.optim.Adam(
        list(d_s.parameters()) + list(d_t.parameters()), lr=config.lr, betas=config.betas
    )

    rng = np.random.default_rng(config.seed)
    b = config.batch_size
    steps = max(len(source), len(target)) // b
    if steps == 0:
        raise InvalidInputError("batch_size exceeds both slice pools")
    last_finite: dict | None = None

    for epoch in range(config.epochs):
        order_s = rng.permutation(len(source))
        order_t = rng.permutation(len(target))
        sums = {"l_gan_s": 0.0, "l_gan_t": 0.0, "l_cyc": 0.0}
        for step in range(steps):
            idx_s = order_s[(step * b + np.arange(b)) % len(source)]
            idx_t = order_t[(step * b + np.arange(b)) % len(target)]
            real_s, real_t = _stack(source, idx_s), _stack(target, idx_t)

            fake_s = g_s(real_t)
            fake_t = g_t(real_s)
            rec_s = g_s(fake_t)
            rec_t = g_t(fake_s)

            _set_requires_grad([d_s, d_t], False)
            _, g_loss_s = translation_gan_losses(
                _d_out(d_s, real_s, config.variant), _d_out(d_s, fake_s, config.variant),
                config.variant,
            )
            _, g_loss_t = translation_gan_losses(
                _d_out(d_t, real_t, config.variant), _d_out(d_t, fake_t, config.variant),
                config.variant,
            )
            cyc = cycle_loss(real_s, rec_s) + cycle_loss(real_t, rec_t)
            g_total = g_loss_s + g_loss_t + config.lambda_cyc * cyc
            if config.lambda_identity > 0:
                g_total = g_total + config.lambda_identity * (
                    cycle_loss(real_s, g_s(real_s)) + cycle_loss(real_t, g_t(real_t))
                )
            opt_g.zero_grad()
            g_total.backward()
            opt_g.step()
            _set_requires_grad([d_s, d_t], True)

            d_loss_s, _ = translation_gan_losses(
                _d_out(d_s, real_s, config.variant),
                _d_out(d_s, fake_s.detach(), config.variant),
                config.variant,
            )
            d_loss_t, _ = translation_gan_losses(
                _d_out(d_t, real_t, config.variant),
                _d_out(d_t, fake_t.detach(), config.variant),
                config.variant,
            )
            d_total = d_loss_s + d_loss_t
            opt_d.zero_grad()
            d_total.backward()
            opt_d.step()

            values = {
                "l_gan_s": float(g_loss_s.detach()),
                "l_gan_t": float(g_loss_t.detach()),
                "l_cyc": float(cyc.detach()) / 2.0,
            }
            if not all(np.isfinite(v) for v in values.values()) or not np.isfinite(
                float(d_total.detach())
            ):
                if out_dir is not None and last_finite is not None:
                    path = Path(out_dir) / "dcam_diverged.pt"
                    torch.save(last_finite, path)
                    raise TrainingDivergedError(
                        f"non-finite translation loss at epoch {epoch} step {step}; "
                        f"last finite state saved to {path}"
                    )
                raise TrainingDivergedError(
                    f"non-finite translation loss at epoch {epoch} step {step}"
                )
            for k, v in values.items():
                sums[k] += v
        last_finite = {
            "g_s": {k: v.clone() for k, v in g_s.state_dict().items()},
            "g_t": {k: v.clone() for k, v in g_t.state_dict().items()},
            "epoch": epoch,
        }
        pair.log.append({"epoch": epoch, **{k: v / steps for k, v in sums.items()}})

    first, final = pair.log[0]["l_cyc"], pair.log[-1]["l_cyc"]
    if config.epochs > 1 and final > 0.5 * first:
        logger.warning("cycle loss fell to %.4f from %.4f, less than the expected halving",
                       final, first)
    return pair


@dataclass(frozen=True)
class SyntheticDomains:
    """The translated/reconstructed image families and the pair pool.

    labels maps slice ids of labeled source slices to their masks; the same
    mask annotates the slice's translated and reconstructed copies.
    """

    source_like: tuple[ImageTensor, ...]
    target_like: tuple[ImageTensor, ...]
    pairs: tuple[PairedSample, ...]
    labels: dict[str, SegMask]


def _translate(gen: nn.Module, images: list[ImageTensor], kind: ImageKind,
               batch: int = 32) -> list[ImageTensor]:
    out: list[ImageTensor] = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            chunk = images[i : i + batch]
            x = torch.from_numpy(np.stack([img.data for img in chunk]))
            y = gen(x).numpy()
            out.extend(
                ImageTensor(y[j], kind, slice_id=img.slice_id) for j, img in enumerate(chunk)
            )
    return out


def synthesize_domains(translators: TranslatorPair, split: DatasetSplit) -> SyntheticDomains:
    """Materialize both synthetic domains and all four pair kinds.

    Pure given (translators, split): repeated calls produce bit-identical
    arrays. Labeled source masks are carried over to the synthetic copies of
    their slices.
    """
    translators.g_s.eval()
    translators.g_t.eval()
    source = _training_slices(split.labeled_source + split.unlabeled_source)
    target = _training_slices(split.target)

    s2t = _translate(translators.g_t, source, ImageKind.S2T)
    s2t2s = _translate(translators.g_s, s2t, ImageKind.S2T2S)
    t2s = _translate(translators.g_s, target, ImageKind.T2S)
    t2s2t = _translate(translators.g_t, t2s, ImageKind.T2S2T)

    pairs: list[PairedSample] = []
    for x_s, x_s2t, x_s2t2s in zip(source, s2t, s2t2s):
        pairs.append(PairedSample(x_s, x_s2t, PairKind.S_S2T))
        pairs.append(PairedSample(x_s2t2s, x_s2t, PairKind.S2T2S_S2T))
    for x_t, x_t2s, x_t2s2t in zip(target, t2s, t2s2t):
        pairs.append(PairedSample(x_t2s, x_t, PairKind.T2S_T))
        pairs.append(PairedSample(x_t2s, x_t2s2t, PairKind.T2S_T2S2T))

    labels: dict[str, SegMask] = {}
    for subject in split.labeled_source:
        assert subject.masks is not None
        for img, mask in zip(subject.slices, subject.masks):
            if img.slice_id is not None:
                labels[img.slice_id] = mask

    return SyntheticDomains(
        source_like=tuple(t2s) + tuple(s2t2s),
        target_like=tuple(s2t) + tuple(t2s2t),
        pairs=tuple(pairs),
        labels=labels,
    )


def save_translators(pair: TranslatorPair, path: str | Path, config: TranslationConfig) -> None:
    cfg = {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "lr": config.lr,
        "betas": list(config.betas),
        "lambda_cyc": config.lambda_cyc,
        "lambda_identity": config.lambda_identity,
        "variant": config.variant,
        "width": config.width,
        "n_res": config.n_res,
        "seed": config.seed,
    }
    bundle = nn.ModuleDict(
        {"g_s": pair.g_s, "g_t": pair.g_t, "d_s": pair.d_s, "d_t": pair.d_t}
    )
    save_params(bundle, path, cfg)


def load_translators(path: str | Path) -> tuple[TranslatorPair, TranslationConfig]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg_dict = dict(payload["config"])
    cfg_dict["betas"] = tuple(cfg_dict["betas"])
    config = TranslationConfig(**cfg_dict)
    pair = TranslatorPair(
        g_s=build_generator(config.width, config.n_res, seed=config.seed),
        g_t=build_generator(config.width, config.n_res, seed=config.seed + 1),
        d_s=build_discriminator(1, seed=config.seed + 2),
        d_t=build_discriminator(1, seed=config.seed + 3),
    )
    bundle = nn.ModuleDict(
        {"g_s": pair.g_s, "g_t": pair.g_t, "d_s": pair.d_s, "d_t": pair.d_t}
    )
    load_params(bundle, path)
    return pair, config
