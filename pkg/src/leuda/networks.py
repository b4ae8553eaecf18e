"""Segmentation backbone with multi-level auxiliary heads and the patch discriminator.

The segmenter is a U-Net whose decoder blocks are indexed from the output
(level 1 = final, full-resolution block). Each configured level gets a 1x1
convolution head whose logits are bilinearly upsampled to the input size, so
every level predicts in the same space. The discriminator is five stride-2
4x4 convolutions with channels (64, 128, 256, 512, 1) and LeakyReLU(0.2)
after every layer but the last, emitting a raw patch score grid.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageTensor, InvalidInputError, NUM_CLASSES

DISC_CHANNELS = (64, 128, 256, 512, 1)
DISC_KERNEL = 4
DISC_STRIDE = 2
DISC_PADDING = 1
DISC_LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class SegmenterConfig:
    depth: int = 4
    base_width: int = 16
    num_classes: int = NUM_CLASSES
    aux_levels: tuple[int, ...] = (1, 3)

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise InvalidInputError("depth must be >= 1")
        if self.base_width < 1:
            raise InvalidInputError("base_width must be >= 1")
        if self.num_classes < 2:
            raise InvalidInputError("need at least 2 classes")
        if not self.aux_levels:
            raise InvalidInputError("aux_levels must be non-empty")
        if any(not 1 <= lv <= self.depth for lv in self.aux_levels):
            raise InvalidInputError(
                f"aux_levels {self.aux_levels} outside valid decoder levels 1..{self.depth}"
            )
        if tuple(sorted(self.aux_levels)) != tuple(self.aux_levels):
            raise InvalidInputError("aux_levels must be sorted")


@dataclass
class MultiLevelOutput:
    """Per-level full-resolution logits; probabilities via softmax on demand."""

    logits: dict[int, torch.Tensor]

    def prob(self, level: int) -> torch.Tensor:
        return F.softmax(self.logits[level], dim=1)

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(sorted(self.logits))


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class UNetSegmenter(nn.Module):
    """U-Net with skip connections and per-level prediction heads."""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2**k for k in range(config.depth + 1)]

        self.encoders = nn.ModuleList()
        in_ch = 1
        for w in widths[:-1]:
            self.encoders.append(ConvBlock(in_ch, w))
            in_ch = w
        self.bottleneck = ConvBlock(widths[-2], widths[-1])
        self.pool = nn.MaxPool2d(2)

        # decoders[k] consumes the upsampled deeper feature concatenated with
        # the skip at depth k; decoder level = k + 1 (level 1 is decoders[0]).
        self.decoders = nn.ModuleList(
            ConvBlock(widths[k + 1] + widths[k], widths[k]) for k in range(config.depth)
        )
        self.heads = nn.ModuleDict(
            {str(lv): nn.Conv2d(widths[lv - 1], config.num_classes, 1) for lv in config.aux_levels}
        )

    def forward(self, x: torch.Tensor) -> MultiLevelOutput:
        h, w = x.shape[-2:]
        factor = 2**self.config.depth
        if h % factor or w % factor:
            raise InvalidInputError(f"input size {(h, w)} not divisible by {factor}")

        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)

        features: dict[int, torch.Tensor] = {}
        for k in reversed(range(self.config.depth)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.decoders[k](torch.cat([x, skips[k]], dim=1))
            features[k + 1] = x

        logits = {}
        for lv in self.config.aux_levels:
            out = self.heads[str(lv)](features[lv])
            if out.shape[-2:] != (h, w):
                out = F.interpolate(out, size=(h, w), mode="bilinear", align_corners=False)
            logits[lv] = out
        return MultiLevelOutput(logits)


class PatchDiscriminator(nn.Module):
    """Five-layer stride-2 convolutional critic over prediction maps."""

    def __init__(self, in_channels: int):
        super().__init__()
        if in_channels < 1:
            raise InvalidInputError("in_channels must be >= 1")
        layers: list[nn.Module] = []
        prev = in_channels
        for i, ch in enumerate(DISC_CHANNELS):
            layers.append(nn.Conv2d(prev, ch, DISC_KERNEL, DISC_STRIDE, DISC_PADDING))
            if i < len(DISC_CHANNELS) - 1:
                layers.append(nn.LeakyReLU(DISC_LEAKY_SLOPE, inplace=True))
            prev = ch
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if min(x.shape[-2:]) < 2 ** len(DISC_CHANNELS):
            raise InvalidInputError(
                f"discriminator input {tuple(x.shape[-2:])} smaller than "
                f"{2 ** len(DISC_CHANNELS)} per side"
            )
        return self.layers(x)


def _init_gan_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_segmenter(config: SegmenterConfig, seed: int = 0) -> UNetSegmenter:
    """Construct a segmenter with deterministic initialization per seed."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return UNetSegmenter(config)


def build_discriminator(in_channels: int, seed: int = 0) -> PatchDiscriminator:
    """Construct the fixed-architecture patch discriminator, seeded."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        disc = PatchDiscriminator(in_channels)
        _init_gan_weights(disc)
        return disc


def forward_multi_level(segmenter: UNetSegmenter, image: ImageTensor) -> MultiLevelOutput:
    """Run one image through the segmenter without gradient tracking."""
    was_training = segmenter.training
    segmenter.eval()
    try:
        with torch.no_grad():
            x = torch.from_numpy(np.array(image.data)).unsqueeze(0)
            return segmenter(x)
    finally:
        segmenter.train(was_training)


def describe(module: nn.Module) -> dict:
    """Architecture summary (conv layers, activations, parameter count) as JSON-ready dict."""
    layers = []
    for name, m in module.named_modules():
        if isinstance(m, nn.Conv2d):
            layers.append(
                {
                    "name": name,
                    "type": "Conv2d",
                    "in_channels": m.in_channels,
                    "out_channels": m.out_channels,
                    "kernel_size": list(m.kernel_size),
                    "stride": list(m.stride),
                    "padding": list(m.padding),
                }
            )
        elif isinstance(m, nn.LeakyReLU):
            layers.append({"name": name, "type": "LeakyReLU", "negative_slope": m.negative_slope})
        elif isinstance(m, (nn.ReLU, nn.GroupNorm, nn.InstanceNorm2d, nn.MaxPool2d)):
            layers.append({"name": name, "type": type(m).__name__})
    return {
        "class": type(module).__name__,
        "parameters": sum(p.numel() for p in module.parameters()),
        "layers": layers,
    }


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_params(module: nn.Module, path: str | Path, config: dict) -> None:
    """Write a named parameter archive with an embedded config hash."""
    torch.save(
        {"state_dict": module.state_dict(), "config": config, "config_hash": config_hash(config)},
        path,
    )


def load_params(module: nn.Module, path: str | Path) -> dict:
    """Load a parameter archive, verifying its embedded config hash."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if config_hash(payload["config"]) != payload["config_hash"]:
        raise InvalidInputError(f"config hash mismatch in archive {path}")
    module.load_state_dict(payload["state_dict"])
    return payload["config"]
