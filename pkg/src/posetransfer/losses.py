"""Training objectives: reconstruction, perceptual, style and LSGAN terms.

The perceptual/style terms run on a frozen feature extractor. The default
extractor is a seeded random conv stack so the whole pipeline is
self-contained and deterministic; a pretrained backbone can be dropped in
through the same interface for full-scale runs.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError, NumericError


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the objective terms."""

    gan: float = 1.0
    perceptual: float = 5.0
    recon: float = 10.0
    style: float = 5.0


class FeatureExtractor(nn.Module):
    """Frozen multi-stage feature pyramid; forward returns one map per stage."""

    def __init__(self, stages, provenance: str):
        super().__init__()
        self.stages = nn.ModuleList(stages)
        self.provenance = provenance
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    @classmethod
    def fixed_random(cls, seed: int = 7, in_channels: int = 3,
                     widths=(16, 32, 64, 128)) -> "FeatureExtractor":
        """Conv stack with generator-seeded random weights; frozen."""
        g = torch.Generator().manual_seed(int(seed))
        stages = []
        c = in_channels
        for w in widths:
            conv = nn.Conv2d(c, w, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                fan_in = c * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) / math.sqrt(fan_in))
                conv.bias.zero_()
            stages.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            c = w
        return cls(stages, provenance=f"fixed-random(seed={seed})")

    @classmethod
    def identity(cls) -> "FeatureExtractor":
        """Single pass-through stage: perceptual distance degenerates to pixel L1."""
        return cls([nn.Identity()], provenance="identity")

    @classmethod
    def from_provenance(cls, tag: str) -> "FeatureExtractor":
        if tag == "identity":
            return cls.identity()
        m = re.fullmatch(r"fixed-random\(seed=(\d+)\)", tag)
        if m:
            return cls.fixed_random(seed=int(m.group(1)))
        raise ConfigError(
            f"unknown extractor provenance {tag!r}; use 'identity', "
            "'fixed-random(seed=N)', or construct FeatureExtractor directly"
        )


def recon_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute error."""
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over extractor stages of the mean absolute feature difference."""
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    fa = extractor(a)
    fb = extractor(b)
    total = a.new_zeros(())
    for la, lb in zip(fa, fb):
        total = total + (la - lb).abs().mean()
    return total


def gram(feat: torch.Tensor) -> torch.Tensor:
    """Channel Gram matrix G_ij = (1/CHW) * sum_hw F_i F_j; batched or single."""
    single = feat.dim() == 3
    if single:
        feat = feat.unsqueeze(0)
    if feat.dim() != 4:
        raise DimensionError(f"expected (B, C, H, W) or (C, H, W), got {tuple(feat.shape)}")
    b, c, h, w = feat.shape
    flat = feat.reshape(b, c, h * w)
    g = torch.bmm(flat, flat.transpose(1, 2)) / (c * h * w)
    return g[0] if single else g


def style_loss(a: torch.Tensor, b: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Per-stage squared Frobenius Gram distance, normalized by C*H*W."""
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(())
    for la, lb in zip(extractor(a), extractor(b)):
        _, c, h, w = la.shape
        diff = gram(la) - gram(lb)
        total = total + diff.pow(2).sum(dim=(-2, -1)).mean() / (c * h * w)
    return total


class Discriminator(nn.Module):
    """Conditional patch discriminator: scores [condition, image] jointly.

    The appearance discriminator conditions on the source image (3 channels);
    the shape discriminator conditions on the target pose heatmaps (18) or a
    face sketch (1). Output is a patch score map, not a scalar.
    """

    def __init__(self, cond_channels: int, image_channels: int = 3,
                 base_channels: int = 64, num_layers: int = 4):
        super().__init__()
        self.cond_channels = cond_channels
        self.image_channels = image_channels
        layers = []
        c_in = cond_channels + image_channels
        width = base_channels
        for i in range(num_layers):
            layers.append(nn.Conv2d(c_in, width, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(width, affine=True))
            layers.append(nn.LeakyReLU(0.2))
            c_in = width
            width = min(width * 2, 8 * base_channels)
        layers.append(nn.Conv2d(c_in, 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, cond: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
        if cond.shape[1] != self.cond_channels:
            raise ConfigError(
                f"discriminator expects {self.cond_channels} condition channels, got {cond.shape[1]}"
            )
        if image.shape[1] != self.image_channels:
            raise ConfigError(
                f"discriminator expects {self.image_channels} image channels, got {image.shape[1]}"
            )
        if cond.shape[0] != image.shape[0] or cond.shape[-2:] != image.shape[-2:]:
            raise DimensionError(
                f"condition {tuple(cond.shape)} and image {tuple(image.shape)} are not aligned"
            )
        return self.net(torch.cat([cond, image], dim=1))


def lsgan_d_loss(disc: Discriminator, cond: torch.Tensor, real: torch.Tensor,
                 fake: torch.Tensor) -> torch.Tensor:
    """Least-squares discriminator loss; the fake image is detached here."""
    score_real = disc(cond, real)
    score_fake = disc(cond, fake.detach())
    return 0.5 * ((score_real - 1.0).pow(2).mean() + score_fake.pow(2).mean())


def lsgan_g_loss(d_app: Discriminator, d_shape: Discriminator, source_image: torch.Tensor,
                 target_pose: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss against both conditional discriminators."""
    score_a = d_app(source_image, fake)
    score_s = d_shape(target_pose, fake)
    return 0.5 * ((score_a - 1.0).pow(2).mean() + (score_s - 1.0).pow(2).mean())


def coarse_loss(coarse: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor,
                weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """First-stage objective: weighted reconstruction + perceptual terms."""
    rec = recon_loss(coarse, target)
    per = perceptual_loss(coarse, target, extractor)
    total = weights.recon * rec + weights.perceptual * per
    if not torch.isfinite(total):
        raise NumericError("coarse loss is non-finite")
    return total, {"recon": rec, "perceptual": per}


def full_loss(final: torch.Tensor, target: torch.Tensor, d_app: Discriminator,
              d_shape: Discriminator, source_image: torch.Tensor, target_pose: torch.Tensor,
              extractor: FeatureExtractor, weights: LossWeights) -> tuple[torch.Tensor, dict]:
    """Second-stage objective: adds style and adversarial terms."""
    rec = recon_loss(final, target)
    per = perceptual_loss(final, target, extractor)
    sty = style_loss(final, target, extractor)
    adv = lsgan_g_loss(d_app, d_shape, source_image, target_pose, final)
    total = weights.recon * rec + weights.perceptual * per + weights.style * sty + weights.gan * adv
    if not torch.isfinite(total):
        raise NumericError("full loss is non-finite")
    return total, {"recon": rec, "perceptual": per, "style": sty, "adv_g": adv}
