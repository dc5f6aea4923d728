"""Pose transfer branch: source image + source/target poses -> coarse image.

The branch runs two parallel feature streams (image and pose). Each
cascaded block refines the pose stream, turns it into a sigmoid gate, and
applies a gated residual update to the image stream. The deepest image
feature map is exposed as the guidance map consumed by the detail branch,
so gradients from the detail branch flow back into this one.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class TransferBranchConfig:
    image_channels: int = 3
    pose_channels: int = 18  # per pose map; source and target are stacked
    base_channels: int = 64
    num_downsamples: int = 3
    num_blocks: int = 9

    @property
    def guidance_channels(self) -> int:
        return self.base_channels * 2 ** (self.num_downsamples - 1)

    def validate(self) -> None:
        if self.num_downsamples < 1:
            raise ConfigError("num_downsamples must be >= 1")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")


def _conv_block(c_in: int, c_out: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.LeakyReLU(0.2),
    )


class TransferBlock(nn.Module):
    """One cascade stage: pose stream update, gate, gated residual image update."""

    def __init__(self, channels: int):
        super().__init__()
        self.image_stack = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.pose_stack = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
        )
        self.gate_conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, image_feat: torch.Tensor, pose_feat: torch.Tensor):
        pose_feat = self.pose_stack(pose_feat)
        gate = torch.sigmoid(self.gate_conv(pose_feat))
        image_feat = image_feat + gate * self.image_stack(image_feat)
        return image_feat, pose_feat


class PoseTransferBranch(nn.Module):
    """Coarse generator; returns (coarse image in [-1, 1], guidance features)."""

    def __init__(self, config: TransferBranchConfig = TransferBranchConfig()):
        super().__init__()
        config.validate()
        self.config = config

        def encoder(c_in: int) -> nn.Sequential:
            layers = []
            for i in range(config.num_downsamples):
                c_out = config.base_channels * 2 ** i
                layers.append(_conv_block(c_in, c_out, stride=2))
                c_in = c_out
            return nn.Sequential(*layers)

        self.image_encoder = encoder(config.image_channels)
        self.pose_encoder = encoder(2 * config.pose_channels)
        self.blocks = nn.ModuleList(
            TransferBlock(config.guidance_channels) for _ in range(config.num_blocks)
        )

        decoder = []
        c = config.guidance_channels
        for _ in range(config.num_downsamples):
            c_out = max(c // 2, 8)
            decoder.append(nn.Upsample(scale_factor=2, mode="nearest"))
            decoder.append(_conv_block(c, c_out))
            c = c_out
        decoder.append(nn.Conv2d(c, config.image_channels, 3, padding=1))
        decoder.append(nn.Tanh())
        self.decoder = nn.Sequential(*decoder)

    def _check_inputs(self, image, pose_source, pose_target):
        if image.dim() != 4 or pose_source.dim() != 4 or pose_target.dim() != 4:
            raise DimensionError("inputs must be batched (B, C, H, W) tensors")
        if image.shape[1] != self.config.image_channels:
            raise ConfigError(f"expected {self.config.image_channels} image channels, got {image.shape[1]}")
        for name, pose in (("source", pose_source), ("target", pose_target)):
            if pose.shape[1] != self.config.pose_channels:
                raise ConfigError(
                    f"{name} pose has {pose.shape[1]} channels, expected {self.config.pose_channels}"
                )
            if pose.shape[0] != image.shape[0] or pose.shape[-2:] != image.shape[-2:]:
                raise DimensionError(
                    f"{name} pose shape {tuple(pose.shape)} does not match image {tuple(image.shape)}"
                )
        stride = 2 ** self.config.num_downsamples
        h, w = image.shape[-2:]
        if h % stride or w % stride:
            raise DimensionError(f"spatial size {h}x{w} must be divisible by {stride}")

    def forward(self, image: torch.Tensor, pose_source: torch.Tensor,
                pose_target: torch.Tensor):
        self._check_inputs(image, pose_source, pose_target)
        img_feat = self.image_encoder(image)
        pose_feat = self.pose_encoder(torch.cat([pose_source, pose_target], dim=1))
        for block in self.blocks:
            img_feat, pose_feat = block(img_feat, pose_feat)
        guidance = img_feat
        coarse = self.decoder(guidance)
        return coarse, guidance
