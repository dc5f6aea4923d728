"""Detail branch: style code + guidance map -> residual detail map.

A style encoder pools the source image into a global code. Per upsampling
stage, a small MLP maps the code to adaptive instance normalization
parameters that modulate the generator features. The generator decodes the
guidance map from the transfer branch into a residual image. A structurally
identical module, conditioned on a landmark sketch instead of pose
guidance, regenerates the face patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DimensionError


def adain(features: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor,
          eps: float = 1e-5) -> torch.Tensor:
    """Per-channel whitening over spatial dims, then affine restyle.

    out = scale * (F - mean) / sqrt(var + eps) + bias, with biased variance.
    ``scale``/``bias`` are (C,) or (B, C).
    """
    if eps <= 0:
        raise ConfigError(f"adain eps must be positive, got {eps}")
    single = features.dim() == 3
    if single:
        features = features.unsqueeze(0)
    if features.dim() != 4:
        raise DimensionError(f"expected (B, C, H, W) or (C, H, W), got {tuple(features.shape)}")
    c = features.shape[1]
    scale = scale.reshape(-1, scale.shape[-1]) if scale.dim() > 1 else scale.reshape(1, -1)
    bias = bias.reshape(-1, bias.shape[-1]) if bias.dim() > 1 else bias.reshape(1, -1)
    if scale.shape[-1] != c or bias.shape[-1] != c:
        raise DimensionError(
            f"scale/bias have {scale.shape[-1]}/{bias.shape[-1]} channels, features have {c}"
        )
    mean = features.mean(dim=(-2, -1), keepdim=True)
    var = features.var(dim=(-2, -1), unbiased=False, keepdim=True)
    normed = (features - mean) / torch.sqrt(var + eps)
    out = scale[..., None, None] * normed + bias[..., None, None]
    return out[0] if single else out


class ResBlock(nn.Module):
    def __init__(self, channels: int, norm: bool = True):
        super().__init__()
        body = [nn.Conv2d(channels, channels, 3, padding=1)]
        if norm:
            body.append(nn.InstanceNorm2d(channels, affine=True))
        body.append(nn.LeakyReLU(0.2))
        body.append(nn.Conv2d(channels, channels, 3, padding=1))
        if norm:
            body.append(nn.InstanceNorm2d(channels, affine=True))
        self.body = nn.Sequential(*body)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class StyleEncoder(nn.Module):
    """Pools an image into a global style code by average pooling.

    No normalization layers: channel statistics are the signal here.
    """

    def __init__(self, code_length: int = 128, in_channels: int = 3,
                 widths=(64, 128)):
        super().__init__()
        layers = []
        c = in_channels
        for w in list(widths) + [code_length]:
            layers.append(nn.Conv2d(c, w, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            layers.append(ResBlock(w, norm=False))
            c = w
        self.net = nn.Sequential(*layers)
        self.code_length = code_length

    def features(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)

    @staticmethod
    def pool(features: torch.Tensor) -> torch.Tensor:
        return features.mean(dim=(-2, -1))

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(image))


class AdainParamNet(nn.Module):
    """One 3-layer MLP per modulated stage, mapping the style code to
    (scale, bias). Final layers are zero-initialized so every stage starts
    as the identity modulation (scale 1, bias 0)."""

    def __init__(self, code_length: int, stage_channels, hidden: int | None = None):
        super().__init__()
        hidden = hidden or code_length
        mlps = []
        for c in stage_channels:
            head = nn.Linear(hidden, 2 * c)
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
            mlps.append(nn.Sequential(
                nn.Linear(code_length, hidden),
                nn.LeakyReLU(0.2),
                nn.Linear(hidden, hidden),
                nn.LeakyReLU(0.2),
                head,
            ))
        self.mlps = nn.ModuleList(mlps)

    def modulation(self, code: torch.Tensor, stage: int):
        if not 0 <= stage < len(self.mlps):
            raise ConfigError(f"stage {stage} out of range, have {len(self.mlps)} stages")
        raw = self.mlps[stage](code)
        c = raw.shape[-1] // 2
        return 1.0 + raw[..., :c], raw[..., c:]


class ResidualGenerator(nn.Module):
    """Decodes guidance features into an image, restyled per stage via adain."""

    def __init__(self, guidance_channels: int, code_length: int = 128,
                 stage_channels=(512, 256, 128), num_res_blocks: int = 6,
                 out_channels: int = 3):
        super().__init__()
        stage_channels = tuple(stage_channels)
        self.entry = nn.Sequential(
            nn.Conv2d(guidance_channels, stage_channels[0], 3, padding=1),
            nn.InstanceNorm2d(stage_channels[0], affine=True),
            nn.LeakyReLU(0.2),
        )
        self.res_blocks = nn.Sequential(
            *[ResBlock(stage_channels[0]) for _ in range(num_res_blocks)]
        )
        self.params = AdainParamNet(code_length, stage_channels)
        ups = []
        for i, c in enumerate(stage_channels):
            c_out = stage_channels[i + 1] if i + 1 < len(stage_channels) else max(c // 2, 8)
            ups.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c_out, 3, padding=1),
                nn.LeakyReLU(0.2),
            ))
        self.up_stages = nn.ModuleList(ups)
        last = max(stage_channels[-1] // 2, 8)
        self.head = nn.Sequential(nn.Conv2d(last, out_channels, 3, padding=1), nn.Tanh())

    def forward(self, guidance: torch.Tensor, code: torch.Tensor) -> torch.Tensor:
        x = self.res_blocks(self.entry(guidance))
        for i, stage in enumerate(self.up_stages):
            scale, bias = self.params.modulation(code, i)
            x = adain(x, scale, bias)
            x = stage(x)
        return self.head(x)


@dataclass(frozen=True)
class DetailBranchConfig:
    code_length: int = 128
    guidance_channels: int = 256
    stage_channels: tuple = (512, 256, 128)
    num_res_blocks: int = 6
    style_channels: tuple = (64, 128)
    image_channels: int = 3

    @property
    def num_up_stages(self) -> int:
        return len(self.stage_channels)


class DetailBranch(nn.Module):
    """Source image + guidance map -> (residual detail map, style code)."""

    def __init__(self, config: DetailBranchConfig = DetailBranchConfig()):
        super().__init__()
        self.config = config
        self.style_encoder = StyleEncoder(
            config.code_length, config.image_channels, config.style_channels
        )
        self.generator = ResidualGenerator(
            config.guidance_channels, config.code_length, config.stage_channels,
            config.num_res_blocks, config.image_channels,
        )

    def encode_style(self, image: torch.Tensor) -> torch.Tensor:
        return self.style_encoder(image)

    def forward(self, source_image: torch.Tensor, guidance: torch.Tensor):
        if guidance.shape[1] != self.config.guidance_channels:
            raise ConfigError(
                f"guidance has {guidance.shape[1]} channels, expected {self.config.guidance_channels}"
            )
        factor = 2 ** self.config.num_up_stages
        want = (guidance.shape[-2] * factor, guidance.shape[-1] * factor)
        if tuple(source_image.shape[-2:]) != want:
            raise DimensionError(
                f"guidance {tuple(guidance.shape[-2:])} upsamples to {want}, "
                f"but the source image is {tuple(source_image.shape[-2:])}"
            )
        code = self.encode_style(source_image)
        residual = self.generator(guidance, code)
        return residual, code


@dataclass(frozen=True)
class FaceModuleConfig:
    crop_size: int = 64
    code_length: int = 128
    stage_channels: tuple = (256, 128, 64)
    num_res_blocks: int = 6
    style_channels: tuple = (32, 64)
    image_channels: int = 3
    sketch_channels: int = 1


class FaceDetailModule(nn.Module):
    """Face regenerator: landmark sketch provides structure, face crop style.

    Entirely separate parameters from the body pipeline; output is a full
    face patch (not a residual) to paste back via the blend mask.
    """

    def __init__(self, config: FaceModuleConfig = FaceModuleConfig()):
        super().__init__()
        self.config = config
        g = config.stage_channels[0]
        widths = (max(g // 4, 8), max(g // 2, 8))
        layers = []
        c = config.sketch_channels
        for w in list(widths) + [g]:
            layers.append(nn.Conv2d(c, w, 3, stride=2, padding=1))
            layers.append(nn.LeakyReLU(0.2))
            c = w
        self.sketch_encoder = nn.Sequential(*layers)
        self.style_encoder = StyleEncoder(
            config.code_length, config.image_channels, config.style_channels
        )
        self.generator = ResidualGenerator(
            g, config.code_length, config.stage_channels,
            config.num_res_blocks, config.image_channels,
        )

    def forward(self, source_crop: torch.Tensor, sketch: torch.Tensor) -> torch.Tensor:
        if sketch.shape[1] != self.config.sketch_channels:
            raise ConfigError(
                f"sketch has {sketch.shape[1]} channels, expected {self.config.sketch_channels}"
            )
        if sketch.shape[-2:] != source_crop.shape[-2:]:
            raise DimensionError(
                f"sketch {tuple(sketch.shape)} and crop {tuple(source_crop.shape)} sizes differ"
            )
        code = self.style_encoder(source_crop)
        return self.generator(self.sketch_encoder(sketch), code)


def compose_final(coarse: torch.Tensor, residual: torch.Tensor,
                  face: torch.Tensor | None = None,
                  mask: torch.Tensor | None = None) -> torch.Tensor:
    """Final composition: (1 - M) * (coarse + residual) + M * face, clamped.

    With no face patch the mask is treated as zero everywhere.
    """
    if residual.shape != coarse.shape:
        raise DimensionError(
            f"residual {tuple(residual.shape)} does not match coarse {tuple(coarse.shape)}"
        )
    out = coarse + residual
    if face is not None:
        if mask is None:
            raise ConfigError("a face patch requires a blend mask")
        if face.shape != coarse.shape:
            raise DimensionError(
                f"face {tuple(face.shape)} does not match coarse {tuple(coarse.shape)}"
            )
        if mask.shape[-2:] != coarse.shape[-2:]:
            raise DimensionError(
                f"mask {tuple(mask.shape)} does not match image {tuple(coarse.shape)}"
            )
        if float(mask.min()) < 0.0 or float(mask.max()) > 1.0:
            raise ConfigError("blend mask values must lie in [0, 1]")
        while mask.dim() < coarse.dim():
            mask = mask.unsqueeze(0)
        out = (1.0 - mask) * out + mask * face
    return out.clamp(-1.0, 1.0)
