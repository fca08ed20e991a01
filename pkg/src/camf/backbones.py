"""Convolutional feature extractors with global max pooling.

A backbone maps an ``n x R x R`` FC batch (2D) or an ``n x Dx x Dy x Dz``
volume batch (3D) to an ``n x d1`` latent matrix. The pre-pooling map of the
last conv layer is what Score-CAM reads.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from camf.errors import ConfigError, NonFiniteError, ShapeMismatchError

ACTIVATIONS = {
    "relu": nn.ReLU,
    "elu": nn.ELU,
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
    "leaky_relu": nn.LeakyReLU,
}
NORMS = (None, "batch", "instance")


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class BackboneConfig:
    conv_blocks: tuple[ConvBlock, ...]
    dimensionality: int = 2
    activation: str = "relu"
    norm: str | None = None

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if not blocks:
            raise ConfigError("backbone needs at least one conv block")
        if self.dimensionality not in (2, 3):
            raise ConfigError(f"dimensionality must be 2 or 3, got {self.dimensionality}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")
        if self.norm not in NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}")

    @property
    def final_channels(self) -> int:
        return self.conv_blocks[-1].out_channels

    def output_shape(self, input_shape: Sequence[int]) -> tuple[int, ...]:
        """Spatial shape of the last conv map for a given input grid."""
        shape = tuple(int(s) for s in input_shape)
        if len(shape) != self.dimensionality:
            raise ShapeMismatchError(
                f"{self.dimensionality}D backbone got a {len(shape)}D input grid {shape}"
            )
        for b in self.conv_blocks:
            shape = tuple((s + 2 * b.padding - b.kernel) // b.stride + 1 for s in shape)
        return shape

    def min_input(self) -> int:
        """Smallest per-axis input size that leaves a 1-voxel output."""
        m = 1
        for b in reversed(self.conv_blocks):
            m = (m - 1) * b.stride + b.kernel - 2 * b.padding
        return max(m, 1)

    def accepts(self, input_shape: Sequence[int]) -> bool:
        return all(s >= 1 for s in self.output_shape(input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [list(asdict(b).values()) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["conv_blocks"] = tuple(ConvBlock(*b) for b in d["conv_blocks"])
        return cls(**d)


def _stack(channels, kernel=4, stride=2, padding=0):
    return tuple(ConvBlock(c, kernel, stride, padding) for c in channels)


# 264 -> 131 -> 64 -> 31 -> 14 -> 6
FULL_FMRI = BackboneConfig(_stack((32, 64, 128, 256, 256)), dimensionality=2)
# (121,145,121) -> (59,71,59) -> (28,34,28) -> (13,16,13) -> (5,7,5)
FULL_SMRI = BackboneConfig(_stack((32, 64, 128, 256)), dimensionality=3)
# desk scale: 32 -> 15 -> 6 ; (16,20,16) -> (7,9,7) -> (3,4,3)
DESK_FMRI = BackboneConfig(_stack((16, 32)), dimensionality=2)
DESK_SMRI = BackboneConfig((ConvBlock(16, 4, 2), ConvBlock(32, 3, 2)), dimensionality=3)

FULL_ROI_COUNT = 264
FULL_GRID = (121, 145, 121)
DESK_ROI_COUNT = 32
DESK_GRID = (16, 20, 16)


@dataclass
class LatentFeatureBatch:
    values: torch.Tensor  # n x d1
    modality: str  # "fmri" | "smri"
    activations: torch.Tensor | None = field(default=None, repr=False)


class Backbone(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        conv = nn.Conv2d if config.dimensionality == 2 else nn.Conv3d
        norm = {
            ("batch", 2): nn.BatchNorm2d,
            ("batch", 3): nn.BatchNorm3d,
            ("instance", 2): nn.InstanceNorm2d,
            ("instance", 3): nn.InstanceNorm3d,
        }
        layers: list[nn.Module] = []
        in_ch = 1
        for block in config.conv_blocks:
            layers.append(conv(in_ch, block.out_channels, block.kernel, block.stride, block.padding))
            if config.norm is not None:
                layers.append(norm[config.norm, config.dimensionality](block.out_channels))
            layers.append(ACTIVATIONS[config.activation]())
            in_ch = block.out_channels
        self.layers = nn.Sequential(*layers)

    @property
    def out_channels(self) -> int:
        return self.config.final_channels

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Last conv-block output, ``n x d1 x <spatial>``."""
        d = self.config.dimensionality
        if x.dim() != d + 1:
            raise ShapeMismatchError(f"expected an n x {d}D batch, got shape {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise NonFiniteError("backbone input contains non-finite values")
        if not self.config.accepts(x.shape[1:]):
            raise ShapeMismatchError(
                f"input grid {tuple(x.shape[1:])} is below the backbone minimum {self.config.min_input()}"
            )
        return self.layers(x.unsqueeze(1))

    def pool(self, maps: torch.Tensor) -> torch.Tensor:
        return maps.flatten(2).amax(dim=2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.feature_maps(x))

    def extract(self, x: torch.Tensor, modality: str) -> LatentFeatureBatch:
        maps = self.feature_maps(x)
        return LatentFeatureBatch(self.pool(maps), modality, maps)


def extract_fmri_features(fc_batch: torch.Tensor, backbone: Backbone) -> LatentFeatureBatch:
    if backbone.config.dimensionality != 2:
        raise ConfigError("fMRI features need a 2D backbone")
    if fc_batch.dim() != 3 or fc_batch.shape[1] != fc_batch.shape[2]:
        raise ShapeMismatchError(f"FC batch must be n x R x R, got {tuple(fc_batch.shape)}")
    return backbone.extract(fc_batch, "fmri")


def extract_smri_features(vol_batch: torch.Tensor, backbone: Backbone) -> LatentFeatureBatch:
    if backbone.config.dimensionality != 3:
        raise ConfigError("sMRI features need a 3D backbone")
    return backbone.extract(vol_batch, "smri")
