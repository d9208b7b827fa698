"""Hybrid-fusion encoding stage.

One lightweight CNN encoder per input sequence captures modality-specific
structure; a single shared-architecture encoder over the channel-concatenated
stack captures complementary (cross-sequence) structure. Unavailable inputs
are never run through their encoder — their feature slot is an exact zero
tensor — and the complementary encoder only runs when at least two inputs are
present (a single input carries nothing complementary).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .data import check_availability_mask
from .errors import ContractError, ParameterError


@dataclass
class EncoderConfig:
    base_channels: int = 32
    downsample_factor: int = 4
    n_residual_blocks: int = 5

    def __post_init__(self) -> None:
        if self.base_channels < 1:
            raise ParameterError("base_channels must be positive")
        if self.downsample_factor < 1 or (
            self.downsample_factor & (self.downsample_factor - 1)
        ):
            raise ParameterError(
                f"downsample_factor must be a power of two, got {self.downsample_factor}"
            )
        n_down = self.downsample_factor.bit_length() - 1
        if self.n_residual_blocks < n_down + 1:
            raise ParameterError(
                f"{self.n_residual_blocks} residual blocks cannot realize a "
                f"downsample factor of {self.downsample_factor}"
            )

    @property
    def n_downsample(self) -> int:
        return self.downsample_factor.bit_length() - 1

    @property
    def latent_channels(self) -> int:
        return self.base_channels * self.downsample_factor


class ResidualBlock(nn.Module):
    """conv-norm-act-conv-norm with an additive skip (projected when shapes change)."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
            nn.InstanceNorm2d(out_channels, affine=True),
            nn.SiLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.InstanceNorm2d(out_channels, affine=True),
        )
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.skip = nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(self.body(x) + self.skip(x))


class ImageEncoder(nn.Module):
    """Residual CNN mapping [B, in, H, W] -> [B, latent, H/df, W/df].

    All encoders in the hybrid stage share this architecture; only the input
    channel count differs.
    """

    def __init__(self, in_channels: int, config: EncoderConfig):
        super().__init__()
        self.config = config
        channels = config.base_channels
        blocks = [ResidualBlock(in_channels, channels, stride=1)]
        for _ in range(config.n_downsample):
            blocks.append(ResidualBlock(channels, channels * 2, stride=2))
            channels *= 2
        while len(blocks) < config.n_residual_blocks:
            blocks.append(ResidualBlock(channels, channels, stride=1))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ContractError(f"encoder input must be [B, C, H, W], got {tuple(x.shape)}")
        df = self.config.downsample_factor
        if x.shape[-2] % df or x.shape[-1] % df:
            raise ContractError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by "
                f"downsample factor {df}"
            )
        return self.blocks(x)


@dataclass
class FeatureSet:
    """Latent features produced by the hybrid encoding stage.

    ``specific[i]`` is the i-th sequence's feature map (exact zeros when that
    sequence is unavailable or per-sequence encoders are disabled);
    ``complementary`` is the joint feature map (exact zeros when fewer than
    two sequences are available or the joint encoder is disabled).
    """

    complementary: torch.Tensor
    specific: list[torch.Tensor]
    mask: tuple[int, ...]

    @property
    def n_modalities(self) -> int:
        return len(self.specific)


class HybridEncoder(nn.Module):
    """N per-sequence encoders plus one joint encoder over the full stack."""

    def __init__(
        self,
        n_modalities: int,
        config: EncoderConfig | None = None,
        use_specific: bool = True,
        use_complementary: bool = True,
    ):
        super().__init__()
        if n_modalities < 2:
            raise ParameterError(f"need at least 2 modalities, got {n_modalities}")
        if not use_specific and not use_complementary:
            raise ParameterError("at least one encoding pathway must be enabled")
        self.n_modalities = n_modalities
        self.config = config or EncoderConfig()
        self.specific = (
            nn.ModuleList(
                ImageEncoder(1, self.config) for _ in range(n_modalities)
            )
            if use_specific
            else None
        )
        self.complementary = (
            ImageEncoder(n_modalities, self.config) if use_complementary else None
        )

    def forward(self, images: torch.Tensor, mask: Sequence[int]) -> FeatureSet:
        """Encode a masked image stack.

        ``images`` is [B, N, H, W]; ``mask`` flags which channels are real.
        Masking is re-applied internally, so passing full images with a mask
        is equivalent to passing pre-masked ones.
        """
        mask = check_availability_mask(mask, self.n_modalities)
        if images.ndim != 4 or images.shape[1] != self.n_modalities:
            raise ContractError(
                f"expected images [B, {self.n_modalities}, H, W], got {tuple(images.shape)}"
            )
        if sum(mask) < 1:
            raise ContractError("at least one modality must be available")
        scale = images.new_tensor(mask).view(1, -1, 1, 1)
        masked = images * scale

        df = self.config.downsample_factor
        latent_shape = (
            images.shape[0],
            self.config.latent_channels,
            images.shape[2] // df,
            images.shape[3] // df,
        )
        specific = []
        for i in range(self.n_modalities):
            if mask[i] and self.specific is not None:
                specific.append(self.specific[i](masked[:, i : i + 1]))
            else:
                specific.append(images.new_zeros(latent_shape))
        # With per-sequence encoders disabled, the joint encoder is the only
        # pathway left, so it must also run for single-input stacks.
        comp_active = sum(mask) > 1 or self.specific is None
        if self.complementary is not None and comp_active:
            complementary = self.complementary(masked)
        else:
            complementary = images.new_zeros(latent_shape)
        return FeatureSet(complementary=complementary, specific=specific, mask=mask)
