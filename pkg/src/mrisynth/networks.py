"""Full synthesis generator, image decoder, and patch discriminator.

The generator chains the pieces end to end: hybrid encoding of whichever
sequences are present, attention fusion to one shared latent, target-
conditioned translation of that latent, and residual up-convolutional
decoding to a single-channel image in [-1, 1]. The discriminator scores
overlapping patches for realism and carries an auxiliary head that classifies
which sequence an image belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .encoders import EncoderConfig, FeatureSet, HybridEncoder, ResidualBlock
from .errors import ContractError, ParameterError
from .fusion import ChannelAttentionFusion, SumFusion
from .infuser import InfuserConfig, ModalityInfuser

VARIANTS = ("full", "no-enc-m", "no-enc-c", "no-caff")
LATENT_MODES = ("all", "only_complementary", "only_specific", "common_only")


class Decoder(nn.Module):
    """Residual decoder mirroring the encoder: [B, c, h, w] -> [B, out, h*df, w*df]."""

    def __init__(self, out_channels: int, config: EncoderConfig):
        super().__init__()
        self.config = config
        channels = config.latent_channels
        blocks = []
        n_flat = config.n_residual_blocks - config.n_downsample
        for _ in range(n_flat):
            blocks.append(ResidualBlock(channels, channels))
        for _ in range(config.n_downsample):
            blocks.append(nn.Upsample(scale_factor=2, mode="nearest"))
            blocks.append(ResidualBlock(channels, channels // 2))
            channels //= 2
        self.blocks = nn.Sequential(*blocks)
        self.to_image = nn.Sequential(
            nn.Conv2d(channels, out_channels, 3, padding=1), nn.Tanh()
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.config.latent_channels:
            raise ContractError(
                f"expected latent [B, {self.config.latent_channels}, h, w], "
                f"got {tuple(z.shape)}"
            )
        return self.to_image(self.blocks(z))


@dataclass
class DiscriminatorConfig:
    n_modalities: int
    base_channels: int = 64
    n_layers: int = 4
    leaky_slope: float = 0.2

    def __post_init__(self) -> None:
        if self.n_modalities < 2:
            raise ParameterError("discriminator needs at least 2 modality classes")
        if self.n_layers < 1:
            raise ParameterError("n_layers must be positive")


@dataclass
class DiscriminatorOutput:
    patch_logits: torch.Tensor  # [B, 1, h', w']
    class_logits: torch.Tensor  # [B, N]

    @property
    def patch_probs(self) -> torch.Tensor:
        return torch.sigmoid(self.patch_logits)


class PatchDiscriminator(nn.Module):
    """Strided conv stack with a patch realism head and a sequence-class head."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = 1
        ch = config.base_channels
        for i in range(config.n_layers):
            layers.append(nn.Conv2d(in_ch, ch, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(ch, affine=True))
            layers.append(nn.LeakyReLU(config.leaky_slope))
            in_ch = ch
            ch = min(ch * 2, 8 * config.base_channels)
        self.features = nn.Sequential(*layers)
        self.patch_head = nn.Conv2d(in_ch, 1, 3, padding=1)
        self.class_head = nn.Linear(in_ch, config.n_modalities)

    def forward(self, image: torch.Tensor) -> DiscriminatorOutput:
        if image.ndim != 4 or image.shape[1] != 1:
            raise ContractError(
                f"discriminator expects [B, 1, H, W], got {tuple(image.shape)}"
            )
        if min(image.shape[-2:]) < 2**self.config.n_layers:
            raise ContractError(
                f"image size {tuple(image.shape[-2:])} too small for "
                f"{self.config.n_layers} stride-2 layers"
            )
        feats = self.features(image)
        pooled = feats.mean(dim=(2, 3))
        return DiscriminatorOutput(
            patch_logits=self.patch_head(feats),
            class_logits=self.class_head(pooled),
        )


@dataclass
class GeneratorConfig:
    n_modalities: int
    image_size: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    infuser: InfuserConfig = field(default_factory=InfuserConfig)
    variant: str = "full"

    def __post_init__(self) -> None:
        if self.n_modalities < 2:
            raise ParameterError("need at least 2 modalities")
        if self.variant not in VARIANTS:
            raise ParameterError(
                f"unknown variant {self.variant!r}; expected one of {VARIANTS}"
            )
        if self.image_size % self.encoder.downsample_factor:
            raise ParameterError(
                f"image_size {self.image_size} not divisible by downsample "
                f"factor {self.encoder.downsample_factor}"
            )

    @property
    def latent_hw(self) -> tuple[int, int]:
        side = self.image_size // self.encoder.downsample_factor
        return (side, side)


@dataclass
class GeneratorOutput:
    image: torch.Tensor  # [B, 1, H, W], in [-1, 1]
    latent: torch.Tensor  # fused latent z, [B, c, h, w]
    translated: torch.Tensor  # target-conditioned latent z_t, [B, c, h, w]


class Generator(nn.Module):
    """Masked sequence stack + target id (+ optional prior) -> synthesized image."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        n = config.n_modalities
        self.encoder = HybridEncoder(
            n,
            config.encoder,
            use_specific=config.variant != "no-enc-m",
            use_complementary=config.variant != "no-enc-c",
        )
        channels = config.encoder.latent_channels
        if config.variant == "no-caff":
            self.fusion: nn.Module = SumFusion(n, channels)
        else:
            self.fusion = ChannelAttentionFusion(n, channels)
        self.infuser = ModalityInfuser(n, channels, config.latent_hw, config.infuser)
        self.decoder = Decoder(1, config.encoder)

    @property
    def n_modalities(self) -> int:
        return self.config.n_modalities

    def _check_images(self, images: torch.Tensor) -> None:
        size = self.config.image_size
        if images.ndim != 4 or images.shape[1] != self.n_modalities:
            raise ContractError(
                f"expected [B, {self.n_modalities}, H, W], got {tuple(images.shape)}"
            )
        if tuple(images.shape[-2:]) != (size, size):
            raise ContractError(
                f"expected {size}x{size} images, got {tuple(images.shape[-2:])}"
            )

    def represent(
        self, images: torch.Tensor, mask, latent_mode: str = "all"
    ) -> torch.Tensor:
        """Fused latent for a masked stack, optionally restricted to one stream
        family for representation analysis."""
        if latent_mode not in LATENT_MODES:
            raise ParameterError(
                f"unknown latent mode {latent_mode!r}; expected one of {LATENT_MODES}"
            )
        self._check_images(images)
        features = self.encoder(images, mask)
        if latent_mode == "only_complementary":
            if sum(features.mask) < 2:
                raise ContractError(
                    "latent mode 'only_complementary' needs at least two "
                    "available sequences (the joint stream is zero otherwise)"
                )
            features = FeatureSet(
                complementary=features.complementary,
                specific=[torch.zeros_like(f) for f in features.specific],
                mask=features.mask,
            )
        elif latent_mode == "only_specific":
            features = FeatureSet(
                complementary=torch.zeros_like(features.complementary),
                specific=features.specific,
                mask=features.mask,
            )
        return self.fusion(features)

    def forward(
        self,
        images: torch.Tensor,
        mask,
        target: int,
        prior: torch.Tensor | float | None = None,
        latent_mode: str = "all",
    ) -> GeneratorOutput:
        """Synthesize the target sequence from the available ones.

        ``images`` may be full or pre-masked; masking is enforced internally.
        ``prior`` is the target's intensity prior (required iff the model was
        built with intensity encoding).
        """
        if not 0 <= target < self.n_modalities:
            raise ContractError(
                f"target index {target} out of range [0, {self.n_modalities})"
            )
        z = self.represent(images, mask, latent_mode)
        z_t = self.infuser(
            z, target, prior=prior, modality_shift=latent_mode != "common_only"
        )
        return GeneratorOutput(image=self.decoder(z_t), latent=z, translated=z_t)


def build_generator(config: GeneratorConfig, seed: int | None = None) -> Generator:
    """Construct a generator, optionally under a fixed parameter-init seed."""
    if seed is not None:
        torch.manual_seed(seed)
    return Generator(config)


def build_discriminator(
    config: DiscriminatorConfig, seed: int | None = None
) -> PatchDiscriminator:
    if seed is not None:
        torch.manual_seed(seed)
    return PatchDiscriminator(config)
