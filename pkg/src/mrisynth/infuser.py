"""Target-conditioned latent translation.

The fused latent map is cut into tokens, shifted by a learned positional
table, a target-identity vector (MLP of the target's one-hot), and optionally
an intensity-prior vector, then run through a small stack of pre-norm
transformer blocks and folded back to a spatial map. Conditioning is purely
additive, so one latent forward can be steered to any target sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ContractError, ParameterError


@dataclass
class InfuserConfig:
    token_dim: int = 256
    n_heads: int = 8
    n_blocks: int = 4
    patch_size: int = 1
    mlp_ratio: int = 4
    use_intensity_encoding: bool = False

    def __post_init__(self) -> None:
        if self.token_dim < 1 or self.n_heads < 1 or self.n_blocks < 1:
            raise ParameterError("token_dim, n_heads and n_blocks must be positive")
        if self.token_dim % self.n_heads:
            raise ParameterError(
                f"token_dim {self.token_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.patch_size < 1:
            raise ParameterError("patch_size must be positive")
        if self.mlp_ratio < 1:
            raise ParameterError("mlp_ratio must be positive")


class ModalityEncoding(nn.Module):
    """Target-identity shift: MLP over the target's one-hot vector."""

    def __init__(self, n_modalities: int, token_dim: int):
        super().__init__()
        self.n_modalities = n_modalities
        self.net = nn.Sequential(
            nn.Linear(n_modalities, token_dim),
            nn.SiLU(),
            nn.Linear(token_dim, token_dim),
        )

    def forward(self, target: int, batch: int = 1) -> torch.Tensor:
        if not 0 <= target < self.n_modalities:
            raise ContractError(
                f"target index {target} out of range [0, {self.n_modalities})"
            )
        weight = self.net[0].weight
        onehot = torch.zeros(batch, self.n_modalities, dtype=weight.dtype, device=weight.device)
        onehot[:, target] = 1.0
        return self.net(onehot)  # [B, token_dim]


class IntensityEncoding(nn.Module):
    """Intensity-prior shift. Bias-free so a zero prior maps to a zero shift."""

    def __init__(self, token_dim: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(1, token_dim, bias=False),
            nn.SiLU(),
            nn.Linear(token_dim, token_dim, bias=False),
        )

    def forward(self, prior: torch.Tensor) -> torch.Tensor:
        if prior.ndim != 1:
            raise ContractError(f"prior must be a [B] vector, got shape {tuple(prior.shape)}")
        return self.net(prior.unsqueeze(1))  # [B, token_dim]


class MultiheadSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(
        self, x: torch.Tensor, return_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        b, m, c = x.shape
        qkv = self.qkv(x).reshape(b, m, 3, self.n_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each [B, heads, M, head_dim]
        attn = torch.softmax(q @ k.transpose(-2, -1) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, m, c)
        return self.proj(out), (attn if return_weights else None)


class TransformerBlock(nn.Module):
    """Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, n_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadSelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, dim * mlp_ratio),
            nn.GELU(),
            nn.Linear(dim * mlp_ratio, dim),
        )

    def forward(
        self, x: torch.Tensor, return_weights: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        attn_out, weights = self.attn(self.norm1(x), return_weights)
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, weights


class ModalityInfuser(nn.Module):
    """Translate a fused latent map toward a chosen target sequence."""

    def __init__(
        self,
        n_modalities: int,
        latent_channels: int,
        latent_hw: tuple[int, int],
        config: InfuserConfig | None = None,
    ):
        super().__init__()
        self.config = config or InfuserConfig()
        cfg = self.config
        h, w = latent_hw
        if h % cfg.patch_size or w % cfg.patch_size:
            raise ParameterError(
                f"latent size {latent_hw} not divisible by patch size {cfg.patch_size}"
            )
        self.n_modalities = n_modalities
        self.latent_channels = latent_channels
        self.latent_hw = (h, w)
        self.grid = (h // cfg.patch_size, w // cfg.patch_size)
        self.n_tokens = self.grid[0] * self.grid[1]

        self.embed = nn.Conv2d(
            latent_channels, cfg.token_dim, cfg.patch_size, stride=cfg.patch_size
        )
        self.pos_embed = nn.Parameter(torch.empty(1, self.n_tokens, cfg.token_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.modality_encoding = ModalityEncoding(n_modalities, cfg.token_dim)
        self.intensity_encoding = (
            IntensityEncoding(cfg.token_dim) if cfg.use_intensity_encoding else None
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.token_dim, cfg.n_heads, cfg.mlp_ratio)
            for _ in range(cfg.n_blocks)
        )
        self.unembed = nn.Linear(
            cfg.token_dim, latent_channels * cfg.patch_size**2
        )

    def tokenize(self, z: torch.Tensor) -> torch.Tensor:
        """[B, c, h, w] -> [B, M, token_dim], row-major over the patch grid."""
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ContractError(
                f"expected latent [B, {self.latent_channels}, h, w], got {tuple(z.shape)}"
            )
        if tuple(z.shape[2:]) != self.latent_hw:
            raise ContractError(
                f"latent spatial size {tuple(z.shape[2:])} != configured {self.latent_hw}"
            )
        return self.embed(z).flatten(2).transpose(1, 2)

    def untokenize(self, tokens: torch.Tensor) -> torch.Tensor:
        """[B, M, token_dim] -> [B, c, h, w]; exact inverse layout of tokenize."""
        b = tokens.shape[0]
        p = self.config.patch_size
        gh, gw = self.grid
        out = self.unembed(tokens)  # [B, M, c*p*p]
        out = out.reshape(b, gh, gw, self.latent_channels, p, p)
        out = out.permute(0, 3, 1, 4, 2, 5)  # [B, c, gh, p, gw, p]
        return out.reshape(b, self.latent_channels, gh * p, gw * p)

    def conditioning(
        self,
        target: int,
        batch: int,
        prior: torch.Tensor | float | None = None,
        modality_shift: bool = True,
    ) -> torch.Tensor:
        """Combined additive shift [B, 1, token_dim] (before the positional table)."""
        weight = self.unembed.weight
        shift = torch.zeros(batch, 1, self.config.token_dim, dtype=weight.dtype, device=weight.device)
        if modality_shift:
            shift = shift + self.modality_encoding(target, batch).unsqueeze(1)
        if self.intensity_encoding is not None:
            if prior is None:
                raise ContractError(
                    "intensity encoding is enabled but no prior was supplied"
                )
            if not torch.is_tensor(prior):
                prior = torch.full((batch,), float(prior), dtype=weight.dtype, device=weight.device)
            shift = shift + self.intensity_encoding(prior).unsqueeze(1)
        elif prior is not None:
            raise ContractError(
                "a prior was supplied but intensity encoding is disabled"
            )
        return shift

    def forward(
        self,
        z: torch.Tensor,
        target: int,
        prior: torch.Tensor | float | None = None,
        modality_shift: bool = True,
        return_attention: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, list[torch.Tensor]]:
        tokens = self.tokenize(z)
        shift = self.conditioning(target, z.shape[0], prior, modality_shift)
        tokens = tokens + self.pos_embed + shift
        attention = []
        for block in self.blocks:
            tokens, weights = block(tokens, return_weights=return_attention)
            if return_attention:
                attention.append(weights)
        out = self.untokenize(tokens)
        if return_attention:
            return out, attention
        return out
