"""Attention-based fusion of the hybrid encoder's feature streams.

Every active stream gets a per-channel importance vector from a tiny
squeeze-style gate (global average pool, two 1-D convolutions across the
channel axis, sigmoid). Two fused views are formed:

* primary   — each stream scaled by its own importance, then summed;
* residual  — the joint stream plus the per-sequence streams reweighted by a
              softmax *across the available sequences* (channel-wise), which
              redistributes weight toward whichever inputs matter most.

A 1x1 projection over the concatenated pair returns to the latent width.
Streams whose sequence is unavailable are skipped entirely, so they
contribute exactly zero.
"""

from __future__ import annotations

import torch
from torch import nn

from .encoders import FeatureSet
from .errors import ContractError, ParameterError


class ChannelGate(nn.Module):
    """Per-channel importance in (0, 1): sigmoid(conv1d(silu(conv1d(gap(F)))))."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ParameterError("gate kernel size must be odd")
        padding = kernel_size // 2
        self.reduce = nn.Conv1d(1, 1, kernel_size, padding=padding)
        self.expand = nn.Conv1d(1, 1, kernel_size, padding=padding)
        self.act = nn.SiLU()

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 4:
            raise ContractError(
                f"gate input must be [B, C, H, W], got {tuple(features.shape)}"
            )
        pooled = features.mean(dim=(2, 3)).unsqueeze(1)  # [B, 1, C]
        squeezed = self.expand(self.act(self.reduce(pooled)))
        return torch.sigmoid(squeezed.squeeze(1))  # [B, C]


class ChannelAttentionFusion(nn.Module):
    """Fuse per-sequence and joint features into one latent map."""

    def __init__(self, n_modalities: int, channels: int, gate_kernel: int = 3):
        super().__init__()
        if n_modalities < 2:
            raise ParameterError(f"need at least 2 modalities, got {n_modalities}")
        self.n_modalities = n_modalities
        self.channels = channels
        self.complementary_gate = ChannelGate(gate_kernel)
        self.specific_gates = nn.ModuleList(
            ChannelGate(gate_kernel) for _ in range(n_modalities)
        )
        self.project = nn.Conv2d(2 * channels, channels, kernel_size=1)

    def _check(self, features: FeatureSet) -> None:
        if features.n_modalities != self.n_modalities:
            raise ContractError(
                f"feature set has {features.n_modalities} streams, expected "
                f"{self.n_modalities}"
            )
        if features.complementary.shape[1] != self.channels:
            raise ContractError(
                f"feature width {features.complementary.shape[1]} != configured "
                f"channels {self.channels}"
            )

    def compute_importance(
        self, features: FeatureSet
    ) -> tuple[torch.Tensor | None, list[torch.Tensor | None]]:
        """Importance vectors for active streams; None for skipped ones.

        The joint stream counts as active only when two or more sequences are
        available (below that it is a zero placeholder by construction).
        """
        self._check(features)
        comp = (
            self.complementary_gate(features.complementary)
            if sum(features.mask) > 1
            else None
        )
        spec = [
            self.specific_gates[i](features.specific[i]) if features.mask[i] else None
            for i in range(self.n_modalities)
        ]
        return comp, spec

    def fuse_primary(
        self,
        features: FeatureSet,
        comp_map: torch.Tensor | None,
        spec_maps: list[torch.Tensor | None],
    ) -> torch.Tensor:
        """Sum of streams, each scaled by its own importance vector."""
        out = torch.zeros_like(features.complementary)
        if comp_map is not None:
            out = out + features.complementary * comp_map[:, :, None, None]
        for i, m in enumerate(spec_maps):
            if m is not None:
                out = out + features.specific[i] * m[:, :, None, None]
        return out

    def residual_weights(
        self, spec_maps: list[torch.Tensor | None]
    ) -> dict[int, torch.Tensor]:
        """Channel-wise softmax over the available sequences' importance maps.

        Returns {modality index: weight [B, C]}; weights sum to one across the
        returned indices for every (batch, channel) position.
        """
        active = [i for i, m in enumerate(spec_maps) if m is not None]
        if not active:
            return {}
        stacked = torch.stack([spec_maps[i] for i in active], dim=1)  # [B, k, C]
        soft = torch.softmax(stacked, dim=1)
        return {idx: soft[:, j] for j, idx in enumerate(active)}

    def fuse_residual(
        self, features: FeatureSet, spec_maps: list[torch.Tensor | None]
    ) -> torch.Tensor:
        """Joint stream plus softmax-reweighted per-sequence streams.

        The joint stream passes through untouched here; only the specific
        streams compete for weight.
        """
        out = features.complementary
        weights = self.residual_weights(spec_maps)
        for i, w in weights.items():
            out = out + features.specific[i] * w[:, :, None, None]
        return out

    def project_common(
        self, primary: torch.Tensor, residual: torch.Tensor
    ) -> torch.Tensor:
        return self.project(torch.cat([primary, residual], dim=1))

    def forward(self, features: FeatureSet) -> torch.Tensor:
        comp_map, spec_maps = self.compute_importance(features)
        primary = self.fuse_primary(features, comp_map, spec_maps)
        residual = self.fuse_residual(features, spec_maps)
        return self.project_common(primary, residual)


class SumFusion(nn.Module):
    """Attention-free drop-in: plain sum of all streams plus a 1x1 projection.

    Used by the ablation variant that removes the attention fusion stage while
    keeping parameter flow comparable.
    """

    def __init__(self, n_modalities: int, channels: int):
        super().__init__()
        self.n_modalities = n_modalities
        self.channels = channels
        self.project = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, features: FeatureSet) -> torch.Tensor:
        out = features.complementary
        for i in range(self.n_modalities):
            if features.mask[i]:
                out = out + features.specific[i]
        return self.project(out)
