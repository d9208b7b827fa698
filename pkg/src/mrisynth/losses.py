"""Training objectives.

Generator total: weighted sum of L1 reconstruction, latent cosine mismatch
(1 - cos), cycle reconstruction through a reverse synthesis pass, a
non-saturating adversarial term, and sequence classification of fakes.
Discriminator total: real/fake adversarial term plus sequence classification
of both reals (true identity) and fakes (intended identity).

All adversarial arithmetic runs on logits through softplus for stability; the
probability-facing helper converts with a clamped logit first.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import check_availability_mask
from .errors import ContractError, ParameterError


@dataclass
class LossWeights:
    """Relative term weights; defaults are the reference operating point."""

    reconstruction: float = 10.0
    similarity: float = 1.0
    cycle: float = 1.0
    adversarial_g: float = 0.25
    classification_g: float = 0.25
    adversarial_d: float = 0.25
    classification_d: float = 0.25

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 0:
                raise ParameterError(f"loss weight {name} must be >= 0, got {value}")


@dataclass
class LossReport:
    """Per-term scalars for one step (floats, detached for logging)."""

    rec: float = 0.0
    sim: float = 0.0
    cyc: float = 0.0
    adv_g: float = 0.0
    adv_d: float = 0.0
    cls_real: float = 0.0
    cls_fake: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return dict(self.__dict__)

    def finite(self) -> bool:
        return all(torch.isfinite(torch.tensor(v)) for v in self.__dict__.values())


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractError(
            f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}"
        )


def reconstruction_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between synthesized and true images."""
    _check_same_shape(pred, target, "reconstruction_loss")
    return (pred - target).abs().mean()


def similarity_loss(
    z: torch.Tensor, z_hat: torch.Tensor, eps: float = 1e-8
) -> torch.Tensor:
    """Latent agreement penalty: 1 - cosine(z, z_hat), per sample, averaged.

    Zero when the forward and reverse passes produce the same latent
    direction; maximal (2) when they oppose.
    """
    _check_same_shape(z, z_hat, "similarity_loss")
    a = z.flatten(1)
    b = z_hat.flatten(1)
    dot = (a * b).sum(dim=1)
    denom = a.norm(dim=1) * b.norm(dim=1) + eps
    return (1.0 - dot / denom).mean()


def adversarial_losses_from_logits(
    real_logits: torch.Tensor, fake_logits: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(generator term, discriminator term) from raw patch logits.

    Discriminator: -E[log D(real)] - E[log(1 - D(fake))].
    Generator: non-saturating -E[log D(fake)].
    """
    disc = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    gen = F.softplus(-fake_logits).mean()
    return gen, disc


def adversarial_losses(
    real_probs: torch.Tensor, fake_probs: torch.Tensor, eps: float = 1e-7
) -> tuple[torch.Tensor, torch.Tensor]:
    """Probability-facing wrapper around the logits form."""
    for name, p in (("real", real_probs), ("fake", fake_probs)):
        if ((p < 0) | (p > 1)).any():
            raise ContractError(f"{name} probabilities must lie in [0, 1]")
    return adversarial_losses_from_logits(
        torch.logit(real_probs, eps=eps), torch.logit(fake_probs, eps=eps)
    )


def classification_loss(
    class_logits: torch.Tensor, label: int | torch.Tensor
) -> torch.Tensor:
    """Cross-entropy toward the sequence identity label."""
    if class_logits.ndim != 2:
        raise ContractError(
            f"class logits must be [B, N], got {tuple(class_logits.shape)}"
        )
    n = class_logits.shape[1]
    if torch.is_tensor(label):
        labels = label.long()
        if labels.shape != (class_logits.shape[0],):
            raise ContractError(
                f"label tensor must be [B], got {tuple(labels.shape)}"
            )
    else:
        labels = torch.full(
            (class_logits.shape[0],), int(label), dtype=torch.long,
            device=class_logits.device,
        )
    if ((labels < 0) | (labels >= n)).any():
        raise ContractError(f"labels out of range [0, {n})")
    return F.cross_entropy(class_logits, labels)


def reverse_availability(n_modalities: int, excluded: int) -> tuple[int, ...]:
    """Default reverse availability: every sequence except the excluded one."""
    if not 0 <= excluded < n_modalities:
        raise ParameterError(f"excluded index {excluded} out of range")
    return tuple(0 if i == excluded else 1 for i in range(n_modalities))


def cycle_pass(
    generator,
    images: torch.Tensor,
    synthesized: torch.Tensor,
    target: int,
    excluded: int,
    reverse_mask=None,
    prior: torch.Tensor | float | None = None,
):
    """Reverse synthesis: swap the synthesized target into the full stack and
    regenerate the held-out sequence.

    ``images`` must be the complete ground-truth stack (the reverse
    availability set may include sequences that were masked out on the forward
    pass). Gradients flow through ``synthesized`` into the forward pass.
    Returns the reverse GeneratorOutput; the cycle loss compares its image to
    the held-out channel.
    """
    n = images.shape[1]
    if target == excluded:
        raise ParameterError("cycle target and excluded sequence must differ")
    if reverse_mask is None:
        reverse_mask = reverse_availability(n, excluded)
    reverse_mask = check_availability_mask(reverse_mask, n)
    if reverse_mask[excluded] != 0:
        raise ParameterError("reverse availability must exclude the held-out sequence")
    if reverse_mask[target] != 1:
        raise ParameterError("reverse availability must include the synthesized target")
    if synthesized.shape != (images.shape[0], 1, *images.shape[2:]):
        raise ContractError(
            f"synthesized target must be [B, 1, H, W], got {tuple(synthesized.shape)}"
        )
    hat_images = torch.cat(
        [
            synthesized if i == target else images[:, i : i + 1]
            for i in range(n)
        ],
        dim=1,
    )
    return generator(hat_images, reverse_mask, target=excluded, prior=prior)


def cycle_loss(
    generator,
    images: torch.Tensor,
    synthesized: torch.Tensor,
    target: int,
    excluded: int,
    reverse_mask=None,
    prior: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """L1 between the held-out sequence and its reverse-pass reconstruction."""
    reverse = cycle_pass(
        generator, images, synthesized, target, excluded, reverse_mask, prior
    )
    return reconstruction_loss(reverse.image, images[:, excluded : excluded + 1])


def total_generator_loss(
    rec: torch.Tensor,
    sim: torch.Tensor,
    cyc: torch.Tensor,
    adv_g: torch.Tensor,
    cls_fake: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    return (
        weights.reconstruction * rec
        + weights.similarity * sim
        + weights.cycle * cyc
        + weights.adversarial_g * adv_g
        + weights.classification_g * cls_fake
    )


def total_discriminator_loss(
    adv_d: torch.Tensor,
    cls_real: torch.Tensor,
    cls_fake: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    return weights.adversarial_d * adv_d + weights.classification_d * (
        cls_real + cls_fake
    )
