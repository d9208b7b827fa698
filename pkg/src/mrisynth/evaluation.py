"""Scenario enumeration, scoring tables, representation analysis, imputation.

A scenario is one (available-subset, synthesis-target) pair; for N sequences
there are 2^N - 2 nonempty proper input subsets and sum over subsets of the
missing-count many pairs (N=4: 14 subsets, 28 pairs). Scores are computed
per slice and aggregated per scenario, per input-count group, and overall.

All scoring runs through one adapter signature so real generators, the
mean-image baseline, and test doubles are interchangeable:

    synth(records, availability, target) -> array [len(records), H, W]
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import (
    DEFAULT_MODALITY_NAMES,
    LABEL_LESION_CORE,
    LABEL_LESION_RIM,
    MultisequenceVolume,
    SliceRecord,
    check_availability_mask,
    list_subjects,
    load_volume_set,
    save_volume_set,
)
from .errors import ContractError, ParameterError, PriorError
from .metrics import SSIMParams, masked_psnr, psnr, ssim
from .networks import Generator

SynthFn = Callable[[Sequence[SliceRecord], tuple, int], np.ndarray]


# ---------------------------------------------------------------------------
# Scenario enumeration


def enumerate_scenarios(n_modalities: int) -> list[tuple[tuple[int, ...], int]]:
    """All (availability, target) pairs in canonical order.

    Subsets are ordered by their binary value (bit i = sequence i), targets
    ascending within a subset. Every nonempty proper subset appears, paired
    with every sequence outside it.
    """
    if n_modalities < 2:
        raise ParameterError("need at least 2 modalities to enumerate scenarios")
    pairs = []
    for value in range(1, 2**n_modalities - 1):
        mask = tuple((value >> i) & 1 for i in range(n_modalities))
        for target in range(n_modalities):
            if not mask[target]:
                pairs.append((mask, target))
    return pairs


def count_input_cases(n_modalities: int) -> int:
    return 2**n_modalities - 2


# ---------------------------------------------------------------------------
# Synthesis adapters


def batched_model_synthesizer(
    generator: Generator,
    ie_mode: str = "off",
    mean_priors: Sequence[float] | None = None,
    latent_mode: str = "all",
    chunk: int = 16,
) -> SynthFn:
    """Adapter running a generator in eval mode over record chunks.

    Priors follow the training-time convention: ``median`` reads the target
    sequence's stored per-volume prior, ``dataset-mean`` uses the supplied
    per-sequence means, ``off`` passes nothing.
    """
    if ie_mode not in ("off", "median", "dataset-mean"):
        raise ParameterError(f"unknown ie_mode {ie_mode!r}")
    if ie_mode == "dataset-mean" and mean_priors is None:
        raise ParameterError("ie_mode 'dataset-mean' needs mean_priors")

    def prior_for(record: SliceRecord, target: int) -> float | None:
        if ie_mode == "off":
            return None
        if ie_mode == "median":
            if record.priors is None:
                raise PriorError(
                    f"record {record.subject_id}[{record.slice_index}] has no "
                    "stored priors but ie_mode is 'median'"
                )
            return float(record.priors[target])
        return float(mean_priors[target])

    def synth(records: Sequence[SliceRecord], availability, target: int) -> np.ndarray:
        generator.eval()
        outputs = []
        with torch.no_grad():
            for start in range(0, len(records), chunk):
                part = records[start : start + chunk]
                images = torch.from_numpy(
                    np.ascontiguousarray(np.stack([r.images for r in part]))
                )
                prior = None
                if ie_mode != "off":
                    prior = torch.tensor(
                        [prior_for(r, target) for r in part], dtype=images.dtype
                    )
                out = generator(
                    images, availability, target, prior=prior, latent_mode=latent_mode
                )
                outputs.append(out.image[:, 0].numpy())
        return np.concatenate(outputs)

    return synth


def mean_image_synthesizer(reference_records: Sequence[SliceRecord]) -> SynthFn:
    """Baseline that always answers with the per-sequence mean image of a
    reference set, ignoring the inputs entirely."""
    if not reference_records:
        raise ParameterError("reference set is empty")
    stack = np.stack([r.images for r in reference_records])  # [M, N, H, W]
    means = stack.mean(axis=0)

    def synth(records: Sequence[SliceRecord], availability, target: int) -> np.ndarray:
        return np.repeat(means[target][None], len(records), axis=0)

    return synth


def identity_synthesizer() -> SynthFn:
    """Answers with the ground-truth target; useful as a scoring oracle."""

    def synth(records: Sequence[SliceRecord], availability, target: int) -> np.ndarray:
        return np.stack([r.images[target] for r in records])

    return synth


# ---------------------------------------------------------------------------
# Scoring


def scenario_scores(
    synth: SynthFn,
    records: Sequence[SliceRecord],
    availability,
    target: int,
    ssim_params: SSIMParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-slice PSNR and SSIM of synthesized vs ground-truth target."""
    if not records:
        raise ParameterError("no records to score")
    availability = check_availability_mask(availability, records[0].images.shape[0])
    if availability[target]:
        raise ParameterError("cannot score a target that is part of the inputs")
    params = ssim_params or SSIMParams()
    predicted = synth(records, availability, target)
    if predicted.shape != (len(records), *records[0].images.shape[1:]):
        raise ContractError(
            f"synthesizer returned shape {predicted.shape}, expected "
            f"{(len(records), *records[0].images.shape[1:])}"
        )
    psnr_values = np.array(
        [
            psnr(predicted[i], rec.images[target], data_range=params.data_range)
            for i, rec in enumerate(records)
        ]
    )
    ssim_values = np.array(
        [
            ssim(predicted[i], rec.images[target], params=params)
            for i, rec in enumerate(records)
        ]
    )
    return psnr_values, ssim_values


@dataclass(frozen=True)
class ScenarioRow:
    availability: tuple[int, ...]
    target: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n: int

    @property
    def n_inputs(self) -> int:
        return sum(self.availability)


@dataclass
class ScenarioTable:
    n_modalities: int
    modality_names: tuple[str, ...]
    rows: list[ScenarioRow] = field(default_factory=list)

    def __post_init__(self) -> None:
        if len(self.modality_names) != self.n_modalities:
            raise ParameterError("one name per sequence required")

    def _names(self, mask) -> str:
        return "+".join(
            name for name, bit in zip(self.modality_names, mask) if bit
        )

    def group_means(self) -> dict[int, tuple[float, float]]:
        """Mean PSNR/SSIM over scenario rows sharing an input count."""
        buckets: dict[int, list[ScenarioRow]] = defaultdict(list)
        for row in self.rows:
            buckets[row.n_inputs].append(row)
        return {
            k: (
                float(np.mean([r.psnr_mean for r in rows])),
                float(np.mean([r.ssim_mean for r in rows])),
            )
            for k, rows in sorted(buckets.items())
        }

    def overall(self) -> tuple[float, float]:
        if not self.rows:
            raise ParameterError("empty table")
        return (
            float(np.mean([r.psnr_mean for r in self.rows])),
            float(np.mean([r.ssim_mean for r in self.rows])),
        )

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "kind", "inputs", "target", "n_inputs",
                    "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "n",
                ]
            )
            for row in self.rows:
                writer.writerow(
                    [
                        "pair",
                        self._names(row.availability),
                        self.modality_names[row.target],
                        row.n_inputs,
                        f"{row.psnr_mean:.4f}", f"{row.psnr_std:.4f}",
                        f"{row.ssim_mean:.6f}", f"{row.ssim_std:.6f}",
                        row.n,
                    ]
                )
            for k, (p, s) in self.group_means().items():
                writer.writerow(
                    ["group", f"{k}-input", "", k, f"{p:.4f}", "", f"{s:.6f}", "", ""]
                )
            p, s = self.overall()
            writer.writerow(
                ["overall", "all", "", "", f"{p:.4f}", "", f"{s:.6f}", "", ""]
            )

    def render(self) -> str:
        lines = [
            f"{'inputs':<22} {'target':<8} {'PSNR':>8} {'±':>6} {'SSIM':>8} {'±':>7} {'n':>5}",
            "-" * 70,
        ]
        for count in sorted({row.n_inputs for row in self.rows}):
            for row in self.rows:
                if row.n_inputs != count:
                    continue
                lines.append(
                    f"{self._names(row.availability):<22} "
                    f"{self.modality_names[row.target]:<8} "
                    f"{row.psnr_mean:>8.3f} {row.psnr_std:>6.3f} "
                    f"{row.ssim_mean:>8.4f} {row.ssim_std:>7.4f} {row.n:>5d}"
                )
            p, s = self.group_means()[count]
            label = f"average ({count} input{'s' if count > 1 else ''})"
            lines.append(f"{label:<31} {p:>8.3f} {'':>6} {s:>8.4f}")
            lines.append("-" * 70)
        p, s = self.overall()
        lines.append(f"{'average (all)':<31} {p:>8.3f} {'':>6} {s:>8.4f}")
        return "\n".join(lines)


def evaluate_model(
    synth: SynthFn,
    records: Sequence[SliceRecord],
    n_modalities: int,
    modality_names: Sequence[str] | None = None,
    ssim_params: SSIMParams | None = None,
    scenarios: Sequence[tuple[tuple[int, ...], int]] | None = None,
) -> ScenarioTable:
    """Score every scenario and assemble the aggregated table."""
    if not records:
        raise ParameterError("no evaluation records")
    names = tuple(
        modality_names
        or DEFAULT_MODALITY_NAMES.get(
            n_modalities, [f"M{i}" for i in range(n_modalities)]
        )
    )
    table = ScenarioTable(n_modalities=n_modalities, modality_names=names)
    for availability, target in scenarios or enumerate_scenarios(n_modalities):
        psnr_values, ssim_values = scenario_scores(
            synth, records, availability, target, ssim_params
        )
        table.rows.append(
            ScenarioRow(
                availability=tuple(availability),
                target=target,
                psnr_mean=float(psnr_values.mean()),
                psnr_std=float(psnr_values.std()),
                ssim_mean=float(ssim_values.mean()),
                ssim_std=float(ssim_values.std()),
                n=len(records),
            )
        )
    return table


# ---------------------------------------------------------------------------
# Focused measurements used by the ablation and consistency studies


def lesion_psnr(
    synth: SynthFn,
    records: Sequence[SliceRecord],
    availability,
    target: int,
    data_range: float = 2.0,
) -> np.ndarray:
    """Per-slice PSNR restricted to lesion-labelled pixels; slices without
    labelled lesion pixels are skipped."""
    predicted = synth(records, availability, target)
    values = []
    for i, rec in enumerate(records):
        if rec.labels is None:
            continue
        mask = (rec.labels == LABEL_LESION_CORE) | (rec.labels == LABEL_LESION_RIM)
        if not mask.any():
            continue
        values.append(
            masked_psnr(predicted[i], rec.images[target], mask, data_range=data_range)
        )
    if not values:
        raise ParameterError("no slices carry lesion labels")
    return np.array(values)


def slice_mean_by_subject(
    synth: SynthFn,
    records: Sequence[SliceRecord],
    availability,
    target: int,
) -> dict[str, np.ndarray]:
    """Mean synthesized intensity of every slice, grouped by subject in
    slice order; input to the volume-consistency comparison."""
    ordered = sorted(records, key=lambda r: (r.subject_id, r.slice_index))
    predicted = synth(ordered, availability, target)
    grouped: dict[str, list[float]] = defaultdict(list)
    for value, rec in zip(predicted, ordered):
        grouped[rec.subject_id].append(float(value.mean()))
    return {k: np.array(v) for k, v in grouped.items()}


def within_subject_variance(grouped: dict[str, np.ndarray]) -> float:
    """Average over subjects of the variance of their per-slice means."""
    variances = [float(np.var(v)) for v in grouped.values() if len(v) >= 2]
    if not variances:
        raise ParameterError("need at least one subject with 2+ slices")
    return float(np.mean(variances))


# ---------------------------------------------------------------------------
# Representation analysis


def latent_ablation_synthesis(
    generator: Generator,
    images: torch.Tensor,
    availability,
    target: int,
    mode: str,
    prior=None,
) -> torch.Tensor:
    """Synthesize from a restricted representation: 'all' is the normal
    path, 'only_complementary' keeps just the joint stream (needs 2+
    inputs), 'only_specific' keeps the per-sequence streams, and
    'common_only' decodes the fused latent without the target shift."""
    generator.eval()
    with torch.no_grad():
        out = generator(images, availability, target, prior=prior, latent_mode=mode)
    return out.image


def export_latent_embeddings(
    generator: Generator,
    records: Sequence[SliceRecord],
    out_path: str | Path,
    scenarios: Sequence[tuple[tuple[int, ...], int]] | None = None,
    ie_mode: str = "off",
    mean_priors: Sequence[float] | None = None,
) -> int:
    """Write pooled latent vectors (spatial mean per channel) for external
    embedding tools: one 'common' row (pre-shift fused latent) and one
    'target' row (post-shift latent) per record and scenario. Returns the
    number of data rows written."""
    if not records:
        raise ParameterError("no records to embed")
    if ie_mode not in ("off", "median", "dataset-mean"):
        raise ParameterError(f"unknown ie_mode {ie_mode!r}")
    if ie_mode == "dataset-mean" and mean_priors is None:
        raise ParameterError("ie_mode 'dataset-mean' needs mean_priors")
    n = records[0].images.shape[0]
    pairs = list(scenarios or enumerate_scenarios(n))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    generator.eval()
    n_rows = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        channels = generator.config.encoder.latent_channels
        writer.writerow(
            ["subject", "slice", "availability", "target", "space"]
            + [f"e{i}" for i in range(channels)]
        )
        with torch.no_grad():
            for availability, target in pairs:
                for rec in records:
                    images = torch.from_numpy(np.ascontiguousarray(rec.images))[None]
                    prior = None
                    if ie_mode == "median":
                        prior = float(rec.priors[target])
                    elif ie_mode == "dataset-mean":
                        prior = float(mean_priors[target])
                    out = generator(images, availability, target, prior=prior)
                    mask_text = "".join(str(b) for b in availability)
                    for space, latent in (
                        ("common", out.latent),
                        (f"target-{target}", out.translated),
                    ):
                        pooled = latent[0].mean(dim=(1, 2)).numpy()
                        writer.writerow(
                            [rec.subject_id, rec.slice_index, mask_text, target, space]
                            + [f"{v:.6e}" for v in pooled]
                        )
                        n_rows += 1
    return n_rows


# ---------------------------------------------------------------------------
# Imputation


def impute_volume(
    generator: Generator,
    volume: MultisequenceVolume,
    ie_mode: str = "off",
    mean_priors: Sequence[float] | None = None,
) -> MultisequenceVolume:
    """Fill the missing sequences of one volume slice-by-slice."""
    if sum(volume.available) == 0:
        raise ContractError(
            f"subject {volume.subject_id} has no available sequences to impute from"
        )
    if all(volume.available):
        return volume
    n, depth = len(volume.available), volume.volumes.shape[1]
    generator.eval()
    filled = volume.volumes.copy()
    stack = torch.from_numpy(np.ascontiguousarray(volume.volumes))  # [N, D, H, W]
    for target in range(n):
        if volume.available[target]:
            continue
        prior = None
        if ie_mode == "median":
            if volume.priors and volume.modalities[target] in volume.priors:
                prior = float(volume.priors[volume.modalities[target]])
            elif mean_priors is not None:
                prior = float(mean_priors[target])
            else:
                raise PriorError(
                    f"no stored prior for missing sequence "
                    f"{volume.modalities[target]!r} of {volume.subject_id} and "
                    "no fallback means supplied"
                )
        elif ie_mode == "dataset-mean":
            if mean_priors is None:
                raise PriorError("ie_mode 'dataset-mean' needs mean priors")
            prior = float(mean_priors[target])
        with torch.no_grad():
            for z in range(depth):
                images = stack[:, z][None]  # [1, N, H, W]
                prior_t = None if prior is None else torch.tensor([prior])
                out = generator(images, volume.available, target, prior=prior_t)
                filled[target, z] = out.image[0, 0].numpy()
    return MultisequenceVolume(
        subject_id=volume.subject_id,
        modalities=volume.modalities,
        volumes=filled,
        available=tuple(1 for _ in range(n)),
        labels=volume.labels,
        priors=volume.priors,
        normalization=volume.normalization,
        extra=dict(volume.extra, imputed="".join(str(b) for b in volume.available)),
    )


def impute_dataset(
    generator: Generator,
    in_root: str | Path,
    out_root: str | Path,
    ie_mode: str = "off",
    mean_priors: Sequence[float] | None = None,
) -> dict:
    """Complete every subject under ``in_root`` into ``out_root``; available
    sequences pass through bit-exact, missing ones are synthesized."""
    in_root, out_root = Path(in_root), Path(out_root)
    subject_dirs = list_subjects(in_root)
    if not subject_dirs:
        raise ContractError(f"no subjects found under {in_root}")
    summary = {"subjects": len(subject_dirs), "synthesized": 0, "copied": 0}
    for subject_dir in subject_dirs:
        volume = load_volume_set(subject_dir)
        completed = impute_volume(generator, volume, ie_mode, mean_priors)
        save_volume_set(out_root, completed)
        summary["synthesized"] += sum(1 for bit in volume.available if not bit)
        summary["copied"] += sum(volume.available)
    return summary
