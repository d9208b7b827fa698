"""Training loop: scenario sampling, schedules, optimization, checkpoints.

Each optimizer step consumes one effective batch, assembled from micro
batches that share a synthesis scenario (availability subset, target,
held-out cycle sequence). Half of every batch uses hard scenarios (one input
available, reverse pass sees only the synthesized target), half easy ones
(several inputs, reverse pass sees everything but the held-out sequence).
Within one epoch every selected slice is visited once per target sequence.

The discriminator accumulates over the whole batch and steps first (fakes
generated without graph); the generator then recomputes against the updated
discriminator and steps. Updates are strictly isolated: neither step touches
the other network's parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import SliceRecord, check_availability_mask
from .encoders import EncoderConfig
from .errors import ContractError, ParameterError, TrainingDivergedError
from .infuser import InfuserConfig
from .losses import (
    LossReport,
    LossWeights,
    adversarial_losses_from_logits,
    classification_loss,
    cycle_pass,
    reconstruction_loss,
    similarity_loss,
    total_discriminator_loss,
    total_generator_loss,
)
from .metrics import psnr
from .networks import (
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    PatchDiscriminator,
    build_discriminator,
    build_generator,
)

CHECKPOINT_FORMAT = "mrisynth-checkpoint-v1"
IE_MODES = ("off", "median", "dataset-mean")


# ---------------------------------------------------------------------------
# Scenarios


@dataclass(frozen=True)
class ScenarioSample:
    """One synthesis task: what is visible, what to synthesize, and which
    sequence the reverse (cycle) pass must recover from which inputs."""

    availability: tuple[int, ...]
    target: int
    excluded: int
    reverse: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.availability)
        object.__setattr__(
            self, "availability", check_availability_mask(self.availability, n)
        )
        object.__setattr__(self, "reverse", check_availability_mask(self.reverse, n))
        if not 0 <= self.target < n or not 0 <= self.excluded < n:
            raise ParameterError("target/excluded out of range")
        if self.target == self.excluded:
            raise ParameterError("target and excluded must differ")
        if self.availability[self.target] != 0:
            raise ParameterError("target sequence must be unavailable in the input")
        if self.availability[self.excluded] != 1:
            raise ParameterError("excluded sequence must be available in the input")
        if self.reverse[self.target] != 1 or self.reverse[self.excluded] != 0:
            raise ParameterError(
                "reverse availability must include the target and exclude the held-out sequence"
            )

    @property
    def n_modalities(self) -> int:
        return len(self.availability)

    @property
    def is_hard(self) -> bool:
        return sum(self.availability) == 1


def _draw_scenario(
    n: int, target: int, hard: bool, rng: np.random.Generator
) -> ScenarioSample:
    others = [i for i in range(n) if i != target]
    if hard:
        excluded = others[int(rng.integers(len(others)))]
        availability = tuple(1 if i == excluded else 0 for i in range(n))
        reverse = tuple(1 if i == target else 0 for i in range(n))
    else:
        k = int(rng.integers(2, n))  # 2 .. n-1 available inputs
        picked = rng.choice(len(others), size=k, replace=False)
        availability = [0] * n
        for j in picked:
            availability[others[int(j)]] = 1
        excluded = others[int(picked[int(rng.integers(k))])]
        availability = tuple(availability)
        reverse = tuple(0 if i == excluded else 1 for i in range(n))
    return ScenarioSample(availability, target, excluded, reverse)


def sample_scenario_batch(
    batch_size: int, n_modalities: int, rng: np.random.Generator
) -> list[ScenarioSample]:
    """Draw a balanced scenario batch: exactly half hard, half easy, shuffled.

    Easy scenarios need 2..N-1 available inputs with the target excluded,
    which is infeasible for N=2, so training requires N >= 3.
    """
    if batch_size <= 0 or batch_size % 2:
        raise ParameterError(f"batch_size must be a positive even number, got {batch_size}")
    if n_modalities < 3:
        raise ParameterError(
            f"scenario sampling needs at least 3 modalities, got {n_modalities} "
            "(easy scenarios are infeasible below that)"
        )
    samples = []
    for i in range(batch_size):
        hard = i < batch_size // 2
        target = int(rng.integers(n_modalities))
        samples.append(_draw_scenario(n_modalities, target, hard, rng))
    order = rng.permutation(batch_size)
    return [samples[int(j)] for j in order]


# ---------------------------------------------------------------------------
# Learning-rate schedule


def lr_schedule(
    step: int, total_steps: int, base_lr: float, warmup_steps: int
) -> float:
    """Linear warmup to ``base_lr`` then cosine decay, exactly zero at the end."""
    if total_steps <= 0:
        raise ParameterError("total_steps must be positive")
    if not 0 <= warmup_steps < total_steps:
        raise ParameterError("need 0 <= warmup_steps < total_steps")
    step = min(max(step, 0), total_steps)
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Config


@dataclass
class TrainConfig:
    n_modalities: int
    image_size: int
    epochs: int = 100
    batch_size: int = 24  # effective batch, accumulated over micro batches
    micro_batch: int = 4
    lr_g: float = 1e-4
    lr_d: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_frac: float = 0.03
    seed: int = 0
    variant: str = "full"
    ie_mode: str = "off"
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    infuser: InfuserConfig = field(default_factory=InfuserConfig)
    disc_base_channels: int = 64
    disc_layers: int = 4
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.n_modalities < 3:
            raise ParameterError("training needs at least 3 modalities")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size % self.micro_batch:
            raise ParameterError(
                f"micro_batch {self.micro_batch} must divide batch_size {self.batch_size}"
            )
        if (self.batch_size // self.micro_batch) % 2:
            raise ParameterError(
                "batch_size / micro_batch must be even so each batch can be "
                "half hard / half easy"
            )
        if self.ie_mode not in IE_MODES:
            raise ParameterError(f"ie_mode must be one of {IE_MODES}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ParameterError("warmup_frac must be in [0, 1)")
        # keep the infuser's intensity pathway in sync with the training mode
        self.infuser.use_intensity_encoding = self.ie_mode != "off"

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            n_modalities=self.n_modalities,
            image_size=self.image_size,
            encoder=self.encoder,
            infuser=self.infuser,
            variant=self.variant,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            n_modalities=self.n_modalities,
            base_channels=self.disc_base_channels,
            n_layers=self.disc_layers,
        )


def train_config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    data["weights"] = LossWeights(**data["weights"])
    data["encoder"] = EncoderConfig(**data["encoder"])
    data["infuser"] = InfuserConfig(**data["infuser"])
    return TrainConfig(**data)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(train_config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Batch assembly


@dataclass
class TrainSample:
    images: torch.Tensor  # [N, H, W] complete ground-truth stack
    scenario: ScenarioSample
    priors: np.ndarray | None = None  # [N] per-sequence intensity priors


class Trainer:
    """Owns the two networks, their optimizers, and the step/epoch machinery."""

    def __init__(
        self,
        config: TrainConfig,
        records: Sequence[SliceRecord],
        run_dir: str | Path | None = None,
        generator: Generator | None = None,
        discriminator: PatchDiscriminator | None = None,
    ):
        if not records:
            raise ParameterError("no training records provided")
        self.config = config
        self.records = list(records)
        for rec in self.records:
            if rec.images.shape[0] != config.n_modalities:
                raise ContractError(
                    f"record {rec.subject_id}[{rec.slice_index}] has "
                    f"{rec.images.shape[0]} sequences, config expects "
                    f"{config.n_modalities}"
                )
        self.generator = generator or build_generator(
            config.generator_config(), seed=config.seed
        )
        self.discriminator = discriminator or build_discriminator(
            config.discriminator_config(), seed=config.seed + 1
        )
        self.opt_g = torch.optim.Adam(
            self.generator.parameters(), lr=config.lr_g, betas=(config.beta1, config.beta2)
        )
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(), lr=config.lr_d, betas=(config.beta1, config.beta2)
        )
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.step = 0
        self.epoch = 0
        self._nonfinite_run = 0
        self._lr_halved = False
        self._lr_scale = 1.0

        groups_per_batch = config.batch_size // config.micro_batch
        micro_per_epoch = config.n_modalities * math.ceil(
            len(self.records) / config.micro_batch
        )
        self.steps_per_epoch = max(1, micro_per_epoch // groups_per_batch)
        self.total_steps = config.epochs * self.steps_per_epoch
        self.warmup_steps = int(self.total_steps * config.warmup_frac)
        if self.warmup_steps >= self.total_steps:
            self.warmup_steps = max(0, self.total_steps - 1)

        self.mean_priors: np.ndarray | None = None
        if config.ie_mode == "dataset-mean":
            stacks = [r.priors for r in self.records if r.priors is not None]
            if not stacks:
                raise ParameterError(
                    "ie_mode 'dataset-mean' requires records with stored priors"
                )
            self.mean_priors = np.mean(np.stack(stacks), axis=0)

        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._metrics_file = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "checkpoints").mkdir(exist_ok=True)
            metrics_path = self.run_dir / "metrics.csv"
            new_file = not metrics_path.exists()
            self._metrics_file = open(metrics_path, "a", encoding="utf-8")
            if new_file:
                self._metrics_file.write("step,term,value\n")

    # -- priors -------------------------------------------------------------

    def _prior_for(self, sample: TrainSample, index: int) -> float | None:
        mode = self.config.ie_mode
        if mode == "off":
            return None
        if mode == "median":
            if sample.priors is None:
                raise ContractError("ie_mode 'median' needs per-record priors")
            return float(sample.priors[index])
        return float(self.mean_priors[index])

    # -- batch assembly -----------------------------------------------------

    def make_sample(self, record: SliceRecord, scenario: ScenarioSample) -> TrainSample:
        return TrainSample(
            images=torch.from_numpy(np.ascontiguousarray(record.images)),
            scenario=scenario,
            priors=record.priors,
        )

    def epoch_batches(self) -> list[list[TrainSample]]:
        """Plan one epoch: every record once per target, grouped into
        scenario-sharing micro batches, balanced half hard per batch.

        A trailing group remainder that cannot fill a balanced batch is
        dropped (standard drop-last semantics), keeping the half-hard
        invariant exact for every emitted batch.
        """
        cfg = self.config
        groups: list[tuple[np.ndarray, int]] = []
        for target in range(cfg.n_modalities):
            order = self.rng.permutation(len(self.records))
            for start in range(0, len(order), cfg.micro_batch):
                groups.append((order[start : start + cfg.micro_batch], target))
        self.rng.shuffle(groups)

        per_batch = cfg.batch_size // cfg.micro_batch
        batches = []
        for start in range(0, len(groups) - per_batch + 1, per_batch):
            chunk = groups[start : start + per_batch]
            hard_flags = [i < per_batch // 2 for i in range(per_batch)]
            hard_order = self.rng.permutation(per_batch)
            batch: list[TrainSample] = []
            for (indices, target), pos in zip(chunk, hard_order):
                scenario = _draw_scenario(
                    cfg.n_modalities, target, hard_flags[int(pos)], self.rng
                )
                for idx in indices:
                    batch.append(self.make_sample(self.records[int(idx)], scenario))
            batches.append(batch)
        return batches

    # -- one optimizer step -------------------------------------------------

    @staticmethod
    def _group_by_scenario(
        batch: Sequence[TrainSample],
    ) -> list[tuple[list[TrainSample], ScenarioSample]]:
        groups: list[tuple[list[TrainSample], ScenarioSample]] = []
        for sample in batch:
            if groups and groups[-1][1] == sample.scenario:
                groups[-1][0].append(sample)
            else:
                groups.append(([sample], sample.scenario))
        return groups

    def _set_lr(self) -> tuple[float, float]:
        cfg = self.config
        lr_g = self._lr_scale * lr_schedule(
            self.step + 1, self.total_steps, cfg.lr_g, self.warmup_steps
        )
        lr_d = self._lr_scale * lr_schedule(
            self.step + 1, self.total_steps, cfg.lr_d, self.warmup_steps
        )
        for group in self.opt_g.param_groups:
            group["lr"] = lr_g
        for group in self.opt_d.param_groups:
            group["lr"] = lr_d
        return lr_g, lr_d

    def _stack_group(
        self, samples: list[TrainSample], scenario: ScenarioSample
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
        images = torch.stack([s.images for s in samples])  # [B, N, H, W]
        real_target = images[:, scenario.target : scenario.target + 1]
        prior_t = prior_c = None
        if self.config.ie_mode != "off":
            prior_t = torch.tensor(
                [self._prior_for(s, scenario.target) for s in samples],
                dtype=images.dtype,
            )
            prior_c = torch.tensor(
                [self._prior_for(s, scenario.excluded) for s in samples],
                dtype=images.dtype,
            )
        return images, real_target, prior_t, prior_c

    def train_step(self, batch: Sequence[TrainSample]) -> LossReport:
        """One alternate update over an effective batch.

        Returns the per-term means; on a non-finite total the corresponding
        optimizer step is skipped, and after three consecutive failures the
        learning rate is halved once, then training aborts with a diagnostic
        checkpoint.
        """
        if not batch:
            raise ParameterError("empty batch")
        cfg = self.config
        w = cfg.weights
        total = len(batch)
        adversarial_on = (
            w.adversarial_g > 0
            or w.adversarial_d > 0
            or w.classification_g > 0
            or w.classification_d > 0
        )
        cycle_on = w.cycle > 0 or w.similarity > 0
        groups = self._group_by_scenario(batch)
        self._set_lr()
        acc = {k: 0.0 for k in (
            "rec", "sim", "cyc", "adv_g", "adv_d", "cls_real", "cls_fake",
            "total_g", "total_d",
        )}

        # ---- discriminator pass (fakes without graph), step first
        d_finite = True
        if adversarial_on:
            self.opt_d.zero_grad(set_to_none=True)
            for samples, scenario in groups:
                images, real_target, prior_t, _ = self._stack_group(samples, scenario)
                with torch.no_grad():
                    fake = self.generator(
                        images, scenario.availability, scenario.target, prior=prior_t
                    ).image
                d_real = self.discriminator(real_target)
                d_fake = self.discriminator(fake)
                _, adv_d = adversarial_losses_from_logits(
                    d_real.patch_logits, d_fake.patch_logits
                )
                cls_real = classification_loss(d_real.class_logits, scenario.target)
                cls_fake = classification_loss(d_fake.class_logits, scenario.target)
                loss_d = total_discriminator_loss(adv_d, cls_real, cls_fake, w)
                share = len(samples) / total
                (loss_d * share).backward()
                acc["adv_d"] += adv_d.item() * share
                acc["cls_real"] += cls_real.item() * share
                acc["cls_fake"] += cls_fake.item() * share
                acc["total_d"] += loss_d.item() * share
            d_finite = math.isfinite(acc["total_d"])
            if d_finite:
                self.opt_d.step()
            self.opt_d.zero_grad(set_to_none=True)

        # ---- generator pass against the (possibly updated) discriminator
        g_finite = True
        g_active = (
            w.reconstruction > 0
            or cycle_on
            or w.adversarial_g > 0
            or w.classification_g > 0
        )
        if g_active:
            for p in self.discriminator.parameters():
                p.requires_grad_(False)
            self.opt_g.zero_grad(set_to_none=True)
            for samples, scenario in groups:
                images, real_target, prior_t, prior_c = self._stack_group(
                    samples, scenario
                )
                out = self.generator(
                    images, scenario.availability, scenario.target, prior=prior_t
                )
                rec = reconstruction_loss(out.image, real_target)
                zero = out.image.new_zeros(())
                sim = cyc = adv_g = cls_fake_g = zero
                if cycle_on:
                    reverse = cycle_pass(
                        self.generator,
                        images,
                        out.image,
                        scenario.target,
                        scenario.excluded,
                        scenario.reverse,
                        prior=prior_c,
                    )
                    cyc = reconstruction_loss(
                        reverse.image,
                        images[:, scenario.excluded : scenario.excluded + 1],
                    )
                    sim = similarity_loss(out.latent, reverse.latent)
                if adversarial_on:
                    d_fake = self.discriminator(out.image)
                    adv_g = torch.nn.functional.softplus(-d_fake.patch_logits).mean()
                    cls_fake_g = classification_loss(d_fake.class_logits, scenario.target)
                loss_g = total_generator_loss(rec, sim, cyc, adv_g, cls_fake_g, w)
                share = len(samples) / total
                (loss_g * share).backward()
                acc["rec"] += rec.item() * share
                acc["sim"] += sim.detach().item() * share
                acc["cyc"] += cyc.detach().item() * share
                acc["adv_g"] += adv_g.detach().item() * share
                acc["total_g"] += loss_g.item() * share
            g_finite = math.isfinite(acc["total_g"])
            if g_finite:
                self.opt_g.step()
            self.opt_g.zero_grad(set_to_none=True)
            for p in self.discriminator.parameters():
                p.requires_grad_(True)

        report = LossReport(**acc)
        self.step += 1
        self._handle_finiteness(d_finite and g_finite, report)
        self._log_report(report)
        return report

    def _handle_finiteness(self, finite: bool, report: LossReport) -> None:
        if finite:
            self._nonfinite_run = 0
            return
        self._nonfinite_run += 1
        if self._nonfinite_run < 3:
            return
        if not self._lr_halved:
            self._lr_halved = True
            self._lr_scale = 0.5
            self._nonfinite_run = 0
            return
        if self.run_dir is not None:
            self.save_checkpoint(self.run_dir / "checkpoints" / "diverged.pt")
        raise TrainingDivergedError(
            f"non-finite losses for 3 consecutive steps after lr halving "
            f"(step {self.step}): {report.as_dict()}"
        )

    def _log_report(self, report: LossReport) -> None:
        if self._metrics_file is None:
            return
        if self.step % self.config.log_every and self.step != 1:
            return
        for term, value in report.as_dict().items():
            self._metrics_file.write(f"{self.step},{term},{value:.6g}\n")
        self._metrics_file.flush()

    def log_scalar(self, term: str, value: float) -> None:
        if self._metrics_file is not None:
            self._metrics_file.write(f"{self.step},{term},{value:.6g}\n")
            self._metrics_file.flush()

    # -- epochs -------------------------------------------------------------

    def train(
        self,
        epochs: int | None = None,
        val_records: Sequence[SliceRecord] | None = None,
        epoch_callback: Callable[["Trainer", int], None] | None = None,
        checkpoint_every: int | None = None,
    ) -> None:
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            for batch in self.epoch_batches():
                self.train_step(batch)
            self.epoch += 1
            if val_records is not None:
                self.log_scalar("val_psnr", self.validation_psnr(val_records))
            if epoch_callback is not None:
                epoch_callback(self, self.epoch)
            if (
                checkpoint_every
                and self.run_dir is not None
                and self.epoch % checkpoint_every == 0
            ):
                self.save_checkpoint(
                    self.run_dir / "checkpoints" / f"epoch{self.epoch:04d}.pt"
                )
        if self.run_dir is not None:
            self.save_checkpoint(self.run_dir / "checkpoints" / "final.pt")

    def validation_psnr(self, records: Sequence[SliceRecord]) -> float:
        """Mean PSNR synthesizing each sequence from all the others."""
        cfg = self.config
        values = []
        self.generator.eval()
        with torch.no_grad():
            for rec in records:
                images = torch.from_numpy(np.ascontiguousarray(rec.images))[None]
                for target in range(cfg.n_modalities):
                    mask = tuple(0 if i == target else 1 for i in range(cfg.n_modalities))
                    prior = None
                    if cfg.ie_mode == "median":
                        prior = float(rec.priors[target])
                    elif cfg.ie_mode == "dataset-mean":
                        prior = float(self.mean_priors[target])
                    out = self.generator(images, mask, target, prior=prior)
                    values.append(
                        psnr(out.image[0, 0].numpy(), rec.images[target])
                    )
        self.generator.train()
        return float(np.mean(values))

    # -- checkpoints ----------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "manifest": {
                "config": train_config_to_dict(self.config),
                "config_hash": config_hash(self.config),
                "step": self.step,
                "epoch": self.epoch,
                "sampler_state": self.rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
                "lr_halved": self._lr_halved,
                "lr_scale": self._lr_scale,
                "mean_priors": (
                    None if self.mean_priors is None else self.mean_priors.tolist()
                ),
            },
        }
        torch.save(payload, path)
        return path

    @classmethod
    def from_checkpoint(
        cls,
        path: str | Path,
        records: Sequence[SliceRecord],
        run_dir: str | Path | None = None,
    ) -> "Trainer":
        payload = load_checkpoint_payload(path)
        config = train_config_from_dict(payload["manifest"]["config"])
        trainer = cls(config, records, run_dir=run_dir)
        trainer.generator.load_state_dict(payload["generator"])
        trainer.discriminator.load_state_dict(payload["discriminator"])
        trainer.opt_g.load_state_dict(payload["opt_g"])
        trainer.opt_d.load_state_dict(payload["opt_d"])
        manifest = payload["manifest"]
        trainer.step = manifest["step"]
        trainer.epoch = manifest["epoch"]
        trainer.rng.bit_generator.state = manifest["sampler_state"]
        torch.set_rng_state(manifest["torch_rng"])
        trainer._lr_halved = manifest["lr_halved"]
        trainer._lr_scale = manifest["lr_scale"]
        if manifest["mean_priors"] is not None:
            trainer.mean_priors = np.array(manifest["mean_priors"])
        return trainer

    def close(self) -> None:
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None


def load_checkpoint_payload(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ContractError(f"{path} is not a recognized checkpoint file")
    return payload


def load_generator_for_inference(path: str | Path) -> tuple[Generator, TrainConfig, dict]:
    """Rebuild just the generator (eval mode) plus its training context."""
    payload = load_checkpoint_payload(path)
    config = train_config_from_dict(payload["manifest"]["config"])
    generator = build_generator(config.generator_config())
    generator.load_state_dict(payload["generator"])
    generator.eval()
    return generator, config, payload["manifest"]
