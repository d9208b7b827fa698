"""Command-line interface: dataset generation, training, synthesis,
evaluation, and imputation as reproducible runs.

Config precedence is defaults < --config JSON file < explicit flags, and
every command writes its fully resolved settings next to its outputs, so a
run can be re-executed from the echoed file alone.

Exit codes: 0 success, 1 user error (bad flags, bad data, contract
violations), 2 runtime failure (training divergence, unexpected errors).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    SlicePolicy,
    generate_phantom_dataset,
    list_subjects,
    load_dataset,
    load_volume_set,
    read_meta,
    save_volume_set,
    MultisequenceVolume,
    META_FILENAME,
)
from .errors import MrisynthError, TrainingDivergedError
from .encoders import EncoderConfig
from .evaluation import (
    batched_model_synthesizer,
    enumerate_scenarios,
    evaluate_model,
    impute_dataset,
    scenario_scores,
)
from .infuser import InfuserConfig
from .losses import LossWeights
from .metrics import wilcoxon_signed_rank
from .errors import InsufficientDataError
from .networks import VARIANTS
from .training import (
    IE_MODES,
    TrainConfig,
    Trainer,
    load_generator_for_inference,
    train_config_to_dict,
)


# ---------------------------------------------------------------------------
# Shared plumbing


def directory_digest(root: Path) -> str:
    """Content hash of the data files under a directory; run bookkeeping
    (config.resolved) is excluded so regeneration digests stay comparable."""
    digest = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        if path.name == "config.resolved":
            continue
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_resolved_config(out_dir: Path, args: argparse.Namespace) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        key: (str(value) if isinstance(value, Path) else value)
        for key, value in sorted(vars(args).items())
        if key not in ("func", "config")
    }
    resolved["version"] = __version__
    path = out_dir / "config.resolved"
    path.write_text(json.dumps(resolved, indent=2) + "\n", encoding="utf-8")
    return path


def apply_config_file(parser_map: dict, args_in: list[str]) -> list[str]:
    """Resolve --config by injecting file values as subcommand defaults, so
    explicit flags still win; unknown keys fail fast."""
    if not args_in or args_in[0] not in parser_map:
        return args_in
    sub = parser_map[args_in[0]]
    probe, _ = sub.parse_known_args(args_in[1:])
    if getattr(probe, "config", None) is None:
        return args_in
    with open(probe.config, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise MrisynthError(f"{probe.config} must hold a JSON object")
    valid = {
        action.dest
        for action in sub._actions
        if action.dest not in ("help", "config")
    }
    unknown = sorted(set(data) - valid)
    if unknown:
        raise MrisynthError(
            f"unknown keys in {probe.config}: {', '.join(unknown)}"
        )
    sub.set_defaults(**data)
    return args_in


def slice_policy_from(args: argparse.Namespace) -> SlicePolicy:
    return SlicePolicy(
        mode=args.slice_mode,
        min_brain_pixels=args.min_brain_pixels,
        center_k=args.center_k,
    )


def add_slice_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--slice-mode",
        choices=("brain_threshold", "center_k", "all"),
        default="brain_threshold",
        help="which axial slices enter the working set",
    )
    sub.add_argument("--min-brain-pixels", type=int, default=2000)
    sub.add_argument("--center-k", type=int, default=80)


def dataset_modality_names(root: Path) -> list[str]:
    subjects = list_subjects(root)
    if not subjects:
        raise MrisynthError(f"no subjects under {root}")
    meta = read_meta(subjects[0] / META_FILENAME)
    return meta["modalities"].split(",")


def manifest_mean_priors(manifest: dict) -> list[float] | None:
    means = manifest.get("mean_priors")
    return None if means is None else [float(v) for v in means]


def check_width(expected: int, records) -> None:
    actual = records[0].images.shape[0]
    if actual != expected:
        raise MrisynthError(
            f"checkpoint was trained on {expected} sequences but the dataset "
            f"has {actual}"
        )


# ---------------------------------------------------------------------------
# phantom-gen


def cmd_phantom_gen(args: argparse.Namespace) -> int:
    manifest = generate_phantom_dataset(
        args.out,
        n_subjects=args.subjects,
        seed=args.seed,
        size=args.size,
        depth=args.depth,
        n_modalities=args.modalities,
        lesion_prob=args.lesion_prob,
        noise_sigma=args.noise_sigma,
        intensity_jitter=args.jitter,
    )
    manifest["content_digest"] = directory_digest(Path(args.out))
    write_resolved_config(Path(args.out), args)
    print(json.dumps(manifest, indent=2))
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args: argparse.Namespace) -> int:
    policy = slice_policy_from(args)
    records = load_dataset(args.data, policy, require_complete=True)
    subjects = sorted({r.subject_id for r in records})
    if args.val_subjects >= len(subjects):
        raise MrisynthError(
            f"--val-subjects {args.val_subjects} leaves no training subjects "
            f"(dataset has {len(subjects)})"
        )
    val_ids = set(subjects[len(subjects) - args.val_subjects :]) if args.val_subjects else set()
    train_records = [r for r in records if r.subject_id not in val_ids]
    val_records = [r for r in records if r.subject_id in val_ids]

    n_modalities = records[0].images.shape[0]
    image_size = args.image_size or records[0].images.shape[-1]
    config = TrainConfig(
        n_modalities=n_modalities,
        image_size=image_size,
        epochs=args.epochs,
        batch_size=args.batch_size,
        micro_batch=args.micro_batch,
        lr_g=args.lr_g,
        lr_d=args.lr_d,
        warmup_frac=args.warmup_frac,
        seed=args.seed,
        variant=args.variant,
        ie_mode=args.ie,
        weights=LossWeights(
            reconstruction=args.w_rec,
            similarity=args.w_sim,
            cycle=args.w_cyc,
            adversarial_g=args.w_adv_g,
            classification_g=args.w_cls_g,
            adversarial_d=args.w_adv_d,
            classification_d=args.w_cls_d,
        ),
        encoder=EncoderConfig(
            base_channels=args.base_channels,
            downsample_factor=args.downsample,
            n_residual_blocks=args.res_blocks,
        ),
        infuser=InfuserConfig(
            token_dim=args.token_dim,
            n_heads=args.heads,
            n_blocks=args.blocks,
            patch_size=args.patch_size,
        ),
        disc_base_channels=args.disc_channels,
        disc_layers=args.disc_layers,
        log_every=args.log_every,
    )
    run_dir = Path(args.out)
    write_resolved_config(run_dir, args)
    (run_dir / "train_config.json").write_text(
        json.dumps(train_config_to_dict(config), indent=2) + "\n", encoding="utf-8"
    )
    fusion = "summation" if config.variant == "no-caff" else "channel-attention"
    print(
        f"training variant={config.variant} fusion={fusion} ie={config.ie_mode} "
        f"on {len(train_records)} slices ({len(val_records)} validation)"
    )
    print(
        "weights:"
        f" rec={config.weights.reconstruction}"
        f" sim={config.weights.similarity}"
        f" cyc={config.weights.cycle}"
        f" adv_g={config.weights.adversarial_g}"
        f" cls_g={config.weights.classification_g}"
        f" adv_d={config.weights.adversarial_d}"
        f" cls_d={config.weights.classification_d}"
    )
    trainer = Trainer(config, train_records, run_dir=run_dir)
    try:
        trainer.train(
            val_records=val_records or None,
            checkpoint_every=args.checkpoint_every or None,
        )
    finally:
        trainer.close()
    final = run_dir / "checkpoints" / "final.pt"
    print(f"finished at step {trainer.step}; checkpoint: {final}")
    return 0


# ---------------------------------------------------------------------------
# synthesize


def parse_modality_list(text: str, names: list[str]) -> list[int]:
    indices = []
    for token in text.split(","):
        token = token.strip()
        if token not in names:
            raise MrisynthError(
                f"unknown sequence {token!r}; dataset has {', '.join(names)}"
            )
        indices.append(names.index(token))
    if not indices:
        raise MrisynthError("empty sequence list")
    return indices


def resolve_prior(
    config: TrainConfig, manifest: dict, volume, target: int
) -> float | None:
    if config.ie_mode == "off":
        return None
    means = manifest_mean_priors(manifest)
    name = volume.modalities[target]
    if config.ie_mode == "median":
        if volume.priors and name in volume.priors:
            return float(volume.priors[name])
        if means is not None:
            return float(means[target])
        raise MrisynthError(
            f"no stored intensity prior for {name!r} and the checkpoint "
            "carries no dataset means"
        )
    if means is None:
        raise MrisynthError("checkpoint carries no dataset-mean priors")
    return float(means[target])


def cmd_synthesize(args: argparse.Namespace) -> int:
    generator, config, manifest = load_generator_for_inference(args.checkpoint)
    volume = load_volume_set(Path(args.data) / args.subject)
    names = list(volume.modalities)
    if len(names) != config.n_modalities:
        raise MrisynthError(
            f"checkpoint expects {config.n_modalities} sequences, subject has "
            f"{len(names)}"
        )
    available = parse_modality_list(args.available, names)
    target = parse_modality_list(args.target, names)
    if len(target) != 1:
        raise MrisynthError("--target must name exactly one sequence")
    target = target[0]
    if target in available:
        raise MrisynthError(
            f"target {names[target]!r} is listed as available; nothing to synthesize"
        )
    for idx in available:
        if not volume.available[idx]:
            raise MrisynthError(
                f"sequence {names[idx]!r} is requested as input but missing "
                f"for subject {volume.subject_id}"
            )
    mask = tuple(1 if i in available else 0 for i in range(len(names)))
    prior = resolve_prior(config, manifest, volume, target)
    latent_mode = args.latent_mode.replace("-", "_")

    stack = torch.from_numpy(np.ascontiguousarray(volume.volumes))
    synthesized = np.zeros_like(volume.volumes[target])
    generator.eval()
    with torch.no_grad():
        for z in range(volume.volumes.shape[1]):
            prior_t = None if prior is None else torch.tensor([prior])
            out = generator(
                stack[:, z][None], mask, target, prior=prior_t, latent_mode=latent_mode
            )
            synthesized[z] = out.image[0, 0].numpy()

    volumes = np.zeros_like(volume.volumes)
    volumes[target] = synthesized
    result = MultisequenceVolume(
        subject_id=volume.subject_id,
        modalities=volume.modalities,
        volumes=volumes,
        available=tuple(1 if i == target else 0 for i in range(len(names))),
        labels=None,
        priors=volume.priors,
        normalization=volume.normalization,
        extra={
            "synthesized_from": "+".join(names[i] for i in available),
            "latent_mode": latent_mode,
        },
    )
    out_dir = Path(args.out)
    save_volume_set(out_dir, result)
    write_resolved_config(out_dir, args)
    print(f"wrote {names[target]} for {volume.subject_id} to {out_dir / volume.subject_id}")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args: argparse.Namespace) -> int:
    generator, config, manifest = load_generator_for_inference(args.checkpoint)
    records = load_dataset(args.data, slice_policy_from(args), require_complete=True)
    check_width(config.n_modalities, records)
    names = dataset_modality_names(Path(args.data))
    synth = batched_model_synthesizer(
        generator, config.ie_mode, manifest_mean_priors(manifest)
    )
    table = evaluate_model(
        synth, records, config.n_modalities, modality_names=names
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.write_csv(out_dir / "scores.csv")
    (out_dir / "scores.txt").write_text(table.render() + "\n", encoding="utf-8")
    write_resolved_config(out_dir, args)
    print(table.render())

    if args.baseline_checkpoint:
        base_gen, base_config, base_manifest = load_generator_for_inference(
            args.baseline_checkpoint
        )
        if base_config.n_modalities != config.n_modalities:
            raise MrisynthError("the two checkpoints disagree on sequence count")
        base_synth = batched_model_synthesizer(
            base_gen, base_config.ie_mode, manifest_mean_priors(base_manifest)
        )
        lines = ["inputs,target,psnr,baseline_psnr,delta,wilcoxon_w,p_value,significant"]
        printable = []
        for availability, target in enumerate_scenarios(config.n_modalities):
            ours, _ = scenario_scores(synth, records, availability, target)
            theirs, _ = scenario_scores(base_synth, records, availability, target)
            try:
                result = wilcoxon_signed_rank(ours, theirs)
                p_text, w_text = f"{result.p_value:.6g}", f"{result.statistic:.1f}"
                star = "*" if result.p_value < 0.05 else ""
            except InsufficientDataError:
                p_text, w_text, star = "", "", ""
            inputs = "+".join(n for n, b in zip(names, availability) if b)
            lines.append(
                f"{inputs},{names[target]},{ours.mean():.4f},{theirs.mean():.4f},"
                f"{ours.mean() - theirs.mean():.4f},{w_text},{p_text},{star}"
            )
            printable.append(
                f"{inputs:>20} -> {names[target]:<5} "
                f"{ours.mean():8.3f} vs {theirs.mean():8.3f}  "
                f"p={p_text or 'n/a'} {star}"
            )
        (out_dir / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print("\nagainst baseline checkpoint (* = p < 0.05):")
        print("\n".join(printable))
    return 0


# ---------------------------------------------------------------------------
# impute


def cmd_impute(args: argparse.Namespace) -> int:
    generator, config, manifest = load_generator_for_inference(args.checkpoint)
    summary = impute_dataset(
        generator,
        args.data,
        args.out,
        ie_mode=config.ie_mode,
        mean_priors=manifest_mean_priors(manifest),
    )
    write_resolved_config(Path(args.out), args)
    print(json.dumps(summary, indent=2))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="mrisynth",
        description="Multisequence MR image synthesis: train, evaluate, impute.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    parser_map: dict[str, argparse.ArgumentParser] = {}

    def sub(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = subparsers.add_parser(name, help=help_text)
        p.add_argument(
            "--config", type=Path, default=None,
            help="JSON file of defaults; explicit flags still win",
        )
        p.set_defaults(func=func)
        parser_map[name] = p
        return p

    p = sub("phantom-gen", cmd_phantom_gen, "generate a procedural phantom dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--depth", type=int, default=12)
    p.add_argument("--modalities", type=int, default=4)
    p.add_argument("--lesion-prob", type=float, default=0.5)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--jitter", type=float, default=0.12)

    p = sub("train", cmd_train, "train a synthesis model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--micro-batch", type=int, default=4)
    p.add_argument("--lr-g", type=float, default=1e-4)
    p.add_argument("--lr-d", type=float, default=1e-5)
    p.add_argument("--warmup-frac", type=float, default=0.03)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--ie", choices=IE_MODES, default="off")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--downsample", type=int, default=4)
    p.add_argument("--res-blocks", type=int, default=5)
    p.add_argument("--token-dim", type=int, default=256)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--patch-size", type=int, default=1)
    p.add_argument("--disc-channels", type=int, default=64)
    p.add_argument("--disc-layers", type=int, default=4)
    p.add_argument("--val-subjects", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--w-rec", type=float, default=10.0)
    p.add_argument("--w-sim", type=float, default=1.0)
    p.add_argument("--w-cyc", type=float, default=1.0)
    p.add_argument("--w-adv-g", type=float, default=0.25)
    p.add_argument("--w-cls-g", type=float, default=0.25)
    p.add_argument("--w-adv-d", type=float, default=0.25)
    p.add_argument("--w-cls-d", type=float, default=0.25)
    add_slice_flags(p)

    p = sub("synthesize", cmd_synthesize, "synthesize one sequence for one subject")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--available", required=True, help="comma-separated input sequences")
    p.add_argument("--target", required=True, help="sequence to synthesize")
    p.add_argument(
        "--latent-mode",
        choices=("all", "only-specific", "only-complementary", "common-only"),
        default="all",
    )
    p.add_argument("--out", type=Path, required=True)

    p = sub("evaluate", cmd_evaluate, "score a checkpoint over all scenarios")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--baseline-checkpoint", type=Path, default=None)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    add_slice_flags(p)

    p = sub("impute", cmd_impute, "complete a dataset with synthesized sequences")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    return parser, parser_map


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, parser_map = build_parser()
    try:
        argv = apply_config_file(parser_map, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse --help (0) or usage error (2 -> 1)
        code = exc.code if isinstance(exc.code, int) else 1
        return 0 if code == 0 else 1
    except TrainingDivergedError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except (MrisynthError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
