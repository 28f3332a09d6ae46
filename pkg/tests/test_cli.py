"""End-to-end command-line runs against small configs in temp directories."""

import csv
import json
import math
import os

import numpy as np
import pytest

from mnf.cli import main
from mnf.data import load_idx
from mnf.model import mlp_spec


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def toy_config(tmp_path, seed=3):
    return {
        "schema_version": 1,
        "seed": seed,
        "out_dir": str(tmp_path / "run"),
        "model": mlp_spec(1, [16], 1, kind="mnf",
                          likelihood="gaussian").to_dict(),
        "dataset": {"kind": "toy", "n": 20},
        "training": {"epochs": 30, "batch_size": 20, "lr": 0.003},
        "eval": {"n_samples": 6},
    }


def digit_config(tmp_path, seed=5):
    return {
        "schema_version": 1,
        "seed": seed,
        "out_dir": str(tmp_path / "run"),
        "model": mlp_spec(784, [16], 10, kind="mnf", t_f=1, t_b=1).to_dict(),
        "dataset": {"kind": "synthetic-digits", "n": 48, "data_seed": 1},
        "training": {"epochs": 1, "batch_size": 24},
        "eval": {"n_samples": 4},
    }


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_ok(capsys, argv):
    rc = main(argv)
    captured = capsys.readouterr()
    assert rc == 0, captured.err
    return json.loads(captured.out.strip().splitlines()[-1])


class TestToyPipeline:
    def test_train_then_regression_bands(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, toy_config(tmp_path))
        report = run_ok(capsys, ["train", "--config", cfg_path])
        out = report["out_dir"]
        assert os.path.exists(os.path.join(out, "checkpoint.mnf"))
        assert os.path.exists(os.path.join(out, "training_log.jsonl"))
        assert report["steps"] == 30

        report = run_ok(capsys, ["eval-regression", "--config", cfg_path])
        rows = read_csv(os.path.join(out, "regression_bands.csv"))
        assert len(rows) == 200
        xs = [float(r["x"]) for r in rows]
        assert xs[0] == -6.0 and xs[-1] == 6.0
        assert all(float(r["std"]) >= 3.0 for r in rows)
        assert os.path.exists(os.path.join(out, "regression_bands.png"))

    def test_training_log_is_json_lines(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, toy_config(tmp_path))
        report = run_ok(capsys, ["train", "--config", cfg_path])
        lines = open(os.path.join(report["out_dir"],
                                  "training_log.jsonl")).read().splitlines()
        assert len(lines) == 30
        first = json.loads(lines[0])
        assert set(first) == {"step", "elbo", "ll", "kl_per_layer", "wall_ms"}

    def test_config_echo_reparses_to_same_document(self, tmp_path, capsys):
        cfg = toy_config(tmp_path)
        cfg_path = write_config(tmp_path, cfg)
        report = run_ok(capsys, ["train", "--config", cfg_path])
        echoed = json.load(open(os.path.join(report["out_dir"], "config.json")))
        assert echoed == cfg


@pytest.fixture(scope="module")
def digit_run(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("digit")
    cfg = digit_config(tmp_path)
    cfg_path = write_config(tmp_path, cfg)
    assert main(["train", "--config", cfg_path]) == 0
    return tmp_path, cfg, cfg_path


class TestImagePipeline:
    def test_entropy_cdf_terminal_value_one(self, digit_run, tmp_path, capsys):
        run_dir, cfg, _ = digit_run
        ood = dict(cfg)
        ood["dataset"] = {"kind": "synthetic-letters", "n": 40, "data_seed": 2}
        cfg_path = write_config(tmp_path, ood, "ood.json")
        report = run_ok(capsys, ["eval-entropy", "--config", cfg_path])
        rows = read_csv(os.path.join(report["out_dir"], "entropy_cdf.csv"))
        assert float(rows[-1]["cdf"]) == 1.0
        assert all(0.0 <= float(r["cdf"]) <= 1.0 for r in rows)
        assert float(rows[-1]["entropy"]) == pytest.approx(math.log(10))
        summary = json.load(open(os.path.join(report["out_dir"],
                                              "entropy_summary.json")))
        assert summary["count"] == 40
        assert report["median_entropy"] == summary["median_entropy"]

    def test_adversarial_rows_track_epsilons(self, digit_run, tmp_path, capsys):
        run_dir, cfg, _ = digit_run
        swept = dict(cfg)
        swept["eval"] = {"n_samples": 3, "epsilons": [0.0, 0.2, 0.4]}
        cfg_path = write_config(tmp_path, swept, "adv.json")
        report = run_ok(capsys, ["eval-adversarial", "--config", cfg_path])
        rows = read_csv(os.path.join(report["out_dir"], "adversarial.csv"))
        assert [float(r["epsilon"]) for r in rows] == [0.0, 0.2, 0.4]
        assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)
        assert all(float(r["mean_entropy"]) >= 0.0 for r in rows)

    def test_rotation_probabilities_form_distributions(self, digit_run,
                                                       tmp_path, capsys):
        run_dir, cfg, _ = digit_run
        rot = dict(cfg)
        rot["eval"] = {"n_samples": 3, "angles": [0, 90, 180], "image_index": 2}
        cfg_path = write_config(tmp_path, rot, "rot.json")
        report = run_ok(capsys, ["eval-rotation", "--config", cfg_path])
        rows = read_csv(os.path.join(report["out_dir"], "rotation.csv"))
        assert [float(r["angle"]) for r in rows] == [0.0, 90.0, 180.0]
        for row in rows:
            probs = [float(row[f"prob_{c}"]) for c in range(10)]
            assert sum(probs) == pytest.approx(1.0, abs=1e-9)
            assert float(row["max_prob"]) == pytest.approx(max(probs))
        summary = json.load(open(os.path.join(report["out_dir"],
                                              "rotation_summary.json")))
        assert summary["image_index"] == 2

    def test_rotation_index_out_of_range(self, digit_run, tmp_path, capsys):
        run_dir, cfg, _ = digit_run
        rot = dict(cfg)
        rot["eval"] = {"image_index": 10_000}
        cfg_path = write_config(tmp_path, rot, "rot_bad.json")
        assert main(["eval-rotation", "--config", cfg_path]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "config"
        assert any("image_index" in f for f in err["fields"])

    def test_memorization_report(self, tmp_path, capsys):
        cfg = digit_config(tmp_path)
        cfg["training"] = {"epochs": 1, "batch_size": 24}
        cfg["eval"] = {"test_dataset": {"kind": "synthetic-digits", "n": 24,
                                        "data_seed": 9}}
        cfg_path = write_config(tmp_path, cfg)
        report = run_ok(capsys, ["eval-memorization", "--config", cfg_path])
        assert report["chance"] == pytest.approx(0.1)
        rows = read_csv(os.path.join(report["out_dir"], "memorization.csv"))
        assert len(rows) == 1
        assert 0.0 <= float(rows[0]["train_accuracy"]) <= 1.0
        assert 0.0 <= float(rows[0]["test_accuracy"]) <= 1.0


class TestDeterminismAndErrors:
    def test_identical_config_and_seed_byte_identical_artifacts(self, tmp_path,
                                                                capsys):
        cfg = toy_config(tmp_path)
        cfg["training"]["epochs"] = 8
        cfg_path = write_config(tmp_path, cfg)
        for sub in ("a", "b"):
            rc = main(["train", "--config", cfg_path,
                       "--out", str(tmp_path / sub), "--no-figures"])
            assert rc == 0
            rc = main(["eval-regression", "--config", cfg_path,
                       "--out", str(tmp_path / sub), "--no-figures"])
            assert rc == 0
        capsys.readouterr()
        for name in ("checkpoint.mnf", "training_log.jsonl",
                     "regression_bands.csv"):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, f"{name} differs between identical runs"

    def test_seed_override_changes_the_run(self, tmp_path, capsys):
        cfg = toy_config(tmp_path)
        cfg["training"]["epochs"] = 4
        cfg_path = write_config(tmp_path, cfg)
        for sub, seed in (("a", "7"), ("b", "8")):
            rc = main(["train", "--config", cfg_path, "--seed", seed,
                       "--out", str(tmp_path / sub), "--no-figures"])
            assert rc == 0
        capsys.readouterr()
        assert (tmp_path / "a" / "training_log.jsonl").read_bytes() != \
            (tmp_path / "b" / "training_log.jsonl").read_bytes()

    def test_no_figures_writes_no_pngs(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, toy_config(tmp_path))
        report = run_ok(capsys, ["train", "--config", cfg_path, "--no-figures"])
        assert all(not a.endswith(".png") for a in report["artifacts"])
        assert not [f for f in os.listdir(report["out_dir"])
                    if f.endswith(".png")]

    def test_unknown_command_is_usage_error(self, tmp_path, capsys):
        rc = main(["frobnicate", "--config", "x.json"])
        assert rc == 2
        assert "usage" in capsys.readouterr().err

    def test_missing_config_flag_is_usage_error(self, capsys):
        assert main(["train"]) == 2
        assert "--config" in capsys.readouterr().err

    def test_validation_lists_every_field(self, tmp_path, capsys):
        cfg = {"schema_version": 7, "seed": "x",
               "out_dir": str(tmp_path / "run"),
               "dataset": {"kind": "parquet"},
               "training": {"epochs": -2}}
        cfg_path = write_config(tmp_path, cfg)
        assert main(["train", "--config", cfg_path]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "config"
        text = "\n".join(err["fields"])
        for needle in ("schema_version", "seed", "model", "dataset.kind",
                       "epochs"):
            assert needle in text

    def test_eval_without_checkpoint_mentions_it(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, toy_config(tmp_path))
        assert main(["eval-regression", "--config", cfg_path]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert any("checkpoint" in f for f in err["fields"])

    def test_nonexistent_config_path_is_io_error(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
        err = json.loads(capsys.readouterr().err.strip())
        assert err["error"] == "io"


class TestGenData:
    def test_written_corpora_parse_back(self, tmp_path, capsys):
        out = str(tmp_path / "data")
        report = run_ok(capsys, ["gen-data", "--out", out, "--n-train", "30",
                                 "--n-test", "10", "--n-ood", "12",
                                 "--seed", "4"])
        assert len(report["artifacts"]) == 6
        train = load_idx(os.path.join(out, "train-images.idx"),
                         os.path.join(out, "train-labels.idx"))
        ood = load_idx(os.path.join(out, "ood-images.idx"),
                       os.path.join(out, "ood-labels.idx"))
        assert len(train) == 30 and len(ood) == 12
        assert train.X.min() >= 0.0 and train.X.max() <= 1.0
        assert set(np.unique(train.y)) <= set(range(10))
        assert train.X.shape[1:] == (28, 28, 1)

    def test_idx_training_roundtrip(self, tmp_path, capsys):
        out = str(tmp_path / "data")
        run_ok(capsys, ["gen-data", "--out", out, "--n-train", "24",
                        "--n-test", "8", "--n-ood", "8"])
        cfg = digit_config(tmp_path)
        cfg["dataset"] = {"kind": "idx",
                          "images": os.path.join(out, "train-images.idx"),
                          "labels": os.path.join(out, "train-labels.idx")}
        cfg_path = write_config(tmp_path, cfg)
        report = run_ok(capsys, ["train", "--config", cfg_path, "--no-figures"])
        assert report["steps"] == 1
