import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from hsimamba import cli, io
from hsimamba.trainer import TrainingDiverged


def checksums(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "synth"
    assert cli.main(["synth", "--P", "3", "--size", "8", "--bands", "12", "--seed", "2",
                     "-o", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    run = tmp_path_factory.mktemp("runs") / "run"
    cfg = run.parent / "cfg.ini"
    cfg.write_text(f"[data]\ndataset = {dataset}\ntrain_frac = 0.3\nval_frac = 0.3\n"
                   f"[model]\nendmembers = 3\ndim = 8\nstate = 4\n[output]\ndir = {run}\n")
    assert cli.main(["train", "--config", str(cfg), "--epochs", "5"]) == 0
    return run


def read_history(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- synth ---------------------------------------------------------------------------

def test_synth_file_set_and_checksums_are_deterministic(tmp_path):
    args = ["synth", "--P", "4", "--size", "32", "--snr", "30", "--seed", "7"]
    assert cli.main(args + ["-o", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["-o", str(tmp_path / "b")]) == 0
    a, b = checksums(tmp_path / "a"), checksums(tmp_path / "b")
    assert a == b
    assert {"cube.hsa", "cube.hdr", "cube.img", "labels.hsa", "labels.csv", "gt_endmembers.hsa",
            "gt_abundance.hsa", "noise.hsa", "meta.json"} <= set(a)


def test_synth_labels_are_abundance_argmax(dataset):
    labels = io.read_array(dataset / "labels.hsa")
    A = io.read_array(dataset / "gt_abundance.hsa")
    np.testing.assert_array_equal(labels, A.argmax(0) + 1)
    np.testing.assert_array_equal(io.read_label_csv(dataset / "labels.csv"), labels)
    envi, _ = io.read_envi(dataset / "cube.hdr")
    assert envi.tobytes() == io.read_array(dataset / "cube.hsa").tobytes()


@pytest.mark.parametrize("snr", ["0", "-5"])
def test_synth_rejects_nonpositive_snr(tmp_path, snr, capsys):
    assert cli.main(["synth", "--snr", snr, "-o", str(tmp_path / "x")]) == 1
    assert "snr" in capsys.readouterr().err


def test_synth_refuses_existing_output_without_force(dataset, tmp_path):
    out = tmp_path / "d"
    base = ["synth", "--P", "2", "--size", "4", "--bands", "5", "-o", str(out)]
    assert cli.main(base) == 0
    assert cli.main(base) == 1
    assert cli.main(base + ["--force"]) == 0


# -- train ---------------------------------------------------------------------------

def test_train_writes_history_rows_and_echo(trained):
    rows = read_history(trained / "history.csv")
    assert len(rows) == 5
    assert [int(r["epoch"]) for r in rows] == list(range(5))
    echo = cli.read_run_config(trained / "config.ini")
    assert (echo["model"]["lam"], echo["model"]["alpha"], echo["model"]["beta"]) == (0.1, 0.3, 0.7)
    assert echo["train"]["epochs"] == 5
    assert (trained / "checkpoint" / "manifest.json").exists()


def test_train_records_ablation_flag(dataset, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["train", "--dataset", str(dataset), "--P", "3", "--epochs", "2",
                     "--train-frac", "0.3", "--ablate", "no_topk", "-o", str(out)]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["ablations"]["no_topk"] is True
    assert run["ablations"]["no_pos_cls"] is False
    assert cli.read_run_config(out / "config.ini")["ablation"]["no_topk"] is True
    rows = read_history(out / "history.csv")
    assert all(int(r["scanned_tokens"]) == 4 * 64 for r in rows)


def test_unknown_ablation_rejected(dataset, tmp_path):
    assert cli.main(["train", "--dataset", str(dataset), "--ablate", "no_head",
                     "-o", str(tmp_path / "x")]) == 1


def test_unknown_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[train]\nepochs = 3\nmomentum = 0.5\n")
    assert cli.main(["train", "--config", str(cfg), "-o", str(tmp_path / "x")]) == 1
    assert "train.momentum" in capsys.readouterr().err
    cfg.write_text("[optimizer]\nlr = 1\n")
    assert cli.main(["train", "--config", str(cfg), "-o", str(tmp_path / "x")]) == 1


def test_echoed_config_reproduces_run(trained, tmp_path):
    cfg = cli.read_run_config(trained / "config.ini")
    cfg["output"]["dir"] = str(tmp_path / "again")
    cli.write_run_config(tmp_path / "echo.ini", cfg)
    assert cli.main(["train", "--config", str(tmp_path / "echo.ini")]) == 0
    assert (tmp_path / "again" / "history.csv").read_bytes() == (trained / "history.csv").read_bytes()


def test_output_root_environment_variable(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("HSIMAMBA_OUTPUT_ROOT", str(tmp_path))
    assert cli.main(["synth", "--P", "2", "--size", "4", "--bands", "5", "-o", "rel"]) == 0
    assert (tmp_path / "rel" / "cube.hsa").exists()


def test_divergence_exits_with_two(dataset, tmp_path, monkeypatch, capsys):
    def diverge(*args, **kwargs):
        raise TrainingDiverged(3, float("nan"))

    monkeypatch.setattr(cli, "train", diverge)
    assert cli.main(["train", "--dataset", str(dataset), "--P", "3", "--epochs", "5",
                     "-o", str(tmp_path / "x")]) == 2
    assert "epoch 3" in capsys.readouterr().err


# -- eval ---------------------------------------------------------------------------

def test_eval_outputs(trained, dataset):
    assert cli.main(["eval", "--run", str(trained)]) == 0
    out = trained / "eval"
    metrics = json.loads((out / "metrics.json").read_text())
    split = io.read_array(trained / "split.hsa")
    assert metrics["total_pixels"] == int((split == 3).sum())
    assert sum(map(sum, metrics["confusion"])) == metrics["total_pixels"]
    assert {"OA", "AA", "Kappa", "endmember_sad", "abundance_rmse"} <= set(metrics)
    with Image.open(out / "classmap.png") as img:
        assert img.size == (8, 8)  # width, height
    assert sorted(p.name for p in out.glob("abundance_*.png")) == [
        "abundance_00.png", "abundance_01.png", "abundance_02.png"]
    assert (out / "endmembers.png").stat().st_size > 0
    plan = json.loads((out / "tokenplan.json").read_text())
    assert len(plan["budgets"]) == 3
    assert len((out / "tokenplan.jsonl").read_text().splitlines()) == 4


def test_eval_rejects_mismatched_cube(trained, tmp_path):
    other = tmp_path / "other"
    assert cli.main(["synth", "--P", "3", "--size", "6", "--bands", "12", "-o", str(other)]) == 0
    assert cli.main(["eval", "--run", str(trained), "--dataset", str(other),
                     "-o", str(tmp_path / "e")]) == 1


def test_eval_missing_checkpoint(tmp_path):
    assert cli.main(["eval", "--run", str(tmp_path)]) == 1


# -- unmix ---------------------------------------------------------------------------

def test_unmix_outputs(dataset, tmp_path):
    out = tmp_path / "um"
    assert cli.main(["unmix", "--dataset", str(dataset), "--P", "3", "--epochs", "10",
                     "-o", str(out)]) == 0
    assert len(list(out.glob("abundance_*.png"))) == 3
    assert io.read_array(out / "recon_sad.hsa").min() >= 0
    with open(out / "endmembers.csv") as fh:
        assert len(list(csv.reader(fh))) == 1 + 3 * 4
    assert len(read_history(out / "history.csv")) == 10


def test_unmix_noiseless_pure_pixels_recovers_endmembers(tmp_path):
    data = tmp_path / "clean"
    assert cli.main(["synth", "--P", "3", "--size", "16", "--bands", "16", "--snr", "inf",
                     "-o", str(data)]) == 0
    assert cli.main(["unmix", "--dataset", str(data), "--P", "3", "--epochs", "100",
                     "-o", str(tmp_path / "um")]) == 0
    metrics = json.loads((tmp_path / "um" / "metrics.json").read_text())
    assert metrics["endmember_sad"] < 0.05


def test_unmix_rejects_more_endmembers_than_bands(dataset, tmp_path):
    assert cli.main(["unmix", "--dataset", str(dataset), "--P", "13", "-o", str(tmp_path / "u")]) == 1


def test_unmix_from_envi(dataset, tmp_path):
    assert cli.main(["unmix", "--envi-header", str(dataset / "cube.hdr"), "--P", "3",
                     "--epochs", "2", "-o", str(tmp_path / "u")]) == 0
    assert io.read_array(tmp_path / "u" / "abundance.hsa").shape == (3, 8, 8)
