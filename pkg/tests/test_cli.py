import csv
import json

import pytest

from lengthgen.cli import EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_RUNTIME, main
from lengthgen.trainer import read_metrics

TINY = {
    "name": "tiny",
    "task": "add",
    "operand_width": 3,
    "train_lengths": [2],
    "eval_lengths": [1, 3],
    "total": 2000,
    "per_set": 300,
    "monitor_per_set": 100,
    "probe_size": 100,
    "model": {"preset": "nano"},
    "train": {"max_steps": 40, "eval_every": 20, "checkpoint_every": 20, "batch_size": 16},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def _oracle_rows(capsys, *args):
    assert main(["oracle", *args]) == EXIT_OK
    return list(csv.DictReader(capsys.readouterr().out.splitlines()))


def test_oracle_151(capsys):
    rows = _oracle_rows(capsys, "--p", "151", "--n", "4", "--m", "5..9")
    assert [r["percent"] for r in rows] == ["0.00%", "0.66%", "0.66%", "0.66%", "0.66%"]
    assert [r["exact"] for r in rows] == ["0", "1/151", "1/151", "1/151", "1/151"]


def test_oracle_201(capsys):
    rows = _oracle_rows(capsys, "--p", "201", "--n", "4")
    assert [r["percent"] for r in rows] == ["0.00%", "0.00%", "0.50%", "0.50%", "0.50%"]


def test_oracle_rejects_bad_range(capsys):
    assert main(["oracle", "--p", "7", "--n", "1", "--m", "0..2"]) == EXIT_INVALID
    assert "bad length range" in capsys.readouterr().err


def test_gen_data_counts_and_determinism(tmp_path, config, capsys):
    args = ["gen-data", "--config", str(config), "--set", "total=1000"]
    assert main([*args, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main([*args, "--out", str(tmp_path / "b")]) == EXIT_OK
    train_a = (tmp_path / "a" / "train.txt").read_bytes()
    assert len(train_a.splitlines()) == 900
    assert len((tmp_path / "a" / "id_test.txt").read_bytes().splitlines()) == 100
    for name in ("train.txt", "id_test.txt", "ood_1.txt", "ood_3.txt", "dataset.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    side = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert side["files"]["train"]["count"] == 900 and side["seed"] == 0


def test_gen_data_rejects_overlapping_lengths(tmp_path, config, capsys):
    code = main(["gen-data", "--config", str(config), "--set", "eval_lengths=[1,2]", "--out", str(tmp_path / "x")])
    assert code == EXIT_INVALID
    assert "overlap" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, config, capsys):
    assert main(["gen-data", "--config", str(config), "--set", "bogus=1", "--out", str(tmp_path)]) == EXIT_INVALID


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_IO
    assert "nope.json" in capsys.readouterr().err


def test_train_missing_dataset_names_file(tmp_path, config, capsys):
    code = main(["train", "--config", str(config), "--run-dir", str(tmp_path / "r"), "--data", str(tmp_path / "nodata")])
    assert code == EXIT_IO
    assert "nodata" in capsys.readouterr().err


def test_train_eval_report_round(tmp_path, config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--run-dir", str(run)]) == EXIT_OK
    assert (run / "config.json").read_bytes() == config.read_bytes()
    rows = read_metrics(run / "metrics.csv")
    assert len(rows) == TINY["train"]["max_steps"] // TINY["train"]["eval_every"]
    first = json.loads((run / "report.json").read_text())
    assert main(["eval", str(run)]) == EXIT_OK
    again = json.loads((run / "report.json").read_text())
    assert [r["acc_vs_true"] for r in first["rows"]] == [r["acc_vs_true"] for r in again["rows"]]
    assert main(["report", str(run), "--out", str(tmp_path / "plots")]) == EXIT_OK
    with open(tmp_path / "plots" / "accuracy.csv") as fh:
        acc = list(csv.DictReader(fh))
    assert {r["suite"] for r in acc} == {"id", "D_{1}", "D_{3}"}
    assert {int(r["step"]) for r in acc} == {20, 40}
    for name in ("digits.csv", "r2.csv", "loss.csv", "final.csv"):
        assert (tmp_path / "plots" / name).exists()


def test_eval_rejects_mismatched_checkpoint(tmp_path, config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--run-dir", str(run), "--skip-eval"]) == EXIT_OK
    other = tmp_path / "other"
    assert main(["train", "--config", str(config), "--run-dir", str(other), "--skip-eval", "--set", "model.num_layers=2"]) == EXIT_OK
    assert main(["eval", str(run), "--checkpoint", str(other / "last.ckpt")]) == EXIT_RUNTIME


def test_report_on_empty_directory(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == EXIT_IO
