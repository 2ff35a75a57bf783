import logging

import numpy as np
import pytest
from PIL import Image

from cli.skinfcn_cli import EXIT_CHECK_FAILED, EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from skinfcn.checkpoint import save_checkpoint
from skinfcn.errors import NumericError
from skinfcn.gradcheck import CheckResult
from skinfcn.model import build_model
from skinfcn.schemas.architecture import MICRO


@pytest.fixture(autouse=True)
def root_logger(monkeypatch, tmp_path):
    """Keep the CLI's logging setup and any stray .env file out of other tests."""
    monkeypatch.chdir(tmp_path)
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield root
    root.handlers[:] = handlers
    root.setLevel(level)


def test_no_command_prints_help(capsys):
    assert run([]) == EXIT_USAGE
    assert "usage" in capsys.readouterr().out


def test_unknown_option_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        run(["synth", "--count", "1", "--bogus"])
    assert info.value.code == EXIT_USAGE


def test_synth(tmp_path, capsys):
    assert run(["synth", "--count", "2", "--size", "32", "--seed", "0", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert (tmp_path / "d" / "manifest.tsv").is_file()
    assert "Generated 2 sample(s)" in capsys.readouterr().out


def test_synth_bad_size_is_a_usage_error(tmp_path):
    assert run(["synth", "--count", "2", "--size", "40", "--seed", "0", "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_predict_score(tmp_path, capsys):
    data = tmp_path / "d"
    assert run(["synth", "--count", "3", "--size", "32", "--seed", "1", "--out", str(data)]) == EXIT_OK
    checkpoint = tmp_path / "m.fcnw"
    code = run(
        [
            "train",
            "--manifest", str(data / "manifest.tsv"),
            "--epochs", "1",
            "--seed", "0",
            "--out", str(checkpoint),
            "--preset", "micro",
            "--target-size", "32",
            "--batch-size", "2",
        ]
    )
    assert code == EXIT_OK
    assert checkpoint.is_file()

    pred = tmp_path / "pred"
    assert run(["predict", "--checkpoint", str(checkpoint), "--input", str(data), "--out", str(pred)]) == EXIT_OK
    report = tmp_path / "report.csv"
    assert run(["score", "--pred", str(pred), "--gt", str(data), "--out", str(report)]) == EXIT_OK
    assert report.read_text().splitlines()[0] == "id,se,sp,ac,ja,di"
    assert "Mean JA" in capsys.readouterr().out


def test_train_rejects_zero_epochs(tmp_path):
    code = run(["train", "--manifest", "m.tsv", "--epochs", "0", "--seed", "0", "--out", str(tmp_path / "m")])
    assert code == EXIT_USAGE


def test_train_with_config_file(tmp_path, mocker):
    train = mocker.patch("cli.skinfcn_cli.train", return_value=[mocker.Mock(mean_loss=0.5, train_ja=0.25)])
    config = tmp_path / "run.env"
    config.write_text("manifest=m.tsv\nepochs=4\nseed=3\nout=x.fcnw\nbatch_size=2\n")
    assert run(["--threads", "2", "train", "--config", str(config), "--epochs", "5"]) == EXIT_OK
    run_config = train.call_args.args[0]
    assert (run_config.epochs, run_config.seed, run_config.batch_size, run_config.threads) == (5, 3, 2, 2)


def test_missing_manifest_is_a_data_error(tmp_path):
    code = run(["train", "--manifest", str(tmp_path / "absent.tsv"), "--epochs", "1", "--seed", "0", "--out", "m"])
    assert code == EXIT_DATA


def test_predict_gt_requires_overlay(tmp_path):
    code = run(["predict", "--checkpoint", "c", "--input", "i", "--out", "o", "--gt", str(tmp_path)])
    assert code == EXIT_USAGE


def test_corrupt_checkpoint_is_a_data_error(tmp_path):
    checkpoint = tmp_path / "bad.fcnw"
    checkpoint.write_bytes(b"FCNX")
    assert run(["predict", "--checkpoint", str(checkpoint), "--input", str(tmp_path), "--out", "o"]) == EXIT_DATA


def test_ground_truth_size_mismatch_is_a_data_error(tmp_path):
    checkpoint = tmp_path / "m.fcnw"
    save_checkpoint(build_model(MICRO, seed=0), None, checkpoint)
    Image.fromarray(np.zeros((40, 40, 3), dtype=np.uint8)).save(tmp_path / "a.png")
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(gt_dir / "a_mask.png")
    args = ["predict", "--checkpoint", str(checkpoint), "--input", str(tmp_path / "a.png"), "--out", "o"]
    assert run([*args, "--overlay", "--gt", str(gt_dir)]) == EXIT_DATA


def test_training_divergence_is_reported_as_a_data_error(mocker):
    mocker.patch("cli.skinfcn_cli.train", side_effect=NumericError("non-finite loss"))
    code = run(["train", "--manifest", "m.tsv", "--epochs", "1", "--seed", "0", "--out", "m.fcnw"])
    assert code == EXIT_DATA


def test_score_missing_directory(tmp_path):
    assert run(["score", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path), "--out", "r.csv"]) == EXIT_DATA


def test_gradcheck_exit_codes(mocker, capsys):
    mocker.patch("cli.skinfcn_cli.run_gradcheck", return_value=[CheckResult("conv2d", 1e-9, True)])
    assert run(["gradcheck"]) == EXIT_OK
    mocker.patch("cli.skinfcn_cli.run_gradcheck", return_value=[CheckResult("relu", 0.5, False)])
    assert run(["gradcheck", "--seed", "1"]) == EXIT_CHECK_FAILED
    assert "FAIL" in capsys.readouterr().out


def test_bad_log_level():
    assert run(["--log-level", "chatty", "gradcheck"]) == EXIT_USAGE
