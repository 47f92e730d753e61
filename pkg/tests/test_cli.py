import csv

import pytest

from stncell.cli import main

TINY = """\
arch = "compact"
synth_n = 12
epoch_scale = 1.0
stage1_epochs = 1
stage2_epochs = 1
stage3_epochs = 1
baseline_epochs = 1
batch_size = 8
folds = 2
augment = false
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY)
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_is_deterministic(tmp_path):
    assert main(["-q", "synth", "--n", "9", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["-q", "synth", "--n", "9", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "manifest.csv").read_bytes() == (b / "manifest.csv").read_bytes()
    for img in (a / "images").iterdir():
        assert img.read_bytes() == (b / "images" / img.name).read_bytes()
    rows = _rows(a / "manifest.csv")
    assert rows[0] == ["image", "cx", "cy", "class", "true_cx", "true_cy"] and len(rows) == 10


def test_crop_writes_patches(tmp_path):
    main(["-q", "synth", "--n", "3", "--out", str(tmp_path / "s")])
    assert main(["-q", "crop", "--data", str(tmp_path / "s/manifest.csv"), "--out", str(tmp_path / "c"), "--offset"]) == 0
    rows = _rows(tmp_path / "c/patches.csv")
    assert rows[0] == ["image", "class", "dx", "dy", "source"] and len(rows) == 4
    assert all((tmp_path / "c" / r[0]).is_file() for r in rows[1:])
    assert all(abs(int(r[2])) <= 32 and abs(int(r[3])) <= 32 for r in rows[1:])


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code != 0
    assert "usage" in capsys.readouterr().err


def test_contract_errors_exit_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("seeds = 3\n")
    assert main(["-q", "train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 1
    assert "unknown config key" in capsys.readouterr().err
    assert main(["-q", "eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--out", str(tmp_path / "r")]) == 1
    assert main(["-q", "train", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "r")]) == 1


def test_train_eval_and_focus_dump(tmp_path, tiny_config, capsys):
    run = tmp_path / "run"
    assert main(["-q", "train", "--config", str(tiny_config), "--out", str(run)]) == 0
    assert (run / "stn.ckpt").is_file() and (run / "loss_trace.json").is_file()
    assert "synth_n = 12" in (run / "config.toml").read_text()
    capsys.readouterr()
    ev = tmp_path / "eval"
    args = ["-q", "eval", "--config", str(tiny_config), "--checkpoint", str(run / "stn.ckpt"), "--out", str(ev)]
    assert main(args + ["--dump-focus", "2"]) == 0
    assert "CNN-STN" in capsys.readouterr().out
    assert len(list((ev / "focus").glob("focus_*.png"))) == 2
    assert _rows(ev / "metrics.csv")[-1][:2] == ["CNN-STN", "avg/total"]


def test_baseline_and_eval(tmp_path, tiny_config):
    run = tmp_path / "run"
    assert main(["-q", "baseline", "--config", str(tiny_config), "--out", str(run)]) == 0
    ev = tmp_path / "eval"
    args = ["-q", "eval", "--config", str(tiny_config), "--checkpoint", str(run / "baseline.ckpt"), "--out", str(ev)]
    assert main(args + ["--centered"]) == 0
    assert _rows(ev / "metrics.csv")[1][0] == "CNN baseline"
    assert main(args + ["--dump-focus", "1"]) == 1


def test_cv_report_has_both_blocks(tmp_path, tiny_config, capsys):
    out = tmp_path / "cv"
    assert main(["-q", "cv", "--config", str(tiny_config), "--out", str(out)]) == 0
    text = (out / "report.txt").read_text()
    assert text.index("CNN baseline") < text.index("CNN-STN")
    assert text == capsys.readouterr().out
    models = [r[0] for r in _rows(out / "metrics.csv")[1:]]
    assert {"CNN-STN", "CNN baseline", "CNN baseline (centered)"} == set(models)
    assert all(r[-1] == "12" for r in _rows(out / "metrics.csv")[1:] if r[1] == "avg/total")
    folds = _rows(out / "folds.csv")
    assert folds[0] == ["fold", "model", "accuracy", "test_size", "train_size"] and len(folds) == 1 + 2 * 3


def test_cli_overrides_config(tmp_path, tiny_config):
    out = tmp_path / "cv"
    assert main(["-q", "cv", "--config", str(tiny_config), "--folds", "3", "--seed", "4", "--synth-n", "30", "--no-baseline", "--out", str(out)]) == 0
    cfg = (out / "config.toml").read_text()
    assert "folds = 3" in cfg and "seed = 4" in cfg and "synth_n = 30" in cfg
    assert {r[0] for r in _rows(out / "metrics.csv")[1:]} == {"CNN-STN"}


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for op in ("conv2d", "maxpool2d", "dense", "relu", "softmax", "bilinear_sample", "extract_scales",
               "localization_loss", "cross_entropy", "inception_block", "stn_forward"):
        assert f" {op}" in out
    assert "FAIL" not in out and "all passed" in out
