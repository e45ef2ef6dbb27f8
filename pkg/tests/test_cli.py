import subprocess
import sys

import pytest

from cloudwalker.cli import main, parse_config, read_config
from cloudwalker.errors import ConfigError, DataError


def _write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_empty_config_defaults(tmp_path):
    cfg = read_config(_write(tmp_path, ""))
    assert (cfg.k, cfg.m, cfg.walk_fraction, cfg.cycle_iters) == (20, 48, 0.4, 20000)
    assert (cfg.d1, cfg.d2, cfg.d3, cfg.hidden) == (128, 256, 512, 512)
    with pytest.raises(ConfigError, match="missing dataset path"):
        parse_config(tmp_path / "run.cfg")
    assert parse_config(tmp_path / "run.cfg", require_dataset=False).k == 20


def test_values_and_comments(tmp_path):
    cfg = read_config(_write(tmp_path, "k = 20  # neighbours\n# full line\n\nuse_bbox = yes\nlr_max=1e-3\n"))
    assert cfg.k == 20 and cfg.use_bbox is True and cfg.lr_max == 1e-3


def test_manifest_relative_to_config(tmp_path):
    (tmp_path / "d").mkdir()
    (tmp_path / "d" / "train.csv").write_text("path,label\n")
    cfg = parse_config(_write(tmp_path, "train_manifest = d/train.csv\n"))
    assert cfg.train_manifest == tmp_path / "d" / "train.csv"


@pytest.mark.parametrize("text,match", [
    ("walk_len = 800\nwalk_fraction = 0.4\n", "conflicting walk length"),
    ("bogus = 1\n", "unknown key"),
    ("k = twenty\n", "expected int"),
    ("k 20\n", "key = value"),
    ("strategy = zigzag\n", "strategy"),
    ("walk_fraction = 1.5\n", "fraction"),
])
def test_config_errors(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(_write(tmp_path, text), require_dataset=False)


def test_missing_manifest_is_data_error(tmp_path):
    with pytest.raises(DataError):
        parse_config(_write(tmp_path, "train_manifest = nowhere.csv\n"))


def test_override_conflicts_with_file(tmp_path):
    path = _write(tmp_path, "walk_len = 100\n")
    with pytest.raises(ConfigError, match="conflicting"):
        parse_config(path, [("walk_fraction", "0.3")], require_dataset=False)
    assert parse_config(path, [("walk_len", "50")], require_dataset=False).walk_len == 50


def test_exit_codes(tmp_path, capsys):
    assert main(["train", "--config", str(_write(tmp_path, "bogus = 1\n"))]) == 1
    assert main(["train", "--config", str(_write(tmp_path, "train_manifest = x.csv\n"))]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 1


def test_help_lists_flags():
    out = subprocess.run([sys.executable, "-m", "cloudwalker.cli", "eval", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for flag in ("--config", "--seed", "--threads", "--out", "--checkpoint", "--walk-len", "--m"):
        assert flag in out


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--count", "2"]) == 0
    assert "max relative error" in capsys.readouterr().out


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--per-class", "3", "--test-per-class", "2",
                 "--points", "48", "--ood-fraction", "0.34"]) == 0
    cfg = root / "tiny.cfg"
    cfg.write_text("train_manifest = data/train.csv\ntest_manifest = data/test.csv\n"
                   "d1 = 4\nd2 = 4\nd3 = 6\nhidden = 6\nwalk_len = 12\nk = 5\nm = 3\n"
                   "batch_size = 2\ntotal_iters = 4\ncycle_iters = 4\nlr_max = 1e-2\n")
    return root, cfg


def test_pipeline_end_to_end(tiny_run, capsys):
    root, cfg = tiny_run
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == 0
    ckpt = run / "ckpt_4.cw"
    assert ckpt.exists() and (run / "train_log.csv").exists()
    for cmd, out_file in (("eval", "predictions.csv"), ("retrieve", "rankings.csv"),
                          ("complexity", "complexity.csv")):
        code = main([cmd, "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(run)])
        # complexity may legitimately find all training shapes correct or all wrong
        assert code == 0 or (cmd == "complexity" and code == 2)
        if code == 0:
            assert (run / out_file).exists()
    assert main(["walks", "--config", str(cfg), "--out", str(run)]) == 0
    lines = (run / "walks_test.txt").read_text().splitlines()
    assert len(lines) == 3 * 4 * 3 and len(lines[0].split()) == 13
    out = capsys.readouterr().out
    assert "IA " in out and "mAP " in out


def test_pipeline_reproducible(tiny_run):
    root, cfg = tiny_run
    outs = []
    for name in ("a", "b"):
        run = root / name
        assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(run), "--threads", "1"]) == 0
        assert main(["eval", "--config", str(cfg), "--seed", "7", "--checkpoint", str(run / "ckpt_4.cw"),
                     "--out", str(run)]) == 0
        outs.append(((run / "ckpt_4.cw").read_bytes(), (run / "predictions.csv").read_text()))
    assert outs[0] == outs[1]
