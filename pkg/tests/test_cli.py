import csv

import pytest

from conftest import tiny_config
from mi2m import cli
from mi2m.config import save_config
from mi2m.errors import NumericError
from mi2m.evaluation import read_reports
from mi2m.pipeline import ENCODER_CKPT, HEAD_CKPT, LOCK, LOSS_TRACE
from mi2m.temporal import load_head


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "tiny.conf"
    save_config(tiny_config(), path)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def synth(conf, out, *extra):
    assert run("synth", "--config", conf, "--out", out, *extra) == 0
    return out


@pytest.fixture
def data(conf, tmp_path):
    return synth(conf, tmp_path / "data" / "A")


def read_trace(path):
    with open(path) as fh:
        return [(int(r["epoch"]), int(r["step"]), float(r["masked_loss"])) for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# exit codes


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["pretrain", "--seed", "x"], ["synth", "encoder.nosuch=1"],
                                  ["synth", "encoder.layers"]])
def test_usage_errors_exit_1(argv, capsys):
    assert run(*argv) == 1
    assert "mi2m: error" in capsys.readouterr().err


def test_invalid_config_value_exits_2(capsys):
    assert run("synth", "encoder.mask_ratio=1.5") == 2
    assert "mask_ratio" in capsys.readouterr().err


def test_missing_checkpoint_exits_2(conf, data, tmp_path, capsys):
    out = tmp_path / "empty"
    assert run("finetune", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 2
    assert str(out / ENCODER_CKPT) in capsys.readouterr().err
    assert run("eval", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 2
    assert str(out / HEAD_CKPT) in capsys.readouterr().err


def test_missing_dataset_exits_2(conf, tmp_path, capsys):
    assert run("pretrain", "--config", conf, "--output-dir", tmp_path / "o", "--pretrain-data", tmp_path / "nope") == 2
    assert "nope" in capsys.readouterr().err


def test_unwritable_output_dir_exits_2(conf, data, tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("not a directory")
    out = blocker / "run"
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 2
    assert str(blocker) in capsys.readouterr().err


def test_numeric_error_exits_3(monkeypatch, capsys):
    def boom(cfg, args):
        raise NumericError("non-finite masked loss at step 3")

    monkeypatch.setitem(cli.COMMANDS, "synth", boom)
    assert run("synth") == 3
    assert "non-finite" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# commands


def test_synth_is_deterministic_per_seed(conf, tmp_path):
    a = synth(conf, tmp_path / "a", "--seed", 7)
    b = synth(conf, tmp_path / "b", "--seed", 7)
    c = synth(conf, tmp_path / "c", "--seed", 8)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
    clips = [rel for rel in files if rel.suffix != ".json"]
    assert any((a / rel).read_bytes() != (c / rel).read_bytes() for rel in clips)


def test_synth_overrides_class_counts(conf, tmp_path, capsys):
    synth(conf, tmp_path / "d", "--activities", 2, "--subjects", 1, "--environment", "B")
    assert "2 recordings" in capsys.readouterr().out


def test_pretrain_finetune_eval(conf, data, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--seed", 1) == 0
    for name in ("tokenizer_wifi.bin", "tokenizer_vision.bin", ENCODER_CKPT, LOSS_TRACE, "config.txt"):
        assert (out / name).exists(), name
    assert not (out / LOCK).exists()
    assert {e for e, _, _ in read_trace(out / LOSS_TRACE)} == {0, 1}

    assert run("finetune", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--seed", 1) == 0
    assert (out / HEAD_CKPT).exists() and (out / "finetune_metrics.csv").exists()

    capsys.readouterr()
    assert run("eval", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--condition", "dark") == 0
    printed = capsys.readouterr().out
    assert "dark(g=3)" in printed
    [report] = read_reports(out / "reports.jsonl")
    assert report.condition == "dark" and report.total == 6
    assert (out / "report.txt").read_text().strip() == printed.strip()


def test_joint_task_head_has_joint_classes(conf, data, tmp_path):
    out = tmp_path / "run"
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 0
    assert run("finetune", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--task", "joint") == 0
    head, header = load_head(out / HEAD_CKPT)
    assert head.num_classes == 3 * 2 and header["extra"]["task"] == "joint"
    assert run("eval", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 0
    assert read_reports(out / "reports.jsonl")[0].task == "joint"


def test_eval_protocol_with_seeds(conf, data, tmp_path):
    out = tmp_path / "grid"
    assert run("eval", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--seeds", "1,2") == 0
    [report] = read_reports(out / "reports.jsonl")
    assert report.seeds == (1, 2) and report.total == 12
    assert run("eval", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--seeds", "1",
               "--random-encoder", "--modalities", "vision") == 0
    [report] = read_reports(out / "reports.jsonl")
    assert report.encoder_init == "random" and report.modalities == ("vision",)


def test_resume_continues_the_trace(conf, data, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    common = ["--config", conf, "--pretrain-data", data, "--seed", 3]
    assert run("pretrain", *common, "--output-dir", full, "encoder.epochs=3") == 0
    assert run("pretrain", *common, "--output-dir", part, "encoder.epochs=1") == 0
    assert {e for e, _, _ in read_trace(part / LOSS_TRACE)} == {0}
    assert run("pretrain", *common, "--output-dir", part, "encoder.epochs=3", "--resume") == 0
    resumed = read_trace(part / LOSS_TRACE)
    steps = [s for _, s, _ in resumed]
    assert steps == list(range(len(steps)))
    assert resumed == read_trace(full / LOSS_TRACE)
    assert (part / ENCODER_CKPT).read_bytes() == (full / ENCODER_CKPT).read_bytes()


def test_resume_without_checkpoint_exits_2(conf, data, tmp_path, capsys):
    assert run("pretrain", "--config", conf, "--output-dir", tmp_path / "o", "--pretrain-data", data, "--resume") == 2
    assert "--resume" in capsys.readouterr().err


def test_corrupt_checkpoint_is_refused(conf, data, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 0
    blob = (out / ENCODER_CKPT).read_bytes()
    (out / ENCODER_CKPT).write_bytes(blob[: len(blob) // 2])
    capsys.readouterr()
    assert run("finetune", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 2
    assert ENCODER_CKPT in capsys.readouterr().err
    (out / ENCODER_CKPT).write_bytes(b"NOTACKPT" + blob[8:])
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data, "--resume") == 2


def test_lock_sentinel_blocks_a_second_writer(conf, data, tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / LOCK).write_text("12345")
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 2
    assert "locked" in capsys.readouterr().err
    assert (out / LOCK).read_text() == "12345"


def test_geometry_mismatch_is_refused(conf, data, tmp_path, capsys):
    out = tmp_path / "run"
    assert run("pretrain", "--config", conf, "--output-dir", out, "--pretrain-data", data) == 0
    other = synth(conf, tmp_path / "data" / "big", "synth.image_shape=3,24,24")
    capsys.readouterr()
    assert run("finetune", "--config", conf, "--output-dir", out, "--finetune-data", other) == 2
    err = capsys.readouterr().err
    assert "geometry" in err and "(3, 24, 24)" in err


def test_output_dir_defaults_to_mi2m_home(conf, tmp_path, monkeypatch):
    home = tmp_path / "home"
    monkeypatch.setenv("MI2M_HOME", str(home))
    cfg_path = tmp_path / "nohome.conf"
    cfg_path.write_text("\n".join(l for l in conf.read_text().splitlines() if not l.startswith("output_dir")))
    assert run("synth", "--config", cfg_path) == 0
    assert (home / "data" / "A" / "manifest.json").exists()


def test_console_entry_point():
    import subprocess
    import sys

    done = subprocess.run([sys.executable, "-m", "mi2m.cli", "--version"], capture_output=True, text=True)
    assert done.returncode == 0 and done.stdout.startswith("mi2m ")
    done = subprocess.run([sys.executable, "-m", "mi2m.cli", "pretrain", "--bogus"], capture_output=True, text=True)
    assert done.returncode == 1
