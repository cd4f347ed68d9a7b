"""End-to-end command tests run main() in-process and assert on exit codes,
emitted files and the documented error-code taxonomy."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from mmnet import cli, dataio, tracker, trainer, verify
from mmnet.network import NetConfig, build_network
from mmnet.rng import Rng


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    """Random desk model with raised head gains (matching localizes untrained)."""
    path = str(tmp_path_factory.mktemp("model") / "desk.mmn")
    cfg = NetConfig.from_preset("desk")
    params = build_network(cfg, seed=7)
    params["head.dis.gain"] = np.asarray(0.3, dtype=np.float32)
    params["head.fin.gain"] = np.asarray(0.3, dtype=np.float32)
    ckpt = trainer.Checkpoint(config={"net": cfg.to_dict()}, params=params,
                              velocity=params.zeros_like(),
                              rng_state=Rng(0).state())
    trainer.save_checkpoint(ckpt, path)
    return path


@pytest.fixture(scope="module")
def sequence_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("seq") / "synth")
    assert cli.main(["synth", "--out", out, "--frames", "10", "--size", "128",
                     "--seed", "7"]) == 0
    return out


def dir_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for name in files:
            path = os.path.join(base, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


# -------------------------------------------------------------------- synth


def test_synth_deterministic_directories(tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for out in (a, b):
        assert cli.main(["synth", "--out", out, "--frames", "6",
                         "--size", "128", "--seed", "3"]) == 0
    assert dir_bytes(a) == dir_bytes(b)


def test_synth_single_frame_is_usage_error(tmp_path, capsys):
    code = cli.main(["synth", "--out", str(tmp_path / "x"), "--frames", "1"])
    assert code == 2
    assert "frames" in capsys.readouterr().err


def test_synth_output_loads(sequence_dir):
    record = dataio.load_sequence(sequence_dir)
    assert len(record) == 10
    assert os.path.exists(os.path.join(sequence_dir, "manifest.json"))


# -------------------------------------------------------------------- track


def test_track_row_count_and_manifest(model_path, sequence_dir, tmp_path):
    out = str(tmp_path / "traj.csv")
    assert cli.main(["track", "--model", model_path, "--sequence",
                     sequence_dir, "--out", out]) == 0
    boxes, scores = tracker.read_trajectory(out)
    assert len(boxes) == 10
    manifest = json.load(open(out + ".manifest.json"))
    assert manifest["command"] == "track"
    assert manifest["config"]["tracker"]["beta"] == 0.5
    assert manifest["version"]


def test_track_beta_default_is_half(model_path, sequence_dir, tmp_path):
    plain = str(tmp_path / "plain.csv")
    half = str(tmp_path / "half.csv")
    assert cli.main(["track", "--model", model_path, "--sequence",
                     sequence_dir, "--out", plain]) == 0
    assert cli.main(["track", "--model", model_path, "--sequence",
                     sequence_dir, "--out", half, "--beta", "0.5"]) == 0
    assert open(plain).read() == open(half).read()


def test_track_rejects_non_checkpoint(sequence_dir, tmp_path):
    bogus = tmp_path / "bogus.mmn"
    bogus.write_bytes(b"not a checkpoint at all")
    code = cli.main(["track", "--model", str(bogus), "--sequence",
                     sequence_dir, "--out", str(tmp_path / "t.csv")])
    assert code == 5


# -------------------------------------------------------------------- train


def ini(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


MICRO_INI = ("[backbone]\npreset = desk\n"
             "[train]\nepochs = 2\npairs_per_epoch = 4\nbatch = 2\n"
             "lr_hi = 1e-3\nlr_lo = 1e-3\nseed = 4\n")


def test_train_writes_checkpoint_and_loss_log(sequence_dir, tmp_path):
    out = str(tmp_path / "run" / "model.mmn")
    code = cli.main(["train", "--config", ini(tmp_path, MICRO_INI),
                     "--strategy", "vid-only", "--data-gray", sequence_dir,
                     "--out", out])
    assert code == 0
    ckpt = trainer.load_checkpoint(out)
    assert ckpt.config["train"]["strategy"] == "vid-only"
    lines = open(os.path.join(tmp_path, "run", "loss.csv")).read().splitlines()
    assert lines[0] == trainer.LOSS_HEADER
    assert len(lines) == 1 + 2 * 2          # epochs * batches rows
    manifest = json.load(open(out + ".manifest.json"))
    assert manifest["config"]["train"]["epochs"] == 2
    assert manifest["seed"] == 4


def test_train_mix_requires_both_dirs(sequence_dir, tmp_path, capsys):
    code = cli.main(["train", "--config", ini(tmp_path, MICRO_INI),
                     "--strategy", "mix", "--data-gray", sequence_dir,
                     "--out", str(tmp_path / "m.mmn")])
    assert code == 2
    assert "--data-tir" in capsys.readouterr().err


def test_train_vid_only_warns_about_unused_tir(sequence_dir, tmp_path):
    with pytest.warns(UserWarning, match="never reads --data-tir"):
        code = cli.main(["train", "--config", ini(tmp_path, MICRO_INI),
                         "--strategy", "vid-only",
                         "--data-gray", sequence_dir,
                         "--data-tir", sequence_dir,
                         "--out", str(tmp_path / "v.mmn")])
    assert code == 0


def test_train_rejects_unknown_config_key(sequence_dir, tmp_path, capsys):
    bad = ini(tmp_path, "[train]\nbogus = 1\n")
    code = cli.main(["train", "--config", bad, "--strategy", "vid-only",
                     "--data-gray", sequence_dir,
                     "--out", str(tmp_path / "b.mmn")])
    assert code == 2
    assert "bogus" in capsys.readouterr().err


def test_unknown_section_rejected(tmp_path, capsys):
    bad = ini(tmp_path, "[nonsense]\nx = 1\n")
    code = cli.main(["train", "--config", bad, "--strategy", "vid-only",
                     "--data-gray", "nowhere", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "nonsense" in capsys.readouterr().err


# --------------------------------------------------------------------- eval


def echo_trajectory(sequence_dir, path):
    record = dataio.load_sequence(sequence_dir)
    tracker.write_trajectory(record.boxes, np.ones(len(record)), path)


def test_eval_ptb_echo_ground_truth(sequence_dir, tmp_path, capsys):
    pred = str(tmp_path / "echo.csv")
    echo_trajectory(sequence_dir, pred)
    out = str(tmp_path / "report")
    code = cli.main(["eval", "--pred", pred, "--gt", sequence_dir,
                     "--protocol", "ptb", "--out", out, "--no-figures"])
    assert code == 0
    text = open(os.path.join(out, "report.csv")).read()
    row = text.strip().splitlines()[-1].split(",")
    assert float(row[1]) == 1.0                       # pre20
    assert abs(float(row[2]) - 20 / 21) < 1e-12       # auc
    assert "# protocol: ptb" in text
    assert os.path.exists(os.path.join(out, "manifest.json"))


def test_eval_count_mismatch(sequence_dir, tmp_path, capsys):
    pred = str(tmp_path / "echo.csv")
    echo_trajectory(sequence_dir, pred)
    code = cli.main(["eval", "--pred", pred, pred, "--gt", sequence_dir,
                     "--protocol", "ptb", "--out", str(tmp_path / "r")])
    assert code == 2


def test_eval_trajectory_length_mismatch(sequence_dir, tmp_path):
    record = dataio.load_sequence(sequence_dir)
    pred = str(tmp_path / "short.csv")
    tracker.write_trajectory(record.boxes[:-2], np.ones(len(record) - 2), pred)
    code = cli.main(["eval", "--pred", pred, "--gt", sequence_dir,
                     "--protocol", "ptb", "--out", str(tmp_path / "r")])
    assert code == 2


def test_eval_vot_lite_rejects_pred(sequence_dir, tmp_path, capsys):
    pred = str(tmp_path / "echo.csv")
    echo_trajectory(sequence_dir, pred)
    code = cli.main(["eval", "--pred", pred, "--gt", sequence_dir,
                     "--protocol", "vot-lite", "--out", str(tmp_path / "r")])
    assert code == 2
    assert "--model" in capsys.readouterr().err


def test_eval_vot_lite_needs_model(sequence_dir, tmp_path):
    code = cli.main(["eval", "--gt", sequence_dir, "--protocol", "vot-lite",
                     "--out", str(tmp_path / "r")])
    assert code == 2


def test_eval_vot_lite_runs_tracker(model_path, sequence_dir, tmp_path):
    out = str(tmp_path / "votreport")
    code = cli.main(["eval", "--gt", sequence_dir, "--protocol", "vot-lite",
                     "--model", model_path, "--out", out, "--no-figures",
                     "--workers", "1"])
    assert code == 0
    text = open(os.path.join(out, "report.csv")).read()
    assert "# protocol: vot-lite" in text
    row = text.strip().splitlines()[-1].split(",")
    assert row[1] == "nan" and row[2] == "nan"        # no ptb columns
    assert np.isfinite(float(row[3]))                 # accuracy computed


# ------------------------------------------------------------------- verify


def test_verify_single_suite_runs_only_that_suite(capsys):
    code = cli.main(["verify", "--suite", "metrics"])
    out = capsys.readouterr().out
    assert code == 0
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert lines and all("metrics:" in l for l in lines)


def test_verify_unknown_suite_is_usage_error():
    assert cli.main(["verify", "--suite", "nonsense"]) == 2


def test_bad_subcommand_exits_two():
    assert cli.main(["frobnicate"]) == 2


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "mmnet", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.strip().startswith("0.")
