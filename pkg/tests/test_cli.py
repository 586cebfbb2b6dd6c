import os

import numpy as np
import pytest

from irtk import cli
from irtk.formats import read_annotations, read_detections


def run(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


SYNTH_ARGS = [
    "synth", "--width", "128", "--height", "96", "--frames", "12", "--targets", "1",
    "--clutter-rate", "1", "--noise-sigma", "15", "--seed", "3",
]

FAST_TRAIN = ["--set", "n_trees=25", "--set", "candidate_budget=80", "--set", "scales=3,7"]


def test_synth_writes_dataset(tmp_path, capsys):
    out = tmp_path / "seq"
    code, stdout, _ = run(capsys, *SYNTH_ARGS, "--out", str(out))
    assert code == 0
    assert "wrote 12 frames" in stdout
    assert (out / "annotations.csv").exists()
    assert (out / "transforms.txt").exists()
    assert (out / "spec.cfg").exists()
    assert len(list(out.glob("frame_*.pgm"))) == 12


def test_synth_rejects_too_many_targets(tmp_path, capsys):
    code, _, stderr = run(capsys, "synth", "--targets", "9", "--out", str(tmp_path / "x"))
    assert code == 1
    assert "error" in stderr


def test_synth_reruns_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, *SYNTH_ARGS, "--out", str(tmp_path / name))
        assert code == 0
    for fname in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-data")
    seq = root / "seq"
    assert cli.main(SYNTH_ARGS + ["--out", str(seq)]) == 0
    return seq


@pytest.fixture(scope="module")
def trained_model(dataset, tmp_path_factory):
    model = tmp_path_factory.mktemp("cli-model") / "model.txt"
    assert cli.main(["train", "--data", str(dataset), "--model-out", str(model)] + FAST_TRAIN) == 0
    return model


def test_train_reports_counts(dataset, tmp_path, capsys):
    model = tmp_path / "m.txt"
    code, stdout, _ = run(
        capsys, "train", "--data", str(dataset), "--model-out", str(model), *FAST_TRAIN
    )
    assert code == 0
    n_ann = len(read_annotations(str(dataset / "annotations.csv")))
    assert f"({9 * n_ann} positive" in stdout
    assert "final training loss" in stdout
    assert model.exists()


def test_train_deterministic_bytes(dataset, tmp_path, capsys):
    outs = []
    for name in ("m1.txt", "m2.txt"):
        model = tmp_path / name
        code, _, _ = run(
            capsys, "train", "--data", str(dataset), "--model-out", str(model),
            "--seed", "9", *FAST_TRAIN,
        )
        assert code == 0
        outs.append(model.read_bytes())
    assert outs[0] == outs[1]


def test_train_rejects_unannotated_dir(tmp_path, capsys):
    empty = tmp_path / "noann"
    empty.mkdir()
    # a frame but no annotations.csv
    from irtk.imaging import Frame, save_frame

    save_frame(Frame(index=0, pixels=np.zeros((16, 16), np.uint16)), str(empty / "frame_00000.pgm"))
    code, _, stderr = run(capsys, "train", "--data", str(empty), "--model-out", str(tmp_path / "m.txt"))
    assert code == 1
    assert "annotations" in stderr


def test_detect_with_gt_transforms(dataset, trained_model, tmp_path, capsys):
    out = tmp_path / "det.csv"
    code, stdout, _ = run(
        capsys,
        "detect", "--seq", str(dataset), "--model", str(trained_model),
        "--out", str(out), "--gt-transforms", "--window", "20", "--mu", "0.3",
        *FAST_TRAIN,
    )
    assert code == 0
    assert "confirmation threshold: 6" in stdout
    assert "ms/frame" in stdout
    rows = read_detections(str(out))
    assert rows, "expected at least one detection row"


def test_detect_missing_model(dataset, tmp_path, capsys):
    code, _, stderr = run(
        capsys, "detect", "--seq", str(dataset), "--model", str(tmp_path / "nope.txt"),
        "--out", str(tmp_path / "d.csv"),
    )
    assert code == 1


def test_detect_empty_sequence_dir(trained_model, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    code, _, stderr = run(
        capsys, "detect", "--seq", str(empty), "--model", str(trained_model),
        "--out", str(tmp_path / "d.csv"),
    )
    assert code == 1
    assert "frame" in stderr


def test_detect_overlay(dataset, trained_model, tmp_path, capsys):
    overlay = tmp_path / "overlay"
    code, _, _ = run(
        capsys,
        "detect", "--seq", str(dataset), "--model", str(trained_model),
        "--out", str(tmp_path / "d.csv"), "--gt-transforms", "--overlay", str(overlay),
        *FAST_TRAIN,
    )
    assert code == 0
    assert len(list(overlay.glob("frame_*.pgm"))) == 12


def test_eval_perfect_and_mismatched(dataset, tmp_path, capsys):
    ann = dataset / "annotations.csv"
    rows = read_annotations(str(ann))
    det = tmp_path / "det.csv"
    from irtk.formats import write_detections

    write_detections([(f, tid, x, y, 1.0) for f, tid, x, y in rows], str(det))
    report = tmp_path / "summary.csv"
    code, stdout, _ = run(capsys, "eval", "--detections", str(det), "--annotations", str(ann),
                          "--report", str(report))
    assert code == 0
    assert "f_measure: 1.0000" in stdout
    assert report.read_text().splitlines()[1].startswith("1.000000")

    shifted = tmp_path / "shift.csv"
    write_detections([(f, tid, x + 200, y, 1.0) for f, tid, x, y in rows], str(shifted))
    code, stdout, _ = run(capsys, "eval", "--detections", str(shifted), "--annotations", str(ann))
    assert code == 0
    assert "f_measure: 0.0000" in stdout


def test_eval_parse_failure(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("frame,track_id,x,y,score\n1,2,three,4,5\n")
    ann = tmp_path / "ann.csv"
    ann.write_text("frame,target_id,x,y\n0,0,1,1\n")
    code, _, stderr = run(capsys, "eval", "--detections", str(bad), "--annotations", str(ann))
    assert code == 1


def test_dump_config_round_trip(tmp_path, capsys):
    code, stdout, _ = run(capsys, "dump-config", "--set", "window_length=25", "--set", "length_fraction=0.4")
    assert code == 0
    cfg = cli.config_from_text(stdout)
    assert cfg.window_length == 25
    assert cfg.length_fraction == 0.4
    # dumping the parsed config again reproduces the same text
    assert cli.config_to_text(cfg) == stdout


def test_config_file_plus_overrides(tmp_path, capsys):
    path = tmp_path / "pipeline.cfg"
    path.write_text("candidate_budget = 1234\nscore_threshold = 0.25\n")
    code, stdout, _ = run(capsys, "dump-config", "--config", str(path), "--set", "score_threshold=0.75")
    assert code == 0
    cfg = cli.config_from_text(stdout)
    assert cfg.candidate_budget == 1234
    assert cfg.score_threshold == 0.75


def test_config_rejects_unknown_key(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text("definitely_not_a_key = 1\n")
    code, _, stderr = run(capsys, "dump-config", "--config", str(path))
    assert code == 1
    assert "unknown key" in stderr


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("IRTK_THREADS", raising=False)
    assert cli.worker_count() >= 1
    monkeypatch.setenv("IRTK_THREADS", "0")
    assert cli.worker_count() >= 1
    monkeypatch.setenv("IRTK_THREADS", "2")
    assert cli.worker_count() == 2
