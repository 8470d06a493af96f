import subprocess
import sys
import time

import numpy as np
import pytest

from u3ds3.cli import main
from u3ds3.pointcloud import load_ply
from u3ds3.superpoint import load_sp

SMALL = ["--widths", "12,8,16", "--dim", "16", "--res", "8", "--pts", "512", "--epochs", "1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "scene.txt").write_text("extent = 1.4, 1.4, 0.5\nn_boxes = 1\nn_spheres = 0\n"
                                 "density = 400\nseed = 2\n")
    assert main(["gen-synth", "--spec", str(d / "scene.txt"), "--out", str(d / "raw.ply")]) == 0
    assert main(["preprocess", "--in", str(d / "raw.ply"), "--out", str(d / "data"), "--pts", "512"]) == 0
    return d


def test_selftest_subprocess_fast():
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "u3ds3", "selftest"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert time.perf_counter() - t < 60
    assert "FAIL" not in proc.stdout


def test_train_without_classes_is_usage_error(capsys, workdir):
    code = main(["train", "--data", str(workdir / "data"), "--out", str(workdir / "x.ckpt")])
    assert code == 1
    assert "--classes" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main([]) == 1
    assert main(["nonsense"]) == 1


def test_missing_input_is_data_error(tmp_path, capsys):
    assert main(["superpoints", "--in", str(tmp_path / "none.ply"), "--out", str(tmp_path / "a.sp")]) == 2
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                   "property float z\nend_header\n0 0 0\n")
    assert main(["superpoints", "--in", str(bad), "--out", str(tmp_path / "a.sp")]) == 2
    assert "vertex count mismatch" in capsys.readouterr().err


def test_dump_config_merges_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("classes = 5\nlr = 0.01\n")
    assert main(["train", "--config", str(cfg), "--lr", "0.5", "--dump-config"]) == 0
    out = capsys.readouterr().out
    assert "classes = 5\n" in out and "lr = 0.5\n" in out
    (tmp_path / "echo.txt").write_text(out)
    assert main(["train", "--config", str(tmp_path / "echo.txt"), "--dump-config"]) == 0
    assert capsys.readouterr().out == out


def test_preprocess_output(workdir):
    cloud = load_ply(workdir / "data" / "raw.ply")
    assert cloud.normals is not None and cloud.gt_labels is not None
    raw = load_ply(workdir / "raw.ply")
    assert len(cloud) < len(raw)


def test_full_pipeline(workdir):
    d = workdir
    data = d / "data"
    assert main(["superpoints", "--in", str(data / "raw.ply"), "--gamma", "20",
                 "--out", str(data / "raw.sp")]) == 0
    sp = load_sp(data / "raw.sp")
    assert len(np.unique(sp)) == 20
    args = ["train", "--data", str(data), "--classes", "3", "--seed", "1", "--deterministic",
            "--report", str(d / "train.csv")] + SMALL
    assert main(args + ["--out", str(d / "a.ckpt")]) == 0
    assert main(args + ["--out", str(d / "b.ckpt")]) == 0
    assert (d / "a.ckpt").read_bytes() == (d / "b.ckpt").read_bytes()
    assert (d / "train.csv").read_text().startswith("epoch,oAcc,mAcc,mIoU,IoU_0")

    assert main(["segment", "--ckpt", str(d / "a.ckpt"), "--in", str(data / "raw.ply"),
                 "--sp", str(data / "raw.sp"), "--out", str(d / "seg.ply")]) == 0
    seg = load_ply(d / "seg.ply")
    assert seg.gt_labels.max() < 3 and seg.colors is not None
    for s in np.unique(sp):
        assert len(np.unique(seg.gt_labels[sp == s])) == 1

    assert main(["eval", "--pred", str(d / "seg.ply"), "--gt", str(data / "raw.ply"),
                 "--classes", "3", "--out", str(d / "report.csv")]) == 0
    lines = (d / "report.csv").read_text().splitlines()
    assert lines[0] == "epoch,oAcc,mAcc,mIoU,IoU_0,IoU_1,IoU_2" and len(lines) == 2

    assert main(["export-ply", "--in", str(data / "raw.ply"), "--labels", str(data / "raw.sp"),
                 "--out", str(d / "sp.ply")]) == 0
    assert np.array_equal(load_ply(d / "sp.ply").gt_labels, sp)


def test_eval_label_file_length_mismatch(workdir, tmp_path):
    (tmp_path / "p.txt").write_text("0\n1\n")
    assert main(["eval", "--pred", str(tmp_path / "p.txt"), "--gt", str(workdir / "data" / "raw.ply"),
                 "--classes", "3"]) == 2


def test_threads_variable_validated(monkeypatch, workdir):
    monkeypatch.setenv("U3DS3_THREADS", "zero")
    assert main(["selftest"]) == 1
