import csv
import subprocess
import sys

import numpy as np
import pytest

from mcnet.cli import main, normalize_channel
from mcnet.data import load_checkpoint, read_image, save_checkpoint, write_manifest, write_ppm

TINY = ["model.image_size=32", "model.motion_size=16", "model.levels=2", "model.base_channels=4",
        "model.keypoints=3", "model.memory.c=8", "model.memory.h=4", "model.memory.w=4", "model.kp_block=4",
        "model.kp_depth=2", "model.motion_block=4", "model.motion_depth=2", "model.max_channels=8",
        "train.batch=2", "train.log_every=0", "train.ckpt_every=0"]


def train_args(manifest, out, steps, *extra):
    args = ["train", "--set", "profile=desk", "--set", f"data.manifest={manifest}", "--out", str(out),
            "--steps", str(steps)]
    for item in TINY + list(extra):
        args += ["--set", item]
    return args


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_dataset):
    out = tmp_path_factory.mktemp("run")
    assert main(train_args(tiny_dataset, out, 2, "train.precision=64")) == 0
    return out / "last.mcnc"


def test_synth_small(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "d"), "--sequences", "1", "--frames", "2", "--size", "32"]) == 0
    ppms = sorted(p.name for p in (tmp_path / "d").rglob("*.ppm"))
    assert ppms == ["frame0000.ppm", "frame0001.ppm"]
    assert (tmp_path / "d" / "manifest.txt").read_text().split() == ["seq000/frame0000.ppm", "seq000/frame0001.ppm"]


def test_synth_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["synth", "--out", str(tmp_path / name), "--sequences", "2", "--frames", "2", "--size", "32",
              "--seed", "7"])
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files_a)


def test_synth_size_too_small(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--size", "16"]) == 1
    assert "32" in capsys.readouterr().err


def test_synth_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", "--out", str(blocker / "sub"), "--sequences", "1", "--frames", "1", "--size", "32"]) == 2


def test_usage_errors(capsys):
    assert main([]) == 1
    assert main(["bogus"]) == 1
    assert main(["synth"]) == 1


def test_train_zero_steps_writes_only_checkpoint(tmp_path, tiny_dataset):
    assert main(train_args(tiny_dataset, tmp_path, 0)) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_000000.mcnc"]


def test_train_unknown_key(tmp_path, tiny_dataset, capsys):
    assert main(train_args(tiny_dataset, tmp_path, 1, "model.wings=3")) == 1
    assert "model.wings" in capsys.readouterr().err


def test_train_missing_manifest(tmp_path):
    assert main(train_args(tmp_path / "none.txt", tmp_path / "o", 1)) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_abort_reports_step(tmp_path, tiny_dataset, capsys):
    code = main(train_args(tiny_dataset, tmp_path, 5, "train.lr=1e30"))
    assert code == 3
    assert "step 1" in capsys.readouterr().err


def test_train_resume_continues_numbering(tmp_path, tiny_dataset):
    assert main(train_args(tiny_dataset, tmp_path, 2, "train.precision=64")) == 0
    assert main(train_args(tiny_dataset, tmp_path, 2, "train.precision=64")
                + ["--resume", str(tmp_path / "last.mcnc")]) == 0
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert [r["step"] for r in rows] == ["0", "1", "2", "3"]
    _, state = load_checkpoint(tmp_path / "last.mcnc")
    assert state.step == 4

    # the resumed tail equals an uninterrupted run
    straight = tmp_path / "straight"
    assert main(train_args(tiny_dataset, straight, 4, "train.precision=64")) == 0
    assert (straight / "metrics.csv").read_text() == (tmp_path / "metrics.csv").read_text()


def test_animate_one_frame(tmp_path, trained, tiny_dataset):
    frame = tiny_dataset.parent / "seq000" / "frame0000.ppm"
    write_manifest(tmp_path / "drive.txt", [[str(tiny_dataset.parent / "seq001" / "frame0002.ppm")]])
    assert main(["animate", "--ckpt", str(trained), "--source", str(frame), "--driving-manifest",
                 str(tmp_path / "drive.txt"), "--out", str(tmp_path / "out")]) == 0
    outs = list((tmp_path / "out").iterdir())
    assert len(outs) == 1 and read_image(outs[0]).shape == (3, 32, 32)


def test_animate_size_mismatch(tmp_path, trained, tiny_dataset, capsys):
    write_ppm(tmp_path / "big.ppm", np.zeros((3, 64, 64)))
    code = main(["animate", "--ckpt", str(trained), "--source", str(tmp_path / "big.ppm"),
                 "--driving-manifest", str(tiny_dataset), "--out", str(tmp_path / "out")])
    assert code == 2 and "64" in capsys.readouterr().err


def test_inspect_memory_tiles(tmp_path, trained):
    assert main(["inspect-memory", "--ckpt", str(trained), "--out", str(tmp_path / "m")]) == 0
    tiles = sorted(p.name for p in (tmp_path / "m").glob("memory_ch*.pgm"))
    assert tiles == [f"memory_ch{i:03d}.pgm" for i in range(8)]
    assert (tmp_path / "m" / "memory_grid.pgm").exists()


def test_inspect_memory_constant_channel(tmp_path, trained):
    model, state = load_checkpoint(trained)
    model.memory.bank.data[3] = 0.7
    save_checkpoint(model, tmp_path / "c.mcnc", state)
    assert main(["inspect-memory", "--ckpt", str(tmp_path / "c.mcnc"), "--out", str(tmp_path / "m"),
                 "--channels", "3"]) == 0
    tile = read_image(tmp_path / "m" / "memory_ch003.pgm")
    assert np.all(tile == 128 / 255)


def test_normalize_channel():
    np.testing.assert_array_equal(normalize_channel(np.full((2, 2), -4.0)), 0.5)
    np.testing.assert_allclose(normalize_channel(np.array([[1.0, 3.0]])), [[0.0, 1.0]])


def test_inspect_memory_with_source_differs(tmp_path, trained, tiny_dataset):
    src = tiny_dataset.parent / "seq000" / "frame0000.ppm"
    main(["inspect-memory", "--ckpt", str(trained), "--out", str(tmp_path / "a")])
    main(["inspect-memory", "--ckpt", str(trained), "--out", str(tmp_path / "b"), "--source", str(src)])
    a = read_image(tmp_path / "a" / "memory_grid.pgm")
    b = read_image(tmp_path / "b" / "conditioned_level1_grid.pgm")
    assert a.shape == b.shape and np.abs(a - b).max() > 0


def test_eval_same_and_cross(tmp_path, trained, tiny_dataset):
    assert main(["eval", "--ckpt", str(trained), "--manifest", str(tiny_dataset), "--pairs", "3",
                 "--out", str(tmp_path / "same.csv")]) == 0
    header = (tmp_path / "same.csv").read_text().splitlines()[0].split(",")
    assert {"l1", "psnr", "ssim"} <= set(header)
    assert main(["eval", "--ckpt", str(trained), "--manifest", str(tiny_dataset), "--mode", "cross",
                 "--pairs", "3", "--out", str(tmp_path / "cross.csv")]) == 0
    header = (tmp_path / "cross.csv").read_text().splitlines()[0].split(",")
    assert "psnr" not in header and "ssim" not in header


def test_eval_empty_manifest(tmp_path, trained):
    (tmp_path / "empty.txt").write_text("")
    assert main(["eval", "--ckpt", str(trained), "--manifest", str(tmp_path / "empty.txt")]) == 2


def test_gradcheck_one_op(capsys):
    assert main(["gradcheck", "--op", "softmax"]) == 0
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("PASS")]
    assert len(lines) == 3


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--op", "nope"]) == 1


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "mcnet.cli", "gradcheck", "--op", "relu"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "3/3 passed" in proc.stdout
