import struct
from dataclasses import replace

import numpy as np
import pytest

from mcnet.autodiff import Tensor
from mcnet.data import (CheckpointError, FrameDataset, ImageFormatError, ManifestError, ShapeMismatchError,
                        SyntheticScene, load_checkpoint, load_tensors, read_image, render_sequence, sample_pair,
                        save_checkpoint, save_tensors, write_manifest, write_pgm, write_ppm)
from mcnet.data.checkpoint import decode_entries, encode_entries, load_parameters
from mcnet.data.imageio import decode, encode_ppm
from mcnet.model import MCNet

from .conftest import tiny_run_config

# -- synthetic faces ---------------------------------------------------------


def test_still_scene_frames_identical():
    frames, marks = render_sequence(SyntheticScene().still(), 5, 32)
    assert all(np.array_equal(frames[0], f) for f in frames[1:])
    assert np.ptp(marks, axis=0).max() == 0


def test_pure_translation_moves_landmarks_rigidly():
    scene = replace(SyntheticScene().still(), shift_amplitude=(0.1, 0.05))
    _, marks = render_sequence(scene, 8, 32)
    offsets = marks - marks[0]
    # every landmark moves by the same vector in each frame
    np.testing.assert_allclose(offsets, np.broadcast_to(offsets[:, :1], offsets.shape), atol=1e-12)
    assert np.abs(offsets).max() > 0


def test_render_is_deterministic():
    a = render_sequence(SyntheticScene(seed=3), 4, 48)
    b = render_sequence(SyntheticScene(seed=3), 4, 48)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_render_range_and_shapes():
    frames, marks = render_sequence(SyntheticScene(), 3, 32)
    assert frames.shape == (3, 3, 32, 32) and marks.shape == (3, 5, 2)
    assert frames.min() >= 0 and frames.max() <= 1


def test_render_minimum_size():
    with pytest.raises(ValueError):
        render_sequence(SyntheticScene(), 2, 16)


# -- PPM / PGM -----------------------------------------------------------------


def test_ppm_white_pixel_bytes():
    data = encode_ppm(np.ones((3, 1, 1)))
    header, payload = data[:-3], data[-3:]
    assert header.split() == [b"P6", b"1", b"1", b"255"]
    assert payload == bytes([255, 255, 255])


def test_ppm_round_trip_error_bound(tmp_path, rng):
    img = rng.uniform(-0.1, 1.1, (3, 7, 5))
    write_ppm(tmp_path / "a.ppm", img)
    back = read_image(tmp_path / "a.ppm")
    assert np.abs(back - np.clip(img, 0, 1)).max() <= 1 / 510 + 1e-12


def test_pgm_round_trip(tmp_path, rng):
    img = rng.uniform(0, 1, (4, 6))
    write_pgm(tmp_path / "a.pgm", img)
    back = read_image(tmp_path / "a.pgm")
    assert back.shape == (4, 6) and np.abs(back - img).max() <= 1 / 510 + 1e-12


def test_header_comments_allowed():
    data = b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255])
    np.testing.assert_array_equal(decode(data), [[0.0, 1.0]])


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n255 255 255\n",       # ASCII variant
    b"P6\n1 x\n255\n\x00\x00\x00",        # non-numeric
    b"P6\n1 1\n65535\n" + b"\x00" * 6,  # 16-bit
    b"P6\n2 2\n255\n" + b"\x00" * 5,    # truncated payload
    b"P6\n2",                              # truncated header
])
def test_malformed_images_rejected(data):
    with pytest.raises(ImageFormatError):
        decode(data)


# -- checkpoints -----------------------------------------------------------------


def test_tensor_file_round_trip(tmp_path, rng):
    entries = [("a", rng.standard_normal((2, 3)).astype(np.float32)), ("b/c", np.asarray(1.5)),
               ("ü", rng.standard_normal(4))]
    save_tensors(tmp_path / "t.mcnc", entries)
    back = load_tensors(tmp_path / "t.mcnc")
    assert list(back) == ["a", "b/c", "ü"]
    for name, arr in entries:
        assert back[name].dtype == arr.dtype and np.array_equal(back[name], arr)


def test_checkpoint_header_layout():
    data = encode_entries([("w", np.zeros((2,), np.float32))])
    assert data[:4] == b"MCNC"
    assert struct.unpack("<II", data[4:12]) == (1, 1)


def test_unknown_version_rejected():
    data = bytearray(encode_entries([("w", np.zeros(1))]))
    data[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        decode_entries(bytes(data))


def test_name_collision_rejected():
    with pytest.raises(CheckpointError, match="collision"):
        encode_entries([("w", np.zeros(1)), ("w", np.ones(1))])


def test_dim_overflow_rejected():
    huge = np.lib.stride_tricks.as_strided(np.zeros(1, np.float32), shape=(2 ** 32,), strides=(0,))
    with pytest.raises(CheckpointError, match="overflow"):
        encode_entries([("w", huge)])


def test_unsupported_dtype_rejected():
    with pytest.raises(CheckpointError):
        encode_entries([("w", np.zeros(2, np.int32))])


def test_model_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_run_config()
    model = MCNet(cfg.model, dtype=np.float64, seed=1)
    save_checkpoint(model, tmp_path / "a.mcnc")
    loaded, state = load_checkpoint(tmp_path / "a.mcnc")
    save_checkpoint(loaded, tmp_path / "b.mcnc")
    assert (tmp_path / "a.mcnc").read_bytes() == (tmp_path / "b.mcnc").read_bytes()
    assert loaded.config == cfg.model and state.step == 0
    x = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
    y = Tensor(rng.uniform(0, 1, (2, 3, 32, 32)))
    assert np.array_equal(model.animate(x, y).image.data, loaded.animate(x, y).image.data)
    assert [p for n, p in loaded.named_parameters() if n == "memory.bank"] == [loaded.memory.bank]


def test_load_into_mismatched_config_names_tensor(tmp_path):
    small = MCNet(tiny_run_config().model, dtype=np.float64)
    save_checkpoint(small, tmp_path / "s.mcnc")
    wider = MCNet(tiny_run_config(model__memory__c="6").model, dtype=np.float64)
    with pytest.raises(ShapeMismatchError, match="memory.bank"):
        load_parameters(wider, load_tensors(tmp_path / "s.mcnc"))


# -- manifests -------------------------------------------------------------------


def test_manifest_round_trip_and_sampling(tiny_dataset):
    data = FrameDataset.from_manifest(tiny_dataset)
    assert len(data) == 3 and data.frame_shape == (3, 32, 32)
    rng = np.random.default_rng(0)
    for _ in range(20):
        pair = sample_pair(data, "same", rng)
        assert pair.source_id[0] == pair.driving_id[0] and pair.source_id[1] != pair.driving_id[1]
        cross = sample_pair(data, "cross", rng)
        assert cross.source_id[0] != cross.driving_id[0]


def test_sampling_reproducible(tiny_dataset):
    data = FrameDataset.from_manifest(tiny_dataset)
    a = [sample_pair(data, "same", np.random.default_rng(4)).source_id for _ in range(3)]
    b = [sample_pair(data, "same", np.random.default_rng(4)).source_id for _ in range(3)]
    assert a == b


def test_cross_needs_two_sequences(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 4)))
    write_ppm(tmp_path / "b.ppm", np.zeros((3, 4, 4)))
    write_manifest(tmp_path / "m.txt", [["a.ppm", "b.ppm"]])
    data = FrameDataset.from_manifest(tmp_path / "m.txt")
    with pytest.raises(ManifestError):
        sample_pair(data, "cross", np.random.default_rng(0))


def test_same_needs_two_frames(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((3, 4, 4)))
    write_manifest(tmp_path / "m.txt", [["a.ppm"]])
    data = FrameDataset.from_manifest(tmp_path / "m.txt")
    with pytest.raises(ManifestError):
        sample_pair(data, "same", np.random.default_rng(0))


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.txt").write_text("nothere.ppm\n")
    with pytest.raises(ManifestError, match="nothere"):
        FrameDataset.from_manifest(tmp_path / "m.txt")


def test_empty_manifest(tmp_path):
    (tmp_path / "m.txt").write_text("\n\n")
    with pytest.raises(ManifestError):
        FrameDataset.from_manifest(tmp_path / "m.txt")
