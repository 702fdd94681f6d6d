import struct

import numpy as np
import pytest

from pulmo import checkpoint
from pulmo.errors import CheckpointError, MissingArtifactError
from pulmo.nn import ModelConfig, build_model


def small(family="resnet_mini", **kw):
    task = "segmentation" if family.endswith("unet") else "classification"
    return build_model(ModelConfig(task=task, family=family, input_size=(8, 8), base_channels=2, depth=1, **kw), seed=4)


def test_single_tensor_byte_count():
    raw = checkpoint.encode({"w": np.array([1.5, -2.0], np.float32)})
    assert len(raw) == 8 + 4 + 2 + 1 + 1 + 4 + 8 == 28
    assert raw[:8] == b"NNCKPT1\0"
    assert struct.unpack("<I", raw[8:12]) == (1,)
    assert raw[-8:] == np.array([1.5, -2.0], "<f4").tobytes()


@pytest.mark.parametrize("family", ["unet", "modified_unet", "plain_cnn", "resnet_mini", "densenet_mini"])
def test_save_load_save_identical(tmp_path, family):
    model = small(family)
    checkpoint.save(model, tmp_path / "a.ckpt", {"fold": 1})
    loaded = checkpoint.load(tmp_path / "a.ckpt", seed=99)
    checkpoint.save(loaded, tmp_path / "b.ckpt", {"fold": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert checkpoint.load_meta(tmp_path / "b.ckpt")["meta"] == {"fold": 1}


def test_tampered_magic(tmp_path):
    checkpoint.save(small(), tmp_path / "a.ckpt")
    raw = bytearray((tmp_path / "a.ckpt").read_bytes())
    raw[6] = ord("2")
    (tmp_path / "a.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(tmp_path / "a.ckpt")


def test_truncation(tmp_path):
    raw = checkpoint.encode(small().state_dict())
    with pytest.raises(CheckpointError, match="truncated"):
        checkpoint.decode(raw[:-3])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.decode(raw + b"\0")


def test_shape_mismatch_names_tensor(tmp_path):
    checkpoint.save(small(), tmp_path / "a.ckpt")
    other = build_model(ModelConfig(task="classification", family="resnet_mini", input_size=(8, 8), base_channels=3, depth=1))
    with pytest.raises(CheckpointError, match="blocks.0"):
        checkpoint.load_into(other, tmp_path / "a.ckpt")


def test_missing_files(tmp_path):
    with pytest.raises(MissingArtifactError):
        checkpoint.load_state(tmp_path / "nope.ckpt")
    (tmp_path / "bare.ckpt").write_bytes(checkpoint.encode({}))
    with pytest.raises(MissingArtifactError):
        checkpoint.load(tmp_path / "bare.ckpt")


def test_buffers_round_trip(tmp_path):
    model = small("plain_cnn")
    bn = model.blocks[0].unit.bn
    bn.state.running_mean[:] = [0.25, -1.0]
    checkpoint.save(model, tmp_path / "a.ckpt")
    np.testing.assert_array_equal(checkpoint.load(tmp_path / "a.ckpt").blocks[0].unit.bn.state.running_mean, [0.25, -1.0])
