"""
Tests for the MTKP codec and module state round trips
"""

import os
import struct
import sys

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mtscan import checkpoint
from mtscan.errors import CheckpointError
from mtscan.models import ModelConfig, default_tasks
from mtscan.network import MultiTaskModel


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "scalar": np.array(3.5),
        "w": rng.standard_normal((2, 3)).astype(np.float32),
        "b.gamma": rng.standard_normal(4),
    }


def test_header_layout():
    payload = checkpoint.encode({"x": np.array([1.0], dtype=np.float32)})
    assert payload[:4] == b"MTKP"
    assert struct.unpack_from("<II", payload, 4) == (1, 1)
    assert struct.unpack_from("<H", payload, 12) == (1,)
    assert payload[14:15] == b"x"
    assert struct.unpack_from("<BBI", payload, 15) == (0, 1, 1)
    assert struct.unpack_from("<f", payload, 21) == (1.0,)
    assert len(payload) == 25


def test_decode_preserves_names_order_dtypes():
    tensors = sample_tensors()
    decoded = checkpoint.decode(checkpoint.encode(tensors))
    assert list(decoded) == list(tensors)
    for name, array in tensors.items():
        assert decoded[name].dtype == array.dtype
        np.testing.assert_array_equal(decoded[name], array)


def test_bad_magic():
    payload = b"XXXX" + checkpoint.encode(sample_tensors())[4:]
    with pytest.raises(CheckpointError):
        checkpoint.decode(payload)


def test_bad_version():
    payload = bytearray(checkpoint.encode(sample_tensors()))
    struct.pack_into("<I", payload, 4, 2)
    with pytest.raises(CheckpointError):
        checkpoint.decode(bytes(payload))


@pytest.mark.parametrize("cut", [6, 15, -3])
def test_truncation(cut):
    payload = checkpoint.encode(sample_tensors())
    with pytest.raises(CheckpointError):
        checkpoint.decode(payload[:cut])


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        checkpoint.encode({"ints": np.arange(3)})


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "absent.mtkp")


def test_model_state_round_trip(tmp_path):
    tasks = [t for t in default_tasks(2) if t.name in ("semseg", "depth")]
    config = ModelConfig(C=4, N=2, tasks=tasks, head="lite", dtype="f64")
    source = MultiTaskModel(config.model_copy(update={"seed": 1}))
    target = MultiTaskModel(config.model_copy(update={"seed": 2}))
    checkpoint.save(tmp_path / "m.mtkp", source.state_dict())
    target.load_state_dict(checkpoint.load(tmp_path / "m.mtkp"))
    for name, array in source.state_dict().items():
        np.testing.assert_array_equal(target.state_dict()[name], array)


def test_load_state_dict_rejects_missing_and_misshaped():
    tasks = [t for t in default_tasks(2) if t.name == "depth"]
    model = MultiTaskModel(ModelConfig(C=4, N=2, tasks=tasks, dtype="f64"))
    state = model.state_dict()
    name = next(iter(state))
    with pytest.raises(CheckpointError):
        model.load_state_dict({k: v for k, v in state.items() if k != name})
    broken = dict(state)
    broken[name] = np.zeros(state[name].shape + (2,))
    with pytest.raises(CheckpointError):
        model.load_state_dict(broken)
