import numpy as np
import pytest

from henfd.autodiff import ParamStore
from henfd.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint


def store():
    s = ParamStore()
    s.add("a.w", np.arange(6.0).reshape(2, 3))
    s.add("b", [np.pi, -0.0, 1e-300])
    s.add("scalar", np.array(2.5))
    return s


def test_roundtrip_is_exact(tmp_path):
    s = store()
    save_checkpoint(tmp_path / "x.ckpt", s, {"epoch": 3, "nested": {"k": [1, 2]}})
    back, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"epoch": 3, "nested": {"k": [1, 2]}}
    assert back.names() == s.names()
    for name in s.names():
        assert back.value(name).shape == s.value(name).shape
        assert back.value(name).tobytes() == s.value(name).tobytes()
    assert back.checksum() == s.checksum()


def test_magic_header(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", store(), {})
    assert (tmp_path / "x.ckpt").read_bytes().startswith(MAGIC) and MAGIC == b"HENFD-CKPT-1\n"


def test_wrong_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"PK\x03\x04 something else")
    with pytest.raises(CheckpointError, match="not a HENFD-CKPT-1"):
        load_checkpoint(tmp_path / "x.ckpt")


@pytest.mark.parametrize("keep", [len(MAGIC) + 3, len(MAGIC) + 20, -8, -3])
def test_truncation_detected(tmp_path, keep):
    save_checkpoint(tmp_path / "x.ckpt", store(), {"m": 1})
    data = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "y.ckpt").write_bytes(data[:keep])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "y.ckpt")


def test_loaded_values_are_writable(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", store(), {})
    back, _ = load_checkpoint(tmp_path / "x.ckpt")
    back.value("b")[0] = 1.0
