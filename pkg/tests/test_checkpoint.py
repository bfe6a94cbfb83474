import struct

import numpy as np
import pytest

from voxcal.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from voxcal.nn import Conv3d, Linear, dihedral


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "b.w": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "a.bias": np.array([np.float32(1e-38), -0.0, np.inf], np.float32),
        "scalar": np.array(2.5, np.float32),
    }
    save_checkpoint(tmp_path / "m.ckpt", tensors, {"epoch": 3, "kind": "test"})
    back, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"epoch": 3, "kind": "test"}
    assert set(back) == set(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_layout(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", {"x": np.arange(3, dtype=np.float32)})
    buf = (tmp_path / "m.ckpt").read_bytes()
    assert buf[:8] == MAGIC
    (n,) = struct.unpack_from("<Q", buf, 8)
    assert buf[16 + n :] == np.arange(3, dtype="<f4").tobytes()
    assert not (tmp_path / "m.ckpt.tmp").exists()


def test_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_module_state_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    a, b = Conv3d(2, 3, 3, rng), Conv3d(2, 3, 3, np.random.default_rng(2))
    save_checkpoint(tmp_path / "c.ckpt", a.state_dict())
    b.load_state_dict(load_checkpoint(tmp_path / "c.ckpt")[0])
    for k, v in a.state_dict().items():
        assert np.array_equal(v, b.state_dict()[k])


def test_load_state_errors():
    lin = Linear(3, 2, np.random.default_rng(0))
    with pytest.raises(KeyError):
        lin.load_state_dict({})
    bad = {k: np.zeros((9, 9), np.float32) for k in lin.state_dict()}
    with pytest.raises(ValueError):
        lin.load_state_dict(bad)


def test_dihedral_group():
    x = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    images = {dihedral(x, c).tobytes() for c in range(8)}
    assert len(images) == 8
    assert np.array_equal(dihedral(x, 0), x)
    assert np.array_equal(dihedral(dihedral(x, 3), 3), x)
    assert np.array_equal(dihedral(x, 5), np.rot90(x, 1, axes=(1, 2)))
