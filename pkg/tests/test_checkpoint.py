import numpy as np
import pytest

from ticl import checkpoint
from ticl.autodiff import Tensor


def test_round_trip_with_config(tmp_path, rng):
    tensors = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "a.bias": rng.normal(size=4).astype(np.float32),
        "scalar": np.float32(2.5),
        "wrapped": Tensor(rng.normal(size=(2, 2, 2)).astype(np.float32)),
    }
    cfg = {"dim": 16, "nested": {"x": [1, 2, 3]}}
    path = checkpoint.save(tmp_path / "m.obix", tensors, config=cfg)
    loaded, got_cfg = checkpoint.load(path)
    assert got_cfg == cfg
    assert set(loaded) == set(tensors)
    for name, t in tensors.items():
        arr = getattr(t, "data", t)
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], np.asarray(arr, dtype=np.float32))


def test_round_trip_without_config(tmp_path):
    path = checkpoint.save(tmp_path / "m.obix", {"t": np.zeros(2, np.float32)})
    tensors, cfg = checkpoint.load(path)
    assert cfg is None
    assert np.array_equal(tensors["t"], np.zeros(2))


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "junk.obix"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(p)


def test_header_fields(tmp_path):
    path = checkpoint.save(tmp_path / "m.obix", {"t": np.zeros(2, np.float32)})
    raw = open(path, "rb").read()
    assert raw[:4] == b"OBIX"
    version = int.from_bytes(raw[4:8], "little")
    count = int.from_bytes(raw[8:12], "little")
    assert version == checkpoint.VERSION and count == 1
