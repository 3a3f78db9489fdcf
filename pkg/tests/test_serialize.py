import numpy as np
import pytest

from stgssm import serialize


def test_tensor_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(), (5,), (3, 4), (2, 3, 4, 5)]:
        arr = rng.normal(size=shape)
        path = tmp_path / "t.stgt"
        serialize.save_tensor(path, arr)
        back = serialize.load_tensor(path)
        assert back.shape == arr.shape
        assert np.array_equal(back, arr)


def test_container_layout():
    blob = serialize.tensor_bytes(np.array([[1.0, 2.0]]))
    assert blob[:4] == b"STGT"
    assert len(blob) == 4 + 8 + 16 + 16  # magic, version+rank, extents, payload


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.stgt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        serialize.load_tensor(path)


def test_truncation_detected(tmp_path):
    blob = serialize.tensor_bytes(np.ones(10))
    path = tmp_path / "trunc.stgt"
    path.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="truncated"):
        serialize.load_tensor(path)


def test_csv_export(tmp_path):
    path = tmp_path / "t.csv"
    serialize.tensor_to_csv(path, np.array([[1.5, -2.0], [0.25, 3.0]]))
    lines = path.read_text().splitlines()
    assert lines[0] == "index,value"
    assert lines[1] == "0,1.5"
    assert len(lines) == 5
    assert float(lines[4].split(",")[1]) == 3.0


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"w": rng.normal(size=(3, 3)), "b": rng.normal(size=3)}
    manifest = {"epoch": 4, "nested": {"lr": 1e-3}}
    path = tmp_path / "ck.stgc"
    serialize.save_checkpoint(path, tensors, manifest)
    back_t, back_m = serialize.load_checkpoint(path)
    assert set(back_t) == {"w", "b"}
    assert np.array_equal(back_t["w"], tensors["w"])
    assert back_m == manifest


def test_checkpoint_bytes_deterministic(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3)}
    manifest = {"z": 1, "a": [1.5, 2.5]}
    p1, p2 = tmp_path / "one.stgc", tmp_path / "two.stgc"
    serialize.save_checkpoint(p1, tensors, manifest)
    serialize.save_checkpoint(p2, tensors, manifest)
    assert p1.read_bytes() == p2.read_bytes()
