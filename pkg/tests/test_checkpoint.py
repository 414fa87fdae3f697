import numpy as np
import pytest

from meshpose import checkpoint


def test_roundtrip_is_lossless(tmp_path):
    path = tmp_path / "x.ckpt"
    arrays = {
        "w": np.random.default_rng(0).normal(size=(3, 4, 5)),
        "idx": np.arange(7, dtype=np.int32),
        "flags": np.array([True, False, True]),
    }
    checkpoint.save_arrays(path, "test", arrays, {"note": "hi", "n": 3})
    loaded, meta = checkpoint.load_arrays(path, expected_kind="test")
    assert meta == {"note": "hi", "n": 3}
    for name, arr in arrays.items():
        np.testing.assert_array_equal(loaded[name], arr)
        assert loaded[name].dtype == arr.dtype


def test_truncated_file_raises_without_partial_object(tmp_path):
    path = tmp_path / "x.ckpt"
    checkpoint.save_arrays(path, "test", {"w": np.ones(100)})
    raw = path.read_bytes()
    for cut in (4, len(raw) // 2, len(raw) - 8):
        (tmp_path / "t.ckpt").write_bytes(raw[:cut])
        with pytest.raises(checkpoint.CheckpointError):
            checkpoint.load_arrays(tmp_path / "t.ckpt")


def test_version_mismatch_names_both_versions(tmp_path):
    path = tmp_path / "x.ckpt"
    checkpoint.save_arrays(path, "test", {"w": np.ones(3)})
    raw = bytearray(path.read_bytes())
    raw[8] = 99  # bump the little-endian version field
    path.write_bytes(bytes(raw))
    with pytest.raises(checkpoint.VersionMismatchError) as err:
        checkpoint.load_arrays(path)
    assert "99" in str(err.value)
    assert str(checkpoint.FORMAT_VERSION) in str(err.value)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 64)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_arrays(path)


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    checkpoint.save_arrays(path, "alpha", {"w": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_arrays(path, expected_kind="beta")


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.save_arrays(tmp_path / "x.ckpt", "test", {"w": np.array(["a", "b"])})
