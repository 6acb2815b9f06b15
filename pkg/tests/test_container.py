import numpy as np
import pytest

from fedgid.container import ChecksumError, ContainerError, VersionError, read_container, write_container


def test_round_trip_preserves_dtype_shape_and_bits(tmp_path):
    arrays = {"a": np.arange(12, dtype=np.float64).reshape(3, 4) / 7, "m": np.eye(3, dtype=bool),
              "i": np.array([-1, 5], dtype=np.int64), "big": np.array([1.5], dtype=">f8")}
    p = write_container(tmp_path / "x.fgid", arrays, {"seed": 3}, kind="test")
    out, meta = read_container(p, kind="test")
    assert meta == {"seed": 3}
    for k, v in arrays.items():
        assert out[k].shape == v.shape
        assert np.array_equal(out[k], v)
    assert out["big"].dtype.byteorder in ("<", "=")


def test_truncated_file_fails_checksum(tmp_path):
    p = write_container(tmp_path / "x.fgid", {"a": np.ones(100)}, {}, kind="test")
    data = p.read_bytes()
    p.write_bytes(data[:-10])
    with pytest.raises(ChecksumError):
        read_container(p)


def test_flipped_payload_byte_fails_checksum(tmp_path):
    p = write_container(tmp_path / "x.fgid", {"a": np.ones(10)}, {}, kind="test")
    data = bytearray(p.read_bytes())
    data[-3] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        read_container(p)


def test_version_and_magic_and_kind_checks(tmp_path):
    p = write_container(tmp_path / "x.fgid", {"a": np.ones(2)}, {}, kind="test")
    data = bytearray(p.read_bytes())
    data[4] = 99
    bad = tmp_path / "v.fgid"
    bad.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        read_container(bad)
    junk = tmp_path / "junk.fgid"
    junk.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ContainerError):
        read_container(junk)
    with pytest.raises(ContainerError):
        read_container(p, kind="dataset")
