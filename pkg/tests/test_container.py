import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from omnifield.container import ContainerError, array_checksums, read_container, read_manifest, write_container


def _sample():
    rng = np.random.default_rng(0)
    return {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=5).astype(np.float32),
        "idx": np.arange(6, dtype=np.int64).reshape(2, 3),
        "mask": np.array([[True, False], [False, True]]),
    }


def test_round_trip(tmp_path):
    arrs = _sample()
    write_container(tmp_path / "c", arrs, {"kind": "test", "n": 3})
    back, meta = read_container(tmp_path / "c")
    assert meta == {"kind": "test", "n": 3}
    for k, v in arrs.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_files_are_little_endian_with_checksums(tmp_path):
    arrs = {"x": np.array([1.0, 2.0])}
    man = write_container(tmp_path / "c", arrs)
    entry = man["arrays"][0]
    raw = (tmp_path / "c" / entry["file"]).read_bytes()
    assert raw == np.array([1.0, 2.0], dtype="<f8").tobytes()
    assert entry["sha256"] == hashlib.sha256(raw).hexdigest()
    assert entry["nbytes"] == 16 and entry["shape"] == [2]
    assert read_manifest(tmp_path / "c")["schema_version"] == 1


def test_big_endian_input_is_stored_little_endian(tmp_path):
    x = np.arange(4, dtype=">f4")
    write_container(tmp_path / "c", {"x": x})
    back, _ = read_container(tmp_path / "c")
    np.testing.assert_array_equal(back["x"], np.arange(4.0))
    assert array_checksums(tmp_path / "c")["x"] == hashlib.sha256(np.arange(4, dtype="<f4").tobytes()).hexdigest()


def test_rewrite_is_deterministic(tmp_path):
    write_container(tmp_path / "a", _sample(), {"m": 1})
    write_container(tmp_path / "b", _sample(), {"m": 1})
    assert array_checksums(tmp_path / "a") == array_checksums(tmp_path / "b")
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_existing_output_needs_force(tmp_path):
    write_container(tmp_path / "c", {"x": np.zeros(2)})
    with pytest.raises(FileExistsError):
        write_container(tmp_path / "c", {"x": np.ones(2)})
    write_container(tmp_path / "c", {"x": np.ones(2)}, force=True)
    np.testing.assert_array_equal(read_container(tmp_path / "c")[0]["x"], 1.0)
    assert not (tmp_path / "c.partial").exists()


def test_truncated_file_is_rejected(tmp_path):
    man = write_container(tmp_path / "c", {"x": np.arange(10.0)})
    f = tmp_path / "c" / man["arrays"][0]["file"]
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(ContainerError):
        read_container(tmp_path / "c")


def test_tampered_file_is_rejected(tmp_path):
    man = write_container(tmp_path / "c", {"x": np.arange(10.0)})
    f = tmp_path / "c" / man["arrays"][0]["file"]
    raw = bytearray(f.read_bytes())
    raw[0] ^= 1
    f.write_bytes(bytes(raw))
    with pytest.raises(ContainerError):
        read_container(tmp_path / "c")
    read_container(tmp_path / "c", verify=False)


def test_bad_manifest_and_dtype(tmp_path):
    with pytest.raises(ContainerError):
        read_container(tmp_path)
    write_container(tmp_path / "c", {"x": np.zeros(1)})
    mf = tmp_path / "c" / "manifest.json"
    d = json.loads(mf.read_text())
    d["schema_version"] = 99
    mf.write_text(json.dumps(d))
    with pytest.raises(ContainerError):
        read_container(tmp_path / "c")
    with pytest.raises(ContainerError):
        write_container(tmp_path / "d", {"z": np.zeros(2, dtype=np.complex128)})
    with pytest.raises(ValueError):
        write_container(tmp_path / "e", {"x": np.zeros(1)}, {"bad": float("nan")})


@settings(max_examples=25)
@given(arrays(st.sampled_from([np.float32, np.float64, np.int32]), st.tuples(st.integers(0, 4), st.integers(1, 3))))
def test_round_trip_property(tmp_path_factory, arr):
    d = tmp_path_factory.mktemp("p") / "c"
    write_container(d, {"v": arr})
    back, _ = read_container(d)
    np.testing.assert_array_equal(back["v"], arr)
    assert back["v"].shape == arr.shape
