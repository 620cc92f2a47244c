"""Container round-trips must be bit-exact; malformed files must be rejected."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dehaze.checkpoint import MAGIC, VERSION, FormatError, load_checkpoint, save_checkpoint


def _bundle(rng):
    return {
        "stem.weight": rng.normal(size=(3, 3, 3, 16)).astype(np.float32),
        "mamba.0.1.a_log": rng.normal(size=(32, 8)).astype(np.float32),
        "scalar": np.float32(2.5).reshape(()),
        "bias/unicode-β": rng.normal(size=(7,)).astype(np.float32),
    }


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    bundle = _bundle(rng)
    path = tmp_path / "model.tmda"
    save_checkpoint(path, bundle)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(bundle)  # order preserved
    for name, arr in bundle.items():
        assert loaded[name].dtype == np.float32
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(loaded[name], np.asarray(arr), equal_nan=True)
        assert loaded[name].tobytes() == np.ascontiguousarray(arr, "<f4").tobytes()


def test_save_twice_overwrites(tmp_path):
    path = tmp_path / "m.tmda"
    save_checkpoint(path, {"a": np.zeros(3, np.float32)})
    save_checkpoint(path, {"b": np.ones(2, np.float32)})
    assert list(load_checkpoint(path)) == ["b"]


def test_float64_input_stored_as_float32(tmp_path):
    path = tmp_path / "m.tmda"
    arr = np.array([0.1, 0.2, 1 / 3], dtype=np.float64)
    save_checkpoint(path, {"a": arr})
    out = load_checkpoint(path)["a"]
    assert np.array_equal(out, arr.astype(np.float32))


def test_zero_size_and_rank0(tmp_path):
    path = tmp_path / "m.tmda"
    bundle = {"empty": np.zeros((2, 0, 4), np.float32), "s": np.float32(-1.5).reshape(())}
    save_checkpoint(path, bundle)
    out = load_checkpoint(path)
    assert out["empty"].shape == (2, 0, 4)
    assert out["s"].shape == () and out["s"] == np.float32(-1.5)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    save_checkpoint(path, {"a": np.zeros(2, np.float32)})
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_version_mismatch_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    save_checkpoint(path, {"a": np.zeros(2, np.float32)}, version=VERSION + 9)
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)
    assert "a" in load_checkpoint(path, expect_version=None)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    save_checkpoint(path, {"a": np.arange(8, dtype=np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="overruns|truncated"):
        load_checkpoint(path)


def test_corrupt_name_length_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    save_checkpoint(path, {"a": np.zeros(2, np.float32)})
    raw = bytearray(path.read_bytes())
    struct.pack_into("<I", raw, 8, 0xFFFFFFFF)  # name_len of first record
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="overruns"):
        load_checkpoint(path)


def test_corrupt_dim_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    save_checkpoint(path, {"ab": np.zeros((2, 2), np.float32)})
    raw = bytearray(path.read_bytes())
    # header: 8 | name_len 4 | name 2 | rank 4 | dim0 at offset 18
    struct.pack_into("<I", raw, 18, 1 << 20)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="overruns"):
        load_checkpoint(path)


def test_duplicate_record_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    rec = struct.pack("<I", 1) + b"a" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.0)
    path.write_bytes(MAGIC + struct.pack("<I", VERSION) + rec + rec)
    with pytest.raises(FormatError, match="duplicate"):
        load_checkpoint(path)


def test_non_utf8_name_rejected(tmp_path):
    path = tmp_path / "m.tmda"
    rec = struct.pack("<I", 2) + b"\xff\xfe" + struct.pack("<II", 1, 1) + struct.pack("<f", 0.0)
    path.write_bytes(MAGIC + struct.pack("<I", VERSION) + rec)
    with pytest.raises(FormatError, match="UTF-8"):
        load_checkpoint(path)


@settings(deadline=None, max_examples=30)
@given(st.dictionaries(
    st.text(min_size=1, max_size=20),
    arrays(np.float32, st.tuples(st.integers(0, 4), st.integers(1, 5)),
           elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)),
    min_size=1, max_size=5))
def test_round_trip_property(tmp_path_factory, bundle):
    path = tmp_path_factory.mktemp("ckpt") / "m.tmda"
    save_checkpoint(path, bundle)
    out = load_checkpoint(path)
    assert list(out) == list(bundle)
    for k in bundle:
        assert np.array_equal(out[k], bundle[k])
