"""NTA1 archive round trips and malformed-file handling."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffseg.checkpoint import (
    BadMagicError,
    CheckpointError,
    DuplicateNameError,
    ModelCheckpoint,
    TruncatedError,
    load_weights,
    save_weights,
)
from diffseg.rng import RngStream


def test_round_trip_bit_exact(tmp_path):
    rng = RngStream(1)
    tensors = {
        "a": rng.normal((2,)),
        "b.weight": rng.normal((3, 3)),
        "c.block.0": rng.normal((1, 4, 4, 4)),
    }
    meta = {"iteration": "250000", "ema": "true"}
    path = tmp_path / "w.nta"
    save_weights(tensors, meta, path)
    loaded, meta2 = load_weights(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == np.float32
        assert loaded[k].tobytes() == tensors[k].tobytes()


def test_scalar_and_empty_metadata(tmp_path):
    path = tmp_path / "w.nta"
    save_weights({"s": np.float32(4.25)}, {}, path)
    loaded, meta = load_weights(path)
    assert meta == {}
    assert loaded["s"].shape == ()
    assert loaded["s"] == np.float32(4.25)


def test_corrupted_magic_is_distinct_error(tmp_path):
    path = tmp_path / "w.nta"
    save_weights({"a": np.ones(3, dtype=np.float32)}, {}, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        load_weights(path)


def test_truncated_file_is_distinct_error(tmp_path):
    path = tmp_path / "w.nta"
    save_weights({"a": np.ones(8, dtype=np.float32)}, {"k": "v"}, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 5])
    with pytest.raises(TruncatedError):
        load_weights(path)


def test_duplicate_names_rejected_on_save_and_load(tmp_path):
    path = tmp_path / "w.nta"
    save_weights({"a": np.ones(1, dtype=np.float32)}, {}, path)
    raw = path.read_bytes()
    # append the single-tensor record again and bump the tensor count
    record = raw[12:]
    doctored = raw[:8] + (2).to_bytes(4, "little") + record + record
    path.write_bytes(doctored)
    with pytest.raises(DuplicateNameError):
        load_weights(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "w.nta"
    save_weights({"a": np.ones(1, dtype=np.float32)}, {}, path)
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CheckpointError):
        load_weights(path)


def test_float64_payload_saved_as_float32(tmp_path):
    path = tmp_path / "w.nta"
    value = np.array([1.0, 2.0, np.pi], dtype=np.float64)
    save_weights({"a": value}, {}, path)
    loaded, _ = load_weights(path)
    np.testing.assert_array_equal(loaded["a"], value.astype(np.float32))


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_round_trip_property(data, tmp_path_factory):
    names = data.draw(st.lists(
        st.text(min_size=1, max_size=24).filter(lambda s: "\x00" not in s),
        min_size=0, max_size=5, unique=True))
    shapes = [data.draw(st.lists(st.integers(0, 5), min_size=0, max_size=4))
              for _ in names]
    meta_keys = data.draw(st.lists(st.text(max_size=16), min_size=0, max_size=4, unique=True))
    meta = {k: data.draw(st.text(max_size=32)) for k in meta_keys}
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    tensors = {n: rng.normal(size=tuple(s)).astype(np.float32)
               for n, s in zip(names, shapes)}
    path = tmp_path_factory.mktemp("fuzz") / "w.nta"
    save_weights(tensors, meta, path)
    loaded, meta2 = load_weights(path)
    assert meta2 == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].shape == tensors[k].shape
        assert loaded[k].tobytes() == tensors[k].tobytes()


def test_model_checkpoint_wrapper(tmp_path):
    ck = ModelCheckpoint({"x": np.arange(6, dtype=np.float32).reshape(2, 3)}, {"tag": "demo"})
    path = tmp_path / "m.nta"
    ck.save(path)
    back = ModelCheckpoint.load(path)
    assert back.meta == {"tag": "demo"}
    np.testing.assert_array_equal(back.tensors["x"], ck.tensors["x"])
