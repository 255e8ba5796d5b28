import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gma import gmat
from gma.errors import FormatError


def test_header_layout():
    raw = gmat.tensor_to_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert raw[:4] == b"GMAT"
    assert raw[4:7] == bytes([1, 1, 2])
    assert struct.unpack("<2Q", raw[7:23]) == (1, 3)
    assert np.frombuffer(raw[23:], dtype="<f8").tolist() == [1.0, 2.0, 3.0]


def test_scalar_has_rank_zero():
    raw = gmat.tensor_to_bytes(np.float64(2.5))
    assert raw[6] == 0 and len(raw) == 7 + 8
    assert gmat.tensor_from_bytes(raw).shape == ()


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bit_exact(arr):
    back = gmat.tensor_from_bytes(gmat.tensor_to_bytes(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr, dtype="<f8").tobytes()


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(1).normal(size=(3, 4, 2))
    gmat.write_tensor(tmp_path / "x.gmat", arr)
    assert np.array_equal(gmat.read_tensor(tmp_path / "x.gmat"), arr)


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b"XMAT" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x02" + b[5:], "version"),
    (lambda b: b[:5] + b"\x07" + b[6:], "dtype"),
    (lambda b: b[:-1], "truncated"),
    (lambda b: b + b"\x00", "trailing"),
])
def test_corrupt_tensor_rejected(mutate, message):
    raw = gmat.tensor_to_bytes(np.ones((2, 2)))
    with pytest.raises(FormatError, match=message):
        gmat.tensor_from_bytes(mutate(raw))


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        gmat.read_tensor(tmp_path / "absent.gmat")


def test_checkpoint_round_trip_sorted_and_exact(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"b.w": rng.normal(size=(2, 3)), "a.bias": rng.normal(size=(3,)), "z": np.float64(1.0)}
    raw = gmat.checkpoint_to_bytes(tensors)
    assert raw == gmat.checkpoint_to_bytes(dict(reversed(list(tensors.items()))))
    gmat.save_checkpoint(tmp_path / "m.gmck", tensors)
    back = gmat.load_checkpoint(tmp_path / "m.gmck")
    assert list(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].tobytes() == np.asarray(v).tobytes()


def test_checkpoint_truncation_rejected():
    raw = gmat.checkpoint_to_bytes({"w": np.ones(4)})
    with pytest.raises(FormatError):
        gmat.checkpoint_from_bytes(raw[:-3])
    with pytest.raises(FormatError, match="magic"):
        gmat.checkpoint_from_bytes(b"GMAT" + raw[4:])
