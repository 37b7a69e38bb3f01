import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import array_shapes, arrays

from angioflow.tensorfile import TensorFileError, decode, encode, load, save


def test_layout():
    buf = encode(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"F32T"
    assert struct.unpack_from("<HH2I", buf, 4) == (1, 2, 1, 3)
    assert np.frombuffer(buf[16:], "<f4").tolist() == [1.0, 2.0, 3.0]


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
def test_roundtrip(a):
    b = decode(encode(a))
    assert b.shape == a.shape and b.dtype == np.float32
    np.testing.assert_array_equal(b, a)


def test_float64_is_rounded_to_float32():
    x = np.array([0.1])
    assert decode(encode(x))[0] == np.float32(0.1)


@pytest.mark.parametrize("mutate, message", [
    (lambda b: b[:5], "header"),
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:10], "dimension"),
    (lambda b: b[:-1], "payload"),
    (lambda b: b + b"\0\0\0\0", "payload"),
])
def test_corruption_detected(mutate, message):
    with pytest.raises(TensorFileError, match=message):
        decode(mutate(encode(np.zeros((2, 3)))))


def test_save_load(tmp_path):
    path = tmp_path / "sub" / "a.f32t"
    save(path, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(load(path), np.arange(6.0).reshape(2, 3))
    assert [p.name for p in path.parent.iterdir()] == ["a.f32t"]


def test_load_error_names_file(tmp_path):
    path = tmp_path / "bad.f32t"
    path.write_bytes(b"nope")
    with pytest.raises(TensorFileError, match="bad.f32t"):
        load(path)
