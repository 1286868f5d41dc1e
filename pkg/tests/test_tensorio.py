import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from evpan.fusion import InstancePrediction
from evpan.grid import VOID, BBox
from evpan.tensorio import (
    FormatError,
    decode_tensor,
    encode_tensor,
    read_instance_set,
    read_tensor,
    write_instance_set,
    write_tensor,
)

DTYPES = [np.float32, np.float64, np.uint32, np.uint16, np.uint8]


class TestTensor:
    @pytest.mark.parametrize("dtype", DTYPES)
    @given(data=st.data())
    def test_round_trip_bitwise(self, dtype, data):
        a = data.draw(arrays(dtype, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5)))
        b = decode_tensor(encode_tensor(a))
        assert b.dtype == a.dtype and b.shape == a.shape
        assert b.tobytes() == a.tobytes()

    def test_header_layout(self):
        raw = encode_tensor(np.arange(6, dtype=np.uint16).reshape(2, 3))
        assert raw[:4] == b"UPST"
        assert struct.unpack_from("<HBBII", raw, 4) == (1, 3, 2, 2, 3)
        assert raw[16:] == bytes([0, 0, 1, 0, 2, 0, 3, 0, 4, 0, 5, 0])

    def test_nan_and_negative_zero(self):
        a = np.array([np.nan, -0.0, np.inf], dtype=np.float64)
        assert decode_tensor(encode_tensor(a)).tobytes() == a.tobytes()

    def test_void_sentinel(self, tmp_path):
        p = tmp_path / "g.upst"
        write_tensor(p, np.array([[0, VOID]], dtype=np.uint32))
        assert read_tensor(p)[0, 1] == VOID

    def test_big_endian_input(self):
        a = np.arange(4, dtype=">f8")
        np.testing.assert_array_equal(decode_tensor(encode_tensor(a)), a)

    def test_unsupported_dtype(self):
        with pytest.raises(ValueError):
            encode_tensor(np.zeros(3, dtype=np.int64))

    def test_bad_magic(self):
        raw = bytearray(encode_tensor(np.zeros(2)))
        raw[0:4] = b"NOPE"
        with pytest.raises(FormatError, match="magic"):
            decode_tensor(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(encode_tensor(np.zeros(2)))
        raw[4:6] = struct.pack("<H", 2)
        with pytest.raises(FormatError, match="version"):
            decode_tensor(bytes(raw))

    def test_bad_dtype_code(self):
        raw = bytearray(encode_tensor(np.zeros(2)))
        raw[6] = 9
        with pytest.raises(FormatError):
            decode_tensor(bytes(raw))

    @pytest.mark.parametrize("cut", [1, 5, 9, 20])
    def test_truncated(self, tmp_path, cut):
        p = tmp_path / "t.upst"
        raw = encode_tensor(np.ones((3, 3)))
        p.write_bytes(raw[:-cut] if cut < len(raw) else raw[:3])
        with pytest.raises(FormatError) as err:
            read_tensor(p)
        assert str(p) in str(err.value)

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_tensor(encode_tensor(np.ones(2)) + b"\0")


class TestInstanceSet:
    def test_round_trip(self, tmp_path, rng):
        insts = [
            InstancePrediction(BBox(0, 1, 5, 6), 3, 0.75, rng.normal(size=(28, 28))),
            InstancePrediction(BBox(2, 2, 8, 4), 4, 1.0, rng.normal(size=(28, 28))),
        ]
        path = tmp_path / "img.instances.json"
        write_instance_set(path, "img", 8, 10, insts)
        meta, back = read_instance_set(path)
        assert meta == {"image_id": "img", "height": 8, "width": 10}
        for a, b in zip(insts, back):
            assert (a.bbox, a.class_id, a.class_prob) == (b.bbox, b.class_id, b.class_prob)
            assert a.mask_logits.tobytes() == b.mask_logits.tobytes()

    def test_empty(self, tmp_path):
        path = tmp_path / "e.json"
        write_instance_set(path, "e", 4, 4, [])
        assert read_instance_set(path)[1] == []

    def test_bbox_outside_image(self, tmp_path):
        path = tmp_path / "b.json"
        write_instance_set(path, "b", 10, 10, [InstancePrediction(BBox(0, 0, 9, 9), 1, 0.9, np.zeros((28, 28)))])
        text = path.read_text().replace("9,\n", "12,\n", 1)
        path.write_text(text)
        with pytest.raises(FormatError):
            read_instance_set(path)

    def test_missing_mask_file(self, tmp_path):
        path = tmp_path / "m.json"
        write_instance_set(path, "m", 4, 4, [InstancePrediction(BBox(0, 0, 2, 2), 1, 0.9, np.zeros((28, 28)))])
        (tmp_path / "masks" / "m_0.upst").unlink()
        with pytest.raises(OSError):
            read_instance_set(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "x.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            read_instance_set(path)
