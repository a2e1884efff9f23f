import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from swdl import nifti
from swdl.errors import BadMagicError, HeaderError, ParseError, TruncatedError, UnsupportedDatatypeError
from swdl.volume import Volume


def test_roundtrip_random_float32(rng):
    data = rng.normal(size=(3, 4, 5)).astype(np.float32).astype(np.float64)
    v = Volume(data, (5.0, 0.5, 0.5))
    back = nifti.read_nifti(nifti.write_nifti(v))
    assert back.shape == v.shape
    assert back.spacing == (5.0, 0.5, 0.5)
    np.testing.assert_array_equal(back.data, data)


def test_single_voxel_size():
    buf = nifti.write_nifti(Volume(np.array([[[42.0]]]), (1, 1, 1)))
    assert len(buf) == 352 + 4
    assert buf[352:] == struct.pack("<f", 42.0)


def test_payload_matches_ieee_encoding(rng):
    data = rng.normal(size=(4, 4, 4)).astype(np.float32)
    buf = nifti.write_nifti(Volume(data.astype(np.float64), (1, 1, 1)))
    expect = b"".join(struct.pack("<f", float(v)) for v in data.ravel())
    assert buf[352:] == expect


def test_header_fields():
    buf = nifti.write_nifti(Volume(np.zeros((2, 3, 4)), (5.0, 0.5, 0.25)))
    hdr = nifti.read_header(buf)
    assert hdr["dims"] == (4, 3, 2)
    assert hdr["pixdim"] == (0.25, 0.5, 5.0)
    assert hdr["vox_offset"] == 352
    assert (hdr["scl_slope"], hdr["scl_inter"]) == (1.0, 0.0)
    assert buf[344:348] == b"n+1\x00"


def test_int16_scaling():
    raw = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    buf = nifti.encode_nifti(raw, (1, 1, 1), nifti.DT_INT16, slope=1.0, inter=-1024.0)
    np.testing.assert_array_equal(nifti.read_nifti(buf).data, raw.astype(np.float64) - 1024)


def test_zero_slope_means_unscaled():
    raw = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    buf = nifti.encode_nifti(raw, (1, 1, 1), nifti.DT_INT16, slope=0.0, inter=5.0)
    np.testing.assert_array_equal(nifti.read_nifti(buf).data, raw)


def test_big_endian(rng):
    data = rng.normal(size=(2, 3, 4)).astype(np.float32)
    buf = nifti.encode_nifti(data, (2, 1, 1), endian=">")
    v = nifti.read_nifti(buf)
    np.testing.assert_array_equal(v.data, data.astype(np.float64))
    assert v.spacing == (2.0, 1.0, 1.0)


def test_bad_magic():
    buf = bytearray(nifti.write_nifti(Volume(np.zeros((1, 1, 1)), (1, 1, 1))))
    buf[344:348] = b"ni1\x00"
    with pytest.raises(BadMagicError, match="unsupported magic"):
        nifti.read_nifti(bytes(buf))


def test_unsupported_datatype():
    buf = bytearray(nifti.write_nifti(Volume(np.zeros((1, 1, 1)), (1, 1, 1))))
    struct.pack_into("<2h", buf, 70, 64, 64)
    with pytest.raises(UnsupportedDatatypeError):
        nifti.read_nifti(bytes(buf))


def test_truncated_payload_and_header():
    buf = nifti.write_nifti(Volume(np.zeros((2, 2, 2)), (1, 1, 1)))
    with pytest.raises(TruncatedError):
        nifti.read_nifti(buf[:-1])
    with pytest.raises(TruncatedError):
        nifti.read_nifti(buf[:100])


@pytest.mark.parametrize("offset,fmt,value", [(0, "<i", 349), (40, "<h", 4), (42, "<h", 0),
                                               (80, "<f", 0.0), (108, "<f", 100.0)])
def test_malformed_header_fields(offset, fmt, value):
    buf = bytearray(nifti.write_nifti(Volume(np.zeros((2, 2, 2)), (1, 1, 1))))
    struct.pack_into(fmt, buf, offset, value)
    with pytest.raises(HeaderError):
        nifti.read_nifti(bytes(buf))


def test_errors_are_distinct_parse_errors():
    kinds = {BadMagicError, UnsupportedDatatypeError, TruncatedError, HeaderError}
    assert all(issubclass(k, ParseError) for k in kinds)
    assert len({k.kind for k in kinds}) == 4


@given(hnp.arrays(np.float32, st.tuples(*[st.integers(1, 6)] * 3),
                  elements=st.floats(-3e4, 3e4, width=32, allow_nan=False)),
       st.tuples(*[st.floats(0.125, 10.0, width=32)] * 3))
def test_roundtrip_property(data, spacing):
    v = Volume(data.astype(np.float64), spacing)
    back = nifti.read_nifti(nifti.write_nifti(v))
    np.testing.assert_array_equal(back.data, v.data)
    assert back.spacing == v.spacing and back.shape == v.shape


@given(st.binary(max_size=400))
def test_garbage_never_crashes(buf):
    try:
        v = nifti.read_nifti(buf)
    except ParseError:
        return
    assert np.all(np.isfinite(v.data))


@given(st.integers(0, 355), st.integers(0, 255))
def test_byte_corruption_yields_error_or_valid_volume(pos, byte):
    buf = bytearray(nifti.write_nifti(Volume(np.arange(8.0).reshape(2, 2, 2), (1, 1, 1))))
    buf[pos] = byte
    try:
        v = nifti.read_nifti(bytes(buf))
    except ParseError:
        return
    assert v.data.size == int(np.prod(v.shape)) and np.all(np.isfinite(v.data))
