import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from syncstego import covmodel, devpipe, formats
from syncstego.costmap import CostMap
from syncstego.formats import FormatError


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.data())
def test_qdct_roundtrip(bh, bw, data):
    coeffs = data.draw(arrays(np.int16, (bh, bw, 8, 8)))
    q = data.draw(arrays(np.uint16, (8, 8), elements=st.integers(1, 65535)))
    img = devpipe.QuantizedDctImage(coeffs, q)
    back = formats.parse_qdct(formats.qdct_bytes(img))
    np.testing.assert_array_equal(back.coefficients, coeffs)
    np.testing.assert_array_equal(back.qtable, q)


def test_qdct_layout_is_little_endian_raster():
    c = np.zeros((1, 2, 8, 8), dtype=np.int16)
    c[0, 1, 0, 1] = -2
    data = formats.qdct_bytes(devpipe.QuantizedDctImage(c, np.full((8, 8), 3)))
    magic, ver, h, w, tag = struct.unpack("<4sIIII", data[:20])
    assert (magic, ver, h, w) == (b"QDCT", 1, 8, 16)
    assert struct.unpack("<H", data[20:22])[0] == 3
    coeff = np.frombuffer(data[20 + 128:-4], dtype="<i2")
    assert coeff[64 + 1] == -2
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_cost_roundtrip():
    rho = np.random.default_rng(0).uniform(0, 10, (2, 3, 8, 8)).astype(np.float32).astype(float)
    rho[0, 0, 0, 0] = 1e10
    back = formats.parse_cost(formats.cost_bytes(CostMap(rho)))
    np.testing.assert_array_equal(back.rho, rho)
    assert back.wet[0, 0, 0, 0]


def test_chg_roundtrip_keeps_bins():
    rng = np.random.default_rng(1)
    ch = rng.integers(-1, 2, (2, 2, 8, 8)).astype(np.int8)
    q = 1.0
    # values right at the bin edges, which a float32 cast can move across
    lat = np.where(ch == -1, -0.5 - 1e-12, np.where(ch == 1, 0.5 + 1e-12, 0.5 - 1e-12))
    lat[ch == 0] *= rng.choice([-1, 1], (ch == 0).sum())
    lat[ch == 0] = np.where(lat[ch == 0] < 0, -0.5 + 1e-12, lat[ch == 0])
    c2, l2 = formats.parse_chg(formats.chg_bytes(ch, lat, q))
    np.testing.assert_array_equal(c2, ch)
    l2 = l2.astype(float)
    assert np.all(np.where(ch == -1, l2 <= -0.5, np.where(ch == 1, l2 > 0.5, (l2 > -0.5) & (l2 <= 0.5))))


def test_corr_roundtrip(tmp_path):
    m = covmodel.CorrelationModel(0.05, {((0, 1), (0, 1), (0, 2)): 0.3, ((0, 0), (1, 1), (2, 2)): -0.1})
    p = tmp_path / "m.corr"
    formats.write_corr(p, m)
    back = formats.read_corr(p)
    assert back.entries() == m.entries()


@pytest.mark.parametrize("mutate,msg", [
    (lambda d: d[:-1], "checksum"),
    (lambda d: d[:10], "truncated"),
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:30] + bytes([d[30] ^ 1]) + d[31:], "checksum"),
])
def test_qdct_corruption(mutate, msg):
    data = formats.qdct_bytes(devpipe.make_cover(16, seed=0))
    with pytest.raises(FormatError, match=msg):
        formats.parse_qdct(mutate(data))


def test_wrong_container_kind():
    data = formats.cost_bytes(CostMap(np.ones((1, 1, 8, 8))))
    with pytest.raises(FormatError, match="magic"):
        formats.parse_qdct(data)


def test_bad_dimensions_rejected():
    body = struct.pack("<4sIIII", b"COST", 1, 12, 8, 2) + b"\0" * (4 * 96)
    with pytest.raises(FormatError, match="multiples of 8"):
        formats.parse_cost(body + struct.pack("<I", zlib.crc32(body)))


def test_negative_cost_rejected():
    body = struct.pack("<4sIIII", b"COST", 1, 8, 8, 2) + np.full(64, -1.0, dtype="<f4").tobytes()
    with pytest.raises(FormatError, match="negative"):
        formats.parse_cost(body + struct.pack("<I", zlib.crc32(body)))


def test_corr_requires_magic(tmp_path):
    p = tmp_path / "m.corr"
    p.write_text('{"threshold": 0.05, "entries": []}')
    with pytest.raises(FormatError, match="magic"):
        formats.read_corr(p)


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "x.bin"
    formats.atomic_write(p, b"abc")
    formats.atomic_write(p, b"def")
    assert p.read_bytes() == b"def"
    assert [f.name for f in tmp_path.iterdir()] == ["x.bin"]
