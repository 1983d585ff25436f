"""Little-endian container files.

Every binary container is ``header | payload | crc32`` where the header is
``magic(4) version(u32) height(u32) width(u32) tag(u32)``, dimensions are in
pixels (multiples of 8), and the CRC32 covers header and payload.  Coefficient
arrays are stored in raster block order with row-major modes, i.e. the
``(blocks_h, blocks_w, 8, 8)`` layout in C order.

* QDCT v1: 64 x u16 quantization table, then i16 coefficients.
* COST v1: f32 symmetric cost per coefficient (>= 1e10 means wet).
* CHG_ v1: i8 changes, then f32 latents.
* CORR: JSON text (see :class:`CorrelationModel`) with ``magic``/``version`` keys.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .costmap import CostMap
from .covmodel import CorrelationModel, ModelFormatError
from .devpipe import QuantizedDctImage

VERSION = 1
HEADER = struct.Struct("<4sIIII")
TAGS = {b"QDCT": 1, b"COST": 2, b"CHG_": 3}


_UMASK = os.umask(0)
os.umask(_UMASK)


class FormatError(ValueError):
    pass


def atomic_write(path, data: bytes | str):
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_UMASK)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(magic, height, width, payload: bytes) -> bytes:
    if height % 8 or width % 8 or height <= 0 or width <= 0:
        raise FormatError(f"dimensions {height}x{width} are not positive multiples of 8")
    body = HEADER.pack(magic, VERSION, height, width, TAGS[magic]) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def _unpack(data: bytes, magic, name="<bytes>"):
    if len(data) < HEADER.size + 4:
        raise FormatError(f"{name}: truncated ({len(data)} bytes)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    got_magic, version, height, width, tag = HEADER.unpack(body[:HEADER.size])
    if got_magic != magic:
        raise FormatError(f"{name}: magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if tag != TAGS[magic]:
        raise FormatError(f"{name}: payload tag {tag} does not match {magic!r}")
    if zlib.crc32(body) != crc:
        raise FormatError(f"{name}: checksum mismatch")
    if height % 8 or width % 8 or height == 0 or width == 0:
        raise FormatError(f"{name}: dimensions {height}x{width} are not positive multiples of 8")
    return height, width, body[HEADER.size:]


def _take(buf, dtype, count, name, what):
    n = np.dtype(dtype).itemsize * count
    if len(buf) < n:
        raise FormatError(f"{name}: {what} needs {n} bytes, {len(buf)} left")
    return np.frombuffer(buf[:n], dtype=dtype).copy(), buf[n:]


def _read(path_or_bytes):
    if isinstance(path_or_bytes, (bytes, bytearray)):
        return bytes(path_or_bytes), "<bytes>"
    p = Path(path_or_bytes)
    return p.read_bytes(), str(p)


# -------------------------------------------------------------------- QDCT


def qdct_bytes(img: QuantizedDctImage) -> bytes:
    payload = img.qtable.astype("<u2").tobytes() + img.coefficients.astype("<i2").tobytes()
    return _pack(b"QDCT", img.height, img.width, payload)


def parse_qdct(data, name="<bytes>") -> QuantizedDctImage:
    h, w, buf = _unpack(data, b"QDCT", name)
    q, buf = _take(buf, "<u2", 64, name, "quantization table")
    c, buf = _take(buf, "<i2", h * w, name, "coefficients")
    if buf:
        raise FormatError(f"{name}: {len(buf)} trailing bytes")
    if np.any(q < 1):
        raise FormatError(f"{name}: quantization step < 1")
    return QuantizedDctImage(c.astype(np.int16).reshape(h // 8, w // 8, 8, 8), q.reshape(8, 8))


def write_qdct(path, img: QuantizedDctImage):
    atomic_write(path, qdct_bytes(img))


def read_qdct(src) -> QuantizedDctImage:
    return parse_qdct(*_read(src))


# -------------------------------------------------------------------- COST


def cost_bytes(costs: CostMap) -> bytes:
    bh, bw = costs.rho.shape[:2]
    return _pack(b"COST", 8 * bh, 8 * bw, costs.rho.astype("<f4").tobytes())


def parse_cost(data, name="<bytes>", dims=None) -> CostMap:
    h, w, buf = _unpack(data, b"COST", name)
    if dims is not None and tuple(dims) != (h, w):
        raise FormatError(f"{name}: cost map is {h}x{w}, expected {dims[0]}x{dims[1]}")
    if len(buf) != 4 * h * w:
        raise FormatError(f"{name}: expected {h * w} costs, payload holds {len(buf) / 4:g}")
    rho = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(h // 8, w // 8, 8, 8)
    try:
        return CostMap(rho)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def write_cost(path, costs: CostMap):
    atomic_write(path, cost_bytes(costs))


def read_cost(src, dims=None) -> CostMap:
    data, name = _read(src)
    return parse_cost(data, name, dims)


# -------------------------------------------------------------------- CHG_


def _fit_f32(latents, changes, q):
    """Cast latents to f32 and nudge any value the rounding pushed out of its bin."""
    lat = latents.astype(np.float32)
    if q is None:
        return lat
    half = (0.5 * np.broadcast_to(np.asarray(q, dtype=np.float64), latents.shape)).astype(np.float32)
    lo, hi = -half, half
    lat = np.where((changes == -1) & (lat > lo), lo, lat)
    lat = np.where((changes == 0) & (lat <= lo), np.nextafter(lo, np.float32(np.inf)), lat)
    lat = np.where((changes == 0) & (lat > hi), hi, lat)
    lat = np.where((changes == 1) & (lat <= hi), np.nextafter(hi, np.float32(np.inf)), lat)
    return lat.astype(np.float32)


def chg_bytes(changes, latents, q=None) -> bytes:
    changes = np.asarray(changes)
    bh, bw = changes.shape[:2]
    lat = _fit_f32(np.asarray(latents, dtype=np.float64), changes, q)
    return _pack(b"CHG_", 8 * bh, 8 * bw, changes.astype("<i1").tobytes() + lat.astype("<f4").tobytes())


def parse_chg(data, name="<bytes>"):
    h, w, buf = _unpack(data, b"CHG_", name)
    n = h * w
    c, buf = _take(buf, "<i1", n, name, "changes")
    lat, buf = _take(buf, "<f4", n, name, "latents")
    if buf:
        raise FormatError(f"{name}: {len(buf)} trailing bytes")
    if np.any(np.abs(c) > 1):
        raise FormatError(f"{name}: change outside {{-1, 0, 1}}")
    shape = (h // 8, w // 8, 8, 8)
    return c.astype(np.int8).reshape(shape), lat.astype(np.float32).reshape(shape)


def write_chg(path, changes, latents, q=None):
    atomic_write(path, chg_bytes(changes, latents, q))


def read_chg(src):
    return parse_chg(*_read(src))


# -------------------------------------------------------------------- CORR


def corr_text(model: CorrelationModel) -> str:
    d = {"magic": "CORR", "version": VERSION}
    d.update(model.to_dict())
    return json.dumps(d, indent=1) + "\n"


def parse_corr(text, name="<text>") -> CorrelationModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{name}: not valid JSON ({exc})") from exc
    if not isinstance(d, dict) or d.get("magic") != "CORR":
        raise FormatError(f"{name}: missing CORR magic")
    if d.get("version") != VERSION:
        raise FormatError(f"{name}: unsupported version {d.get('version')!r}")
    try:
        return CorrelationModel.from_dict(d)
    except ModelFormatError as exc:
        raise FormatError(f"{name}: {exc}") from exc


def write_corr(path, model: CorrelationModel):
    atomic_write(path, corr_text(model))


def read_corr(path) -> CorrelationModel:
    return parse_corr(Path(path).read_text(), str(path))
