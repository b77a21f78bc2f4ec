"""8-bit PNG and binary PGM/PPM codecs.

Reading handles grayscale, RGB, palette and alpha variants (alpha is
dropped) at bit depth 8, non-interlaced. Writing always emits filter type 0
at a fixed zlib level, so equal pixels give equal bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"

_CHANNELS = {0: 1, 2: 3, 3: 1, 4: 2, 6: 4}


class ImageFormatError(ValueError):
    pass


def _chunk(kind: bytes, data: bytes) -> bytes:
    crc = zlib.crc32(kind + data) & 0xFFFFFFFF
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode an H×W, H×W×1 or H×W×3 uint8 array."""
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise ImageFormatError("PNG writer expects uint8 pixels")
    if px.ndim == 2:
        px = px[..., None]
    h, w, c = px.shape
    if c not in (1, 3):
        raise ImageFormatError(f"unsupported channel count {c}")
    color = 0 if c == 1 else 2
    header = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    raw = np.zeros((h, 1 + w * c), dtype=np.uint8)
    raw[:, 1:] = px.reshape(h, w * c)
    idat = zlib.compress(raw.tobytes(), 9)
    return PNG_SIGNATURE + _chunk(b"IHDR", header) + _chunk(b"IDAT", idat) + _chunk(b"IEND", b"")


def _paeth(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    a16, b16, c16 = a.astype(np.int16), b.astype(np.int16), c.astype(np.int16)
    p = a16 + b16 - c16
    pa, pb, pc = np.abs(p - a16), np.abs(p - b16), np.abs(p - c16)
    return np.where((pa <= pb) & (pa <= pc), a, np.where(pb <= pc, b, c))


def _unfilter(data: bytes, h: int, w: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    buf = np.frombuffer(data, dtype=np.uint8)
    if buf.size != h * (stride + 1):
        raise ImageFormatError("decompressed image data has the wrong length")
    rows = buf.reshape(h, stride + 1)
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:].copy()
        if ftype == 0:
            pass
        elif ftype == 1:
            # running sum per byte lane, wrapping mod 256
            line = np.cumsum(line.reshape(w, bpp), axis=0, dtype=np.uint8).reshape(-1)
        elif ftype == 2:
            line = line + prev
        elif ftype == 3:
            for x in range(w):
                lo = x * bpp
                left = line[lo - bpp:lo].astype(np.uint16) if x else np.zeros(bpp, np.uint16)
                avg = ((left + prev[lo:lo + bpp]) >> 1).astype(np.uint8)
                line[lo:lo + bpp] += avg
        elif ftype == 4:
            zero = np.zeros(bpp, np.uint8)
            for x in range(w):
                lo = x * bpp
                left = line[lo - bpp:lo] if x else zero
                upleft = prev[lo - bpp:lo] if x else zero
                line[lo:lo + bpp] += _paeth(left, prev[lo:lo + bpp], upleft).astype(np.uint8)
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype}")
        out[y] = line
        prev = line
    return out


def decode_png(blob: bytes) -> np.ndarray:
    """Decode to an H×W×C uint8 array with C in {1, 3}."""
    if not blob.startswith(PNG_SIGNATURE):
        raise ImageFormatError("not a PNG file")
    pos = len(PNG_SIGNATURE)
    header = None
    palette = None
    idat = []
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise ImageFormatError("truncated PNG chunk")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        kind = blob[pos + 4:pos + 8]
        data = blob[pos + 8:pos + 8 + length]
        if len(data) != length or pos + 12 + length > len(blob):
            raise ImageFormatError("truncated PNG chunk")
        (crc,) = struct.unpack(">I", blob[pos + 8 + length:pos + 12 + length])
        if zlib.crc32(kind + data) & 0xFFFFFFFF != crc:
            raise ImageFormatError(f"CRC mismatch in {kind!r} chunk")
        pos += 12 + length
        if kind == b"IHDR":
            header = struct.unpack(">IIBBBBB", data)
        elif kind == b"PLTE":
            palette = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3)
        elif kind == b"IDAT":
            idat.append(data)
        elif kind == b"IEND":
            break
    if header is None:
        raise ImageFormatError("missing IHDR")
    w, h, depth, color, _, _, interlace = header
    if depth != 8:
        raise ImageFormatError(f"only 8-bit PNGs are supported, got depth {depth}")
    if interlace:
        raise ImageFormatError("interlaced PNGs are not supported")
    if color not in _CHANNELS:
        raise ImageFormatError(f"unknown PNG color type {color}")
    c = _CHANNELS[color]
    px = _unfilter(zlib.decompress(b"".join(idat)), h, w, c).reshape(h, w, c)
    if color == 3:
        if palette is None:
            raise ImageFormatError("palette image without PLTE")
        px = palette[px[..., 0]]
    elif color == 4:
        px = px[..., :1]
    elif color == 6:
        px = px[..., :3]
    return np.ascontiguousarray(px)


def encode_pnm(pixels: np.ndarray) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim == 2:
        px = px[..., None]
    h, w, c = px.shape
    magic = {1: b"P5", 3: b"P6"}.get(c)
    if magic is None:
        raise ImageFormatError(f"unsupported channel count {c}")
    return magic + b"\n%d %d\n255\n" % (w, h) + px.tobytes()


def decode_pnm(blob: bytes) -> np.ndarray:
    magic = blob[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError("not a binary PGM/PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        fields.append(int(blob[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ImageFormatError("only maxval 255 is supported")
    c = 1 if magic == b"P5" else 3
    body = blob[pos:pos + w * h * c]
    if len(body) != w * h * c:
        raise ImageFormatError("truncated PNM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).copy()


def read_pixels(path) -> np.ndarray:
    """Read a PNG/PGM/PPM file into an H×W×C uint8 array."""
    blob = Path(path).read_bytes()
    if blob.startswith(PNG_SIGNATURE):
        return decode_png(blob)
    if blob[:2] in (b"P5", b"P6"):
        return decode_pnm(blob)
    raise ImageFormatError(f"{path}: unrecognised image format")


def write_pixels(path, pixels: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        blob = encode_pnm(pixels)
    else:
        blob = encode_png(pixels)
    path.write_bytes(blob)


def read_image(path) -> np.ndarray:
    """Read as float64 in [0, 1]."""
    return read_pixels(path).astype(np.float64) / 255.0


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    write_pixels(path, np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8))
