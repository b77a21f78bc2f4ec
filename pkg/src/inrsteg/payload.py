"""Byte payload <-> message bit framing.

Frame: u32 big-endian length | payload | u32 CRC32 of payload, then
pseudo-random padding bits from ``Rng(pad_seed)`` up to capacity. Bits are
taken MSB first and laid out row-major over the H×W×D message grid.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .ndtensor import Rng

FRAME_OVERHEAD = 8  # bytes: length prefix + CRC


class CapacityError(ValueError):
    pass


class ChecksumError(ValueError):
    pass


def max_payload_bytes(height: int, width: int, bpp: int) -> int:
    return max(0, height * width * bpp // 8 - FRAME_OVERHEAD)


def encode(payload: bytes, height: int, width: int, bpp: int, pad_seed: int = 0) -> np.ndarray:
    """Frame ``payload`` into an H×W×D uint8 bit array."""
    cap_bits = height * width * bpp
    frame = struct.pack(">I", len(payload)) + payload + struct.pack(">I", zlib.crc32(payload))
    if 8 * len(frame) > cap_bits:
        raise CapacityError(
            f"payload of {len(payload)} bytes needs {8 * len(frame)} bits with framing; "
            f"capacity at {height}x{width}x{bpp} is {cap_bits} bits "
            f"({max_payload_bytes(height, width, bpp)} payload bytes)"
        )
    bits = np.unpackbits(np.frombuffer(frame, dtype=np.uint8))
    pad = Rng(pad_seed).bits(cap_bits - bits.size)
    return np.concatenate([bits, pad]).reshape(height, width, bpp)


def decode(bits: np.ndarray) -> bytes:
    """Recover the payload; raises ChecksumError if the frame is damaged."""
    flat = np.asarray(bits, dtype=np.uint8).reshape(-1)
    raw = np.packbits(flat[: flat.size - flat.size % 8]).tobytes()
    if len(raw) < FRAME_OVERHEAD:
        raise ChecksumError("message too short to hold a frame")
    (n,) = struct.unpack(">I", raw[:4])
    if n > len(raw) - FRAME_OVERHEAD:
        raise ChecksumError(f"length prefix {n} exceeds the message")
    body = raw[4:4 + n]
    (crc,) = struct.unpack(">I", raw[4 + n:8 + n])
    if zlib.crc32(body) != crc:
        raise ChecksumError("payload CRC mismatch")
    return body


def raw_bytes(bits: np.ndarray) -> bytes:
    """All message bits packed into bytes, no unframing."""
    flat = np.asarray(bits, dtype=np.uint8).reshape(-1)
    return np.packbits(flat).tobytes()
