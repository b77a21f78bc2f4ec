"""Binary checkpoint for a trained hypernetwork (and its discriminator).

Layout, all little-endian::

    b"GINR" | u16 version | u16 n_sections
    n_sections × (u16 name_len, name, u8 dtype, u8 ndim, u32 dims..., u64 offset, u64 nbytes)
    payload (offsets are relative to the payload start)
    u32 CRC32 of everything above

Arrays are stored as float32; the ``meta`` section is UTF-8 JSON stored as
u8. Loading upcasts to float64, so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fungen import DISC_KEYS, HYPER_KEYS, GaspConfig
from .inr import InrArch

MAGIC = b"GINR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    arch: InrArch
    hyper: dict
    disc: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)  # cfg, step, seed, ...


def _sections(ckpt: Checkpoint) -> list:
    meta = dict(ckpt.meta)
    meta["arch"] = asdict(ckpt.arch)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out = [("meta", np.frombuffer(blob, dtype=np.uint8))]
    for k in HYPER_KEYS:
        out.append(("hyper." + k, np.asarray(ckpt.hyper[k], dtype="<f4")))
    for k in DISC_KEYS:
        if k in ckpt.disc:
            out.append(("disc." + k, np.asarray(ckpt.disc[k], dtype="<f4")))
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    secs = _sections(ckpt)
    table = bytearray()
    payload = bytearray()
    for name, arr in secs:
        raw = np.ascontiguousarray(arr).tobytes()
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", len(payload), len(raw))
        payload += raw
    body = MAGIC + struct.pack("<HH", VERSION, len(secs)) + bytes(table) + bytes(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads(blob: bytes) -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a GINR checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, n = struct.unpack_from("<HH", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    entries = []
    try:
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + ln].decode()
            pos += 2 + ln
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", body, pos)
            pos += 4 * ndim
            off, nbytes = struct.unpack_from("<QQ", body, pos)
            pos += 16
            entries.append((name, _DTYPES[code], shape, off, nbytes))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed section table: {exc}") from exc
    arrays = {}
    for name, dt, shape, off, nbytes in entries:
        raw = body[pos + off:pos + off + nbytes]
        if len(raw) != nbytes or nbytes != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"section {name!r} has the wrong size")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape)
    if "meta" not in arrays:
        raise CheckpointError("checkpoint has no meta section")
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    arch = InrArch(**meta.pop("arch"))
    hyper, disc = {}, {}
    for name, arr in arrays.items():
        group, _, key = name.partition(".")
        target = {"hyper": hyper, "disc": disc}.get(group)
        if target is None:
            raise CheckpointError(f"unknown section {name!r}")
        target[key] = arr.astype(np.float64)
    missing = set(HYPER_KEYS) - hyper.keys()
    if missing:
        raise CheckpointError(f"checkpoint lacks hypernetwork arrays {sorted(missing)}")
    return Checkpoint(arch, hyper, disc, meta)


def save(path, ckpt: Checkpoint) -> bytes:
    blob = dumps(ckpt)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def crc_of(path) -> int:
    (crc,) = struct.unpack("<I", Path(path).read_bytes()[-4:])
    return crc


def from_state(state, seed: int) -> Checkpoint:
    """Snapshot a :class:`~inrsteg.fungen.GaspState`."""
    meta = {"seed": int(seed), "step": int(state.step), "cfg": asdict(state.cfg)}
    return Checkpoint(state.arch, dict(state.hyper), dict(state.disc), meta)


def config_of(ckpt: Checkpoint) -> GaspConfig:
    return GaspConfig(**ckpt.meta.get("cfg", {}))
