"""Checkpoint image file format.

Layout (all integers little-endian)::

    magic      8 bytes  b"MANAKIN1"
    version    u32
    epoch      u32
    world size u32
    rank       u32
    7 x { length u32, body }   in SECTIONS order
    crc32      u32          over every preceding byte

Section bodies are canonical JSON; byte strings are written as ``{"$b": hex}``
and dictionary keys that start with ``$`` are escaped with a second ``$``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorruptImage, IncompatibleImage

MAGIC = b"MANAKIN1"
VERSION = 1
SECTIONS = ("app-state", "vtables", "counters", "p2p-list", "replay-log", "active-comms", "drained-buffers")
_HEADER = struct.Struct("<8sIIII")


def _wrap(o):
    """Plain JSON tree for ``o``: bytes become ``{"$b": hex}``, keys starting
    with ``$`` get one more ``$`` so they can never be mistaken for a marker."""
    if isinstance(o, (bytes, bytearray)):
        return {"$b": bytes(o).hex()}
    if isinstance(o, dict):
        out = {}
        for k, v in o.items():
            if not isinstance(k, str):
                raise TypeError(f"section keys must be strings, got {k!r}")
            out["$" + k if k.startswith("$") else k] = _wrap(v)
        return out
    if isinstance(o, (list, tuple)):
        return [_wrap(v) for v in o]
    if isinstance(o, (bool, int, float, str)) or o is None:
        return o
    if hasattr(o, "item"):  # numpy scalars
        return o.item()
    raise TypeError(f"cannot encode {type(o).__name__}")


def _hook(d):
    if len(d) == 1 and "$b" in d:
        return bytes.fromhex(d["$b"])
    return {k[1:] if k.startswith("$") else k: v for k, v in d.items()}


def encode_obj(obj) -> bytes:
    return json.dumps(_wrap(obj), sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def decode_obj(data: bytes):
    return json.loads(data.decode(), object_hook=_hook)


@dataclass
class CheckpointImage:
    rank: int
    world_size: int
    epoch: int
    sections: dict = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        out = bytearray(_HEADER.pack(MAGIC, self.version, self.epoch, self.world_size, self.rank))
        for name in SECTIONS:
            body = encode_obj(self.sections.get(name))
            out += struct.pack("<I", len(body))
            out += body
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes, expect_version: int = VERSION) -> "CheckpointImage":
        raw = read_sections(data, expect_version)
        header = raw.pop("__header__")
        try:
            sections = {name: decode_obj(body) for name, body in raw.items()}
        except (ValueError, UnicodeDecodeError) as exc:
            raise CorruptImage(f"undecodable section: {exc}") from None
        return cls(header["rank"], header["world_size"], header["epoch"], sections, header["version"])


def read_sections(data: bytes, expect_version: int | None = VERSION) -> dict:
    """Validate framing and CRC; return raw section bodies plus the header."""
    if len(data) < _HEADER.size + 4:
        raise CorruptImage("image shorter than its header")
    magic, version, epoch, world, rank = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptImage(f"bad magic {magic!r}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise CorruptImage("CRC mismatch")
    if expect_version is not None and version != expect_version:
        raise IncompatibleImage(f"image format version {version}, expected {expect_version}")
    pos = _HEADER.size
    end = len(data) - 4
    out = {"__header__": {"version": version, "epoch": epoch, "world_size": world, "rank": rank}}
    for name in SECTIONS:
        if pos + 4 > end:
            raise CorruptImage(f"truncated before section {name!r}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > end:
            raise CorruptImage(f"section {name!r} truncated")
        out[name] = data[pos:pos + n]
        pos += n
    if pos != end:
        raise CorruptImage(f"{end - pos} trailing bytes after last section")
    return out


def inspect_image(data: bytes) -> dict:
    raw = read_sections(data, expect_version=None)
    header = raw.pop("__header__")
    return {**header, "sections": {k: len(v) for k, v in raw.items()}, "crc": "OK"}


def image_path(ckpt_dir, round_no: int, rank: int) -> Path:
    return Path(ckpt_dir) / f"round_{round_no}" / f"rank_{rank}.img"


def write_image_set(ckpt_dir, round_no: int, blobs: dict[int, bytes]) -> Path:
    """Write a whole round or nothing: files land in a temp dir that is renamed."""
    final = Path(ckpt_dir) / f"round_{round_no}"
    tmp = Path(ckpt_dir) / f".round_{round_no}.tmp"
    tmp.mkdir(parents=True, exist_ok=True)
    for rank, blob in blobs.items():
        (tmp / f"rank_{rank}.img").write_bytes(blob)
    if final.exists():
        for f in final.iterdir():
            f.unlink()
        final.rmdir()
    os.replace(tmp, final)
    return final


def read_image_set(ckpt_dir, round_no: int) -> dict[int, bytes]:
    d = Path(ckpt_dir) / f"round_{round_no}"
    out = {}
    for f in sorted(d.glob("rank_*.img")):
        out[int(f.stem.split("_")[1])] = f.read_bytes()
    return out
