"""Binary framing shared by snapshots, memory checkpoints and parameter files.

Layout (little-endian)::

    [u16 version][u32 payload length][payload][u32 CRC32 of payload]
"""

from __future__ import annotations

import struct
import zlib

FORMAT_VERSION = 1

_HEADER = struct.Struct("<HI")
_TRAILER = struct.Struct("<I")


class FramingError(ValueError):
    """Raised when a framed buffer fails to decode."""


def frame(payload: bytes, version: int = FORMAT_VERSION) -> bytes:
    payload = bytes(payload)
    return (
        _HEADER.pack(version, len(payload))
        + payload
        + _TRAILER.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    )


def unframe(buf: bytes, version: int = FORMAT_VERSION) -> bytes:
    """Return the payload of ``buf`` after checking version, length and CRC."""
    if len(buf) < _HEADER.size + _TRAILER.size:
        raise FramingError(f"buffer too short ({len(buf)} bytes)")
    got_version, length = _HEADER.unpack_from(buf, 0)
    if got_version != version:
        raise FramingError(f"unsupported version {got_version} (expected {version})")
    end = _HEADER.size + length
    if len(buf) != end + _TRAILER.size:
        raise FramingError(
            f"length mismatch: header says {length}, buffer holds {len(buf) - _HEADER.size - _TRAILER.size}"
        )
    payload = bytes(buf[_HEADER.size:end])
    (crc,) = _TRAILER.unpack_from(buf, end)
    if crc != zlib.crc32(payload) & 0xFFFFFFFF:
        raise FramingError("checksum mismatch")
    return payload
