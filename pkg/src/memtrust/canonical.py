"""Canonical JSON and length-prefixed framing.

Hashes and signatures are computed over canonical bytes, so the encoding
must be reproducible across languages: sorted keys, no insignificant
whitespace, UTF-8.
"""

from __future__ import annotations

import json
import struct
from typing import Any, BinaryIO

MAX_FRAME = 16 * 1024 * 1024


def canonical_json(obj: Any) -> bytes:
    return json.dumps(
        obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
    ).encode("utf-8")


def encode_frame(obj: Any) -> bytes:
    body = canonical_json(obj)
    if len(body) > MAX_FRAME:
        raise ValueError(f"frame body {len(body)} exceeds {MAX_FRAME} bytes")
    return struct.pack(">I", len(body)) + body


def read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise EOFError("stream closed mid-frame")
        buf += chunk
    return buf


def read_frame(stream: BinaryIO) -> Any:
    header = read_exact(stream, 4)
    (length,) = struct.unpack(">I", header)
    if length > MAX_FRAME:
        raise ValueError(f"declared frame length {length} exceeds {MAX_FRAME}")
    body = read_exact(stream, length)
    return json.loads(body.decode("utf-8"))
