"""Writer for the VPRT token-file wire format.

Layout (little-endian, fixed by the descriptor engine that consumes it):

    magic   4 bytes  b"VPRT"
    version u16      1
    source  u8       0 = DINO-side, 1 = CLIP-side, 2 = fused
    h       u16      token grid height
    w       u16      token grid width
    dim     u16      channels per token
    payload h*w*dim  float32, row-major
    crc     u32      CRC-32 of the payload bytes
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"VPRT"
VERSION = 1
SOURCE_DINO = 0
SOURCE_CLIP = 1
_HEADER = struct.Struct("<4sHBHHH")


def write_token_file(path: str | Path, tokens: np.ndarray, source: int, grid: tuple[int, int]) -> None:
    h, w = grid
    tokens = np.ascontiguousarray(tokens, dtype="<f4")
    if tokens.ndim != 2 or tokens.shape[0] != h * w:
        raise ValueError(f"token matrix {tokens.shape} inconsistent with grid {grid}")
    if not np.isfinite(tokens).all():
        raise ValueError("refusing to write non-finite tokens")
    payload = tokens.tobytes()
    header = _HEADER.pack(MAGIC, VERSION, source, h, w, tokens.shape[1])
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))
