"""The stdio request/response loop.

Wire format (little-endian):
    request:  magic b"CLRQ", u32 width, u32 height,
              width*height float32 luminance in [0, 1], row-major.
    response: magic b"CLRA", u32 width, u32 height (echoed),
              width*height float32 (a, b) pairs in [-128, 128], row-major.

One response per request, flushed immediately.  Clean end-of-input before a
request starts exits 0; a bad magic or a truncated request is fatal.
"""

from __future__ import annotations

import struct
import sys

import numpy as np

__all__ = ["ProtocolError", "serve_loop"]

REQUEST_MAGIC = b"CLRQ"
RESPONSE_MAGIC = b"CLRA"
MAX_SIDE = 1 << 16  # refuse absurd dimensions instead of allocating


class ProtocolError(RuntimeError):
    """Malformed request stream."""


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            raise ProtocolError(f"stream truncated: wanted {n} bytes, got {len(buf)}")
        buf.extend(chunk)
    return bytes(buf)


def serve_loop(backend, stdin=None, stdout=None) -> None:
    """Answer requests until the input closes.

    ``backend`` maps (H, W) luminance to (H, W, 2) ab.  Raises
    ProtocolError on malformed input; the caller turns that into a nonzero
    exit.
    """
    inp = stdin if stdin is not None else sys.stdin.buffer
    out = stdout if stdout is not None else sys.stdout.buffer
    while True:
        magic = inp.read(4)
        if magic == b"" or magic is None:
            return  # clean end of input
        if len(magic) < 4:
            raise ProtocolError("stream truncated inside the request magic")
        if magic != REQUEST_MAGIC:
            raise ProtocolError(f"bad request magic {magic!r}")
        w, h = struct.unpack("<II", _read_exact(inp, 8))
        if not (0 < w <= MAX_SIDE and 0 < h <= MAX_SIDE):
            raise ProtocolError(f"unreasonable request dimensions {w}x{h}")
        payload = _read_exact(inp, w * h * 4)
        lum = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(h, w)
        ab = np.asarray(backend(lum), dtype=np.float64)
        if ab.shape != (h, w, 2):
            raise ProtocolError(f"backend produced shape {ab.shape}")
        out.write(RESPONSE_MAGIC)
        out.write(struct.pack("<II", w, h))
        out.write(np.clip(ab, -128.0, 128.0).astype("<f4").tobytes())
        out.flush()
