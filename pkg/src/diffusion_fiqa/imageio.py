"""8-bit binary PGM (P5) and PPM (P6) images in the canonical [-1, 1] range."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError

_CHANNELS = {b"P5": 1, b"P6": 3}
_WHITESPACE = b" \t\n\r\v\f"


def to_canonical(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) * np.float32(2.0 / 255.0) - np.float32(1.0)).astype(np.float32)


def to_bytes(x: np.ndarray) -> np.ndarray:
    """[-1, 1] -> 0..255 with round-half-up; out-of-range values saturate."""
    v = (np.asarray(x, dtype=np.float64) + 1.0) * 127.5
    return np.clip(np.floor(v + 0.5), 0, 255).astype(np.uint8)


class _Header:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def token(self, what: str) -> tuple[int, bytes]:
        data = self.data
        while self.pos < len(data):
            c = data[self.pos:self.pos + 1]
            if c == b"#":
                end = data.find(b"\n", self.pos)
                self.pos = len(data) if end < 0 else end + 1
            elif c in _WHITESPACE:
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < len(data) and data[self.pos:self.pos + 1] not in _WHITESPACE + b"#":
            self.pos += 1
        if start == self.pos:
            raise ParseError(f"missing {what}", offset=start)
        return start, data[start:self.pos]

    def integer(self, what: str) -> tuple[int, int]:
        start, tok = self.token(what)
        if not tok.isdigit():
            raise ParseError(f"{what} must be a decimal integer, got {tok[:16]!r}", offset=start)
        return start, int(tok)


def decode(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in _CHANNELS:
        raise ParseError(f"not a binary PGM/PPM file (magic {magic!r})", offset=0)
    head = _Header(data)
    head.pos = 2
    _, width = head.integer("width")
    at, height = head.integer("height")
    if width == 0 or height == 0:
        raise ParseError(f"empty image {width}x{height}", offset=at)
    at, maxval = head.integer("maxval")
    if maxval != 255:
        raise ParseError(f"only 8-bit images (maxval 255) are supported, got {maxval}", offset=at)
    if head.pos >= len(data) or data[head.pos:head.pos + 1] not in _WHITESPACE:
        raise ParseError("missing whitespace before pixel data", offset=head.pos)
    start = head.pos + 1
    channels = _CHANNELS[magic]
    need = width * height * channels
    payload = data[start:start + need]
    if len(payload) < need:
        raise ParseError(f"truncated pixel data: expected {need} bytes, found {len(payload)}", offset=len(data))
    if len(data) > start + need:
        raise ParseError(f"{len(data) - start - need} unexpected bytes after pixel data", offset=start + need)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return to_canonical(pixels)


def encode(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ContractError(f"expected an (H, W, 1) or (H, W, 3) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("image contains non-finite values")
    magic = b"P5" if x.shape[2] == 1 else b"P6"
    h, w = x.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + to_bytes(x).tobytes()


def load_image(path) -> np.ndarray:
    """Read a P5/P6 file as float32 (H, W, C) in [-1, 1]."""
    path = Path(path)
    try:
        return decode(path.read_bytes())
    except ParseError as exc:
        raise ParseError(f"{path}: {exc.message}", offset=exc.offset, line=exc.line) from None


def save_image(path, x: np.ndarray) -> None:
    Path(path).write_bytes(encode(x))
