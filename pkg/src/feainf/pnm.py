"""8-bit binary PGM (P5) / PPM (P6) reading and writing."""

from __future__ import annotations

import numpy as np


class PNMError(ValueError):
    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = path
        self.offset = offset


_WS = b" \t\r\n"


def _tokens(buf, path, count):
    """Read ``count`` header tokens, skipping comments; returns (tokens, body offset)."""
    out = []
    i = 0
    n = len(buf)
    while len(out) < count:
        while i < n and (buf[i] in _WS or buf[i] == ord("#")):
            if buf[i] == ord("#"):
                while i < n and buf[i] not in b"\r\n":
                    i += 1
            else:
                i += 1
        if i >= n:
            raise PNMError(path, i, "header ends early")
        start = i
        while i < n and buf[i] not in _WS and buf[i] != ord("#"):
            i += 1
        out.append((bytes(buf[start:i]), start))
    if i >= n:
        raise PNMError(path, i, "missing whitespace before pixel data")
    return out, i + 1


def decode(buf, path="<bytes>"):
    tokens, body = _tokens(buf, path, 4)
    magic, magic_at = tokens[0]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise PNMError(path, magic_at, f"unsupported magic {magic!r}")
    vals = []
    for tok, at in tokens[1:]:
        if not tok.isdigit():
            raise PNMError(path, at, f"expected an integer, got {tok!r}")
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise PNMError(path, tokens[1][1], "non-positive image size")
    if maxval != 255:
        raise PNMError(path, tokens[3][1], f"only 8-bit images supported (maxval {maxval})")
    need = width * height * channels
    have = len(buf) - body
    if have < need:
        raise PNMError(path, len(buf), f"pixel data truncated: {have} of {need} bytes")
    pix = np.frombuffer(buf, dtype=np.uint8, count=need, offset=body)
    return pix.reshape(height, width, channels).astype(np.float64) / 255.0


def encode(pixels):
    p = np.asarray(pixels, dtype=np.float64)
    if p.ndim == 2:
        p = p[:, :, None]
    if p.ndim != 3 or p.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW, HxWx1 or HxWx3 pixels, got {p.shape}")
    h, w, c = p.shape
    q = np.clip(np.rint(p * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + q.tobytes()


def read_image(path):
    """Pixels as float64 (H, W, C) in [0, 1]."""
    with open(path, "rb") as fh:
        return decode(fh.read(), str(path))


def write_image(path, pixels):
    with open(path, "wb") as fh:
        fh.write(encode(pixels))
