"""Binary PPM (P6, maxval 255) reading and writing."""
from __future__ import annotations

import numpy as np


class PPMError(ValueError):
    pass


_WS = b" \t\r\n"


def _token(data: bytes, pos: int):
    """Next header token starting at ``pos``, skipping whitespace and # comments."""
    n = len(data)
    while pos < n:
        if data[pos] in _WS:
            pos += 1
        elif data[pos] == ord("#"):
            while pos < n and data[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WS and data[pos] != ord("#"):
        pos += 1
    if start == pos:
        raise PPMError(f"unexpected end of header at byte offset {start}")
    return data[start:pos], start, pos


def _int(tok: bytes, offset: int, what: str) -> int:
    if not tok.isdigit():
        raise PPMError(f"invalid {what} {tok!r} at byte offset {offset}")
    return int(tok)


def decode_ppm(data: bytes) -> np.ndarray:
    """Parse P6 bytes into a (3, H, W) float32 array in [0, 1]."""
    magic, off, pos = _token(data, 0)
    if magic != b"P6":
        raise PPMError(f"expected magic P6 at byte offset {off}, got {magic!r}")
    tok, off, pos = _token(data, pos)
    width = _int(tok, off, "width")
    tok, off, pos = _token(data, pos)
    height = _int(tok, off, "height")
    tok, off, pos = _token(data, pos)
    maxval = _int(tok, off, "maxval")
    if maxval != 255:
        raise PPMError(f"only maxval 255 is supported, got {maxval} at byte offset {off}")
    if width < 1 or height < 1:
        raise PPMError(f"empty image {width}x{height} at byte offset {off}")
    if pos >= len(data) or data[pos] not in _WS:
        raise PPMError(f"missing whitespace after maxval at byte offset {pos}")
    pos += 1
    need = 3 * width * height
    if len(data) - pos < need:
        raise PPMError(f"truncated pixel data at byte offset {len(data)}: need {need} bytes from offset {pos}")
    if len(data) - pos > need:
        raise PPMError(f"{len(data) - pos - need} trailing bytes after pixel data at byte offset {pos + need}")
    pix = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(height, width, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32) / 255.0)


def encode_ppm(image) -> bytes:
    """(3, H, W) values in [0, 1] -> P6 bytes with values rounded to 8 bits."""
    img = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    pix = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pix.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes()


def ppm_read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def ppm_write(path, image) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def to_uint8(image) -> np.ndarray:
    return np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
