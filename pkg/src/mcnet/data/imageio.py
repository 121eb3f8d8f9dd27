"""Binary PPM (P6) and PGM (P5) reading and writing, 8-bit only.

Images are float arrays in [0, 1]: ``[3, H, W]`` for RGB, ``[H, W]`` for
grayscale. Writing clamps to [0, 1] and rounds to the nearest of 256 levels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 255


class ImageFormatError(ValueError):
    pass


def quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(img, np.float64), 0.0, 1.0) * MAXVAL).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"PPM needs a [3,H,W] image, got shape {img.shape}")
    _, h, w = img.shape
    header = f"P6\n{w} {h}\n{MAXVAL}\n".encode("ascii")
    return header + quantize(img).transpose(1, 2, 0).tobytes()


def encode_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a [H,W] image, got shape {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii") + quantize(img).tobytes()


def _parse_header(data: bytes) -> tuple[bytes, int, int, int]:
    """Return (magic, width, height, payload offset)."""
    tokens: list[bytes] = []
    pos = 0
    n = len(data)
    while len(tokens) < 4:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the payload
    if pos >= n or not data[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval")
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"non-numeric header field in {tokens[1:]}") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"bad image size {w}x{h}")
    if maxval != MAXVAL:
        raise ImageFormatError(f"only 8-bit images with maxval {MAXVAL} are supported, got {maxval}")
    return magic, w, h, pos + 1


def decode(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise ImageFormatError("file too short")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; only binary P5/P6 are read")
    magic, w, h, offset = _parse_header(data)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"malformed magic {magic!r}")
    channels = 3 if magic == b"P6" else 1
    size = w * h * channels
    payload = data[offset:offset + size]
    if len(payload) < size:
        raise ImageFormatError(f"truncated payload: expected {size} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, np.uint8).astype(np.float64) / MAXVAL
    if channels == 1:
        return pixels.reshape(h, w)
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).copy()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(img))


def read_image(path: str | Path) -> np.ndarray:
    """Read a P6 file as ``[3,H,W]`` or a P5 file as ``[H,W]``."""
    return decode(Path(path).read_bytes())


def read_rgb(path: str | Path) -> np.ndarray:
    img = read_image(path)
    if img.ndim != 3:
        raise ImageFormatError(f"{path}: expected an RGB (P6) image")
    return img
