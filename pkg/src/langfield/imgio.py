"""Netpbm readers and writers (binary P6 color, P5 masks)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit binary PPM, gamma 1.0."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def write_pgm(path: str | Path, mask: np.ndarray) -> None:
    """Write a boolean (H, W) mask as binary PGM with values 0 and 255."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"expected (H, W) mask, got {mask.shape}")
    data = np.where(mask.astype(bool), 255, 0).astype(np.uint8)
    h, w = data.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def _read_netpbm(path: str | Path, magic: bytes) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise FormatError(f"{path}: expected {magic.decode()} header")
    # header tokens: magic, width, height, maxval, then one whitespace byte
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: non-numeric header field") from None
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(raw[pos:], dtype=np.uint8)
    return data, w, h


def read_ppm(path: str | Path) -> np.ndarray:
    """Read binary PPM into (H, W, 3) float64 in [0, 1]."""
    data, w, h = _read_netpbm(path, b"P6")
    if data.size != w * h * 3:
        raise FormatError(f"{path}: payload size mismatch")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path: str | Path) -> np.ndarray:
    """Read binary PGM into (H, W) bool (nonzero is True)."""
    data, w, h = _read_netpbm(path, b"P5")
    if data.size != w * h:
        raise FormatError(f"{path}: payload size mismatch")
    return data.reshape(h, w) > 0
