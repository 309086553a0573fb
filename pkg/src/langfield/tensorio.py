"""Binary tensor container and codebook text format.

Tensor files are little-endian throughout:

    offset  size        field
    0       4           magic ``LSTF``
    4       1           version, must be 1
    5       1           dtype code: 0 = float32, 1 = int32, 2 = uint8
    6       1           ndim
    7       1           padding (zero)
    8       4 * ndim    dims, uint32 each
    ...     payload     row-major array data

The codebook is UTF-8 text, one entry per line: a label token followed by
D floats, whitespace separated. Blank lines are ignored.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LSTF"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<u1")}
_CODE_FOR_KIND = {"f": 0, "i": 1, "u": 2}


def _dtype_code(arr: np.ndarray) -> int:
    if arr.dtype == np.float32:
        return 0
    if arr.dtype == np.int32:
        return 1
    if arr.dtype == np.uint8:
        return 2
    raise FormatError(f"unsupported tensor dtype {arr.dtype}; use float32, int32, or uint8")


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _dtype_code(arr)
    if arr.ndim == 0 or arr.ndim > 255:
        raise FormatError(f"tensor rank {arr.ndim} not supported")
    header = MAGIC + struct.pack("<BBBB", VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload)


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, code, ndim, _pad = struct.unpack("<BBBB", raw[4:8])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if ndim == 0:
        raise FormatError(f"{path}: zero-rank tensor")
    dims_end = 8 + 4 * ndim
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims block")
    shape = struct.unpack(f"<{ndim}I", raw[8:dims_end])
    dtype = _DTYPE_CODES[code]
    count = 1
    for d in shape:
        count *= d
    expected = dims_end + count * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload size mismatch, expected {expected - dims_end} bytes, "
            f"got {len(raw) - dims_end}"
        )
    arr = np.frombuffer(raw[dims_end:], dtype=dtype).reshape(shape)
    return arr.copy()


@dataclass
class Codebook:
    tokens: list[str]
    vectors: np.ndarray  # (K, D) float64

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector_for(self, token: str) -> np.ndarray:
        from .errors import TokenLookupError

        try:
            idx = self.tokens.index(token)
        except ValueError:
            raise TokenLookupError(f"token {token!r} not in codebook") from None
        return self.vectors[idx]


def load_codebook(path: str | Path) -> Codebook:
    tokens: list[str] = []
    rows: list[list[float]] = []
    dim = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 2:
            raise FormatError(f"{path}:{lineno}: entry needs a token and at least one value")
        token = parts[0]
        try:
            values = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric value ({exc})") from None
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise FormatError(
                f"{path}:{lineno}: expected {dim} values, got {len(values)}"
            )
        if not np.all(np.isfinite(values)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        if token in tokens:
            raise FormatError(f"{path}:{lineno}: duplicate token {token!r}")
        tokens.append(token)
        rows.append(values)
    if not tokens:
        raise FormatError(f"{path}: empty codebook")
    return Codebook(tokens=tokens, vectors=np.asarray(rows, dtype=np.float64))


def save_codebook(path: str | Path, codebook: Codebook) -> None:
    lines = []
    for token, vec in zip(codebook.tokens, codebook.vectors):
        lines.append(token + " " + " ".join(repr(float(v)) for v in vec))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
