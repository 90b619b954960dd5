"""Binary PGM (P5, 16-bit big-endian) reading and writing for [0, 1] images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 65535


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image has non-finite pixels")
    q = np.rint(np.clip(img, 0.0, 1.0) * MAXVAL).astype(">u2")
    h, w = img.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        f.write(q.tobytes())


def _tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just past the single whitespace after them."""
    out, i = [], 0
    while len(out) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        out.append(data[i:j])
        i = j
    return out, i + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval <= MAXVAL:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset)
    return raw.reshape(h, w).astype(np.float64) / maxval
