"""8-bit RGB PNG and color PFM codecs.

Images are float arrays of shape (H, W, 3), row 0 at the top.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def quantize_ldr(image) -> np.ndarray:
    """The values an 8-bit PNG of ``image`` would hold, as floats in [0, 1]."""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0) / 255.0


def write_png(path, image) -> None:
    """Clamp to [0, 1] and quantize with round(v * 255)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, "RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        head = path.read_bytes()[:33]
    except FileNotFoundError as e:
        raise OSError(f"{path}: no such file") from e
    if len(head) < 33 or head[:8] != _PNG_SIG or head[12:16] != b"IHDR":
        raise OSError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    if bit_depth != 8:
        raise OSError(f"{path}: expected 8-bit PNG, found bit depth {bit_depth}")
    if color_type != 2:
        raise OSError(f"{path}: expected RGB PNG (color type 2), found {color_type}")
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.uint8)
    return arr.astype(np.float64) / 255.0


def write_pfm(path, image) -> None:
    """Color PFM, little-endian float32, rows stored bottom-up."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes())


def _read_token_line(f) -> str:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise OSError("truncated PFM header")
    return line.decode("ascii").strip()


def read_pfm(path) -> np.ndarray:
    """Returns float32 (H, W, 3); grayscale 'Pf' files are rejected."""
    try:
        f = open(path, "rb")
    except FileNotFoundError as e:
        raise OSError(f"{path}: no such file") from e
    with f:
        try:
            ident = _read_token_line(f)
            if ident != "PF":
                raise OSError(f"{path}: expected color PFM header 'PF', got {ident!r}")
            dims = _read_token_line(f).split()
            if len(dims) != 2:
                raise OSError(f"{path}: malformed PFM dimensions")
            w, h = int(dims[0]), int(dims[1])
            scale = float(_read_token_line(f))
        except (UnicodeDecodeError, ValueError) as e:
            raise OSError(f"{path}: malformed PFM header") from e
        if w <= 0 or h <= 0 or scale == 0:
            raise OSError(f"{path}: malformed PFM header")
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read()
    if len(raw) != 12 * w * h:
        raise OSError(f"{path}: expected {12 * w * h} data bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w, 3)[::-1]
    return data.astype(np.float32)

