"""8-bit image reading and writing.

PNG goes through Pillow. PPM (color) and PGM (grayscale) are handled by a
small built-in codec so the data pipeline stays usable without any imaging
dependency. Arrays cross this boundary as floats scaled by 1/255: RGB as
(3, h, w), grayscale as (h, w), both float32 in [0, 1]. Writers clip to
[0, 1] and round to the nearest 8-bit level.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError

_NETPBM_EXTS = {".ppm", ".pgm"}


def _read_netpbm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    i = 0
    # Header: magic, width, height, maxval, separated by whitespace with
    # '#' comments, then exactly one whitespace byte before the raster.
    while len(tokens) < 4:
        if i >= len(blob):
            raise DataError(f"{path}: truncated netpbm header")
        c = blob[i:i + 1]
        if c == b"#":
            i = blob.find(b"\n", i)
            if i < 0:
                raise DataError(f"{path}: unterminated comment in header")
            i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(blob) and not blob[j:j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    i += 1  # the single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: unsupported netpbm magic {magic!r} (P5/P6 only)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataError(f"{path}: non-numeric netpbm header fields") from None
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, found {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    raster = blob[i:i + need]
    if len(raster) != need:
        raise DataError(
            f"{path}: raster holds {len(raster)} bytes, header promises {need}"
        )
    arr = np.frombuffer(raster, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(h, w, 3)
    return arr.reshape(h, w)


def _write_netpbm(path, arr: np.ndarray) -> None:
    if arr.ndim == 3:
        magic, payload = b"P6", arr
    else:
        magic, payload = b"P5", arr
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(payload).tobytes())


def _read_raw(path) -> np.ndarray:
    """Decode to uint8, (h, w) or (h, w, 3)."""
    if not os.path.isfile(path):
        raise DataError(f"{path}: no such file")
    ext = os.path.splitext(str(path))[1].lower()
    if ext in _NETPBM_EXTS:
        return _read_netpbm(path)
    try:
        from PIL import Image
    except ImportError:
        raise DataError(
            f"{path}: reading {ext or 'this'} format needs pillow; "
            "install it or convert to .ppm/.pgm"
        ) from None
    try:
        with Image.open(path) as img:
            if img.mode in ("L", "1", "I", "I;16"):
                return np.asarray(img.convert("L"))
            return np.asarray(img.convert("RGB"))
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: cannot decode image: {exc}") from exc


def _write_raw(path, arr: np.ndarray) -> None:
    ext = os.path.splitext(str(path))[1].lower()
    if ext in _NETPBM_EXTS:
        _write_netpbm(path, arr)
        return
    try:
        from PIL import Image
    except ImportError:
        raise DataError(
            f"{path}: writing {ext or 'this'} format needs pillow; "
            "install it or use a .ppm/.pgm path"
        ) from None
    mode = "RGB" if arr.ndim == 3 else "L"
    Image.fromarray(arr, mode).save(path)


def _to_u8(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_rgb(path) -> np.ndarray:
    """Read any supported image as float32 (3, h, w) in [0, 1]."""
    raw = _read_raw(path)
    if raw.ndim == 2:
        raw = np.stack([raw] * 3, axis=-1)
    out = raw.astype(np.float32) / np.float32(255.0)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def read_gray(path) -> np.ndarray:
    """Read any supported image as float32 (h, w) in [0, 1]; RGB is averaged."""
    raw = _read_raw(path)
    if raw.ndim == 3:
        return (raw.astype(np.float32) / np.float32(255.0)).mean(axis=2)
    return raw.astype(np.float32) / np.float32(255.0)


def write_rgb(path, arr) -> None:
    """Write float (3, h, w) values in [0, 1] as an 8-bit color image."""
    arr = np.asarray(arr)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise DataError(f"expected a (3, h, w) array, got shape {arr.shape}")
    _write_raw(path, _to_u8(arr.transpose(1, 2, 0)))


def write_gray(path, arr) -> None:
    """Write float (h, w) values in [0, 1] as an 8-bit grayscale image."""
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise DataError(f"expected an (h, w) array, got shape {arr.shape}")
    _write_raw(path, _to_u8(arr))
