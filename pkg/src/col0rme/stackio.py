"""Stack and image files.

Raw ``CLRM1`` layout (little-endian)::

    magic   5 bytes  b"CLRM1"
    rows    uint32   M
    cols    uint32   M
    frames  uint32   T
    dtype   uint8    1=uint8 2=uint16 3=float32 4=float64
    pitch   float64  coarse pixel pitch in nm
    rate    float64  frame rate in frames per second
    payload T frames, each row-major, M*M*T*itemsize bytes

Multi-page TIFF (8/16-bit unsigned or 32-bit float) is read and written with
``tifffile``.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np
import tifffile

from .covariance import ImageStack

MAGIC = b"CLRM1"
_HEADER = struct.Struct("<5sIIIBdd")
DTYPE_CODES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<f4"), 4: np.dtype("<f8")}
_CODE_FOR = {v.str: k for k, v in DTYPE_CODES.items()}
TIFF_DTYPES = (np.dtype("uint8"), np.dtype("uint16"), np.dtype("float32"))


class StackFormatError(ValueError):
    """Unreadable, truncated or unsupported stack file."""


def write_raw(path: str | Path, stack: ImageStack, dtype=None):
    frames = np.asarray(stack.frames)
    dt = np.dtype(dtype or frames.dtype).newbyteorder("<")
    if dt.str not in _CODE_FOR:
        raise StackFormatError(f"dtype {dt} not supported by the raw format")
    T, M, N = frames.shape
    header = _HEADER.pack(MAGIC, M, N, T, _CODE_FOR[dt.str], float(stack.pitch_nm), float(stack.frame_rate))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(frames, dtype=dt).tobytes(order="C"))


def read_raw(path: str | Path) -> ImageStack:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise StackFormatError(f"{path}: file shorter than the header")
    magic, M, N, T, code, pitch, rate = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise StackFormatError(f"{path}: bad magic {magic!r}")
    if code not in DTYPE_CODES:
        raise StackFormatError(f"{path}: unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    expected = M * N * T * dt.itemsize
    payload = memoryview(data)[_HEADER.size :]
    if len(payload) != expected:
        raise StackFormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    if T < 1 or M != N:
        raise StackFormatError(f"{path}: unsupported dimensions {M}x{N}x{T}")
    frames = np.frombuffer(payload, dtype=dt).reshape(T, M, N).copy()
    return ImageStack(frames, frame_rate=rate, pitch_nm=pitch)


def write_tiff(path: str | Path, stack: ImageStack, dtype=None):
    frames = np.asarray(stack.frames)
    dt = np.dtype(dtype or frames.dtype)
    if dt not in TIFF_DTYPES:
        raise StackFormatError(f"TIFF stacks must be uint8, uint16 or float32, got {dt}")
    tifffile.imwrite(
        path,
        frames.astype(dt, copy=False),
        photometric="minisblack",
        metadata={"pitch_nm": float(stack.pitch_nm), "frame_rate": float(stack.frame_rate)},
    )


def read_tiff(path: str | Path, pitch_nm: float = 100.0, frame_rate: float = 100.0) -> ImageStack:
    try:
        with tifffile.TiffFile(path) as tf:
            frames = tf.asarray()
            meta = tf.shaped_metadata[0] if tf.shaped_metadata else {}
    except (OSError, ValueError, tifffile.TiffFileError) as exc:
        raise StackFormatError(f"{path}: {exc}") from exc
    if frames.ndim == 2:
        frames = frames[None]
    if frames.ndim != 3:
        raise StackFormatError(f"{path}: expected a grayscale stack, got shape {frames.shape}")
    if frames.dtype not in TIFF_DTYPES:
        raise StackFormatError(f"{path}: unsupported TIFF sample type {frames.dtype}")
    if frames.shape[1] != frames.shape[2]:
        raise StackFormatError(f"{path}: frames must be square, got {frames.shape[1:]}")
    return ImageStack(
        frames,
        frame_rate=float(meta.get("frame_rate", frame_rate)),
        pitch_nm=float(meta.get("pitch_nm", pitch_nm)),
    )


def read_stack(path: str | Path, pitch_nm: float = 100.0, frame_rate: float = 100.0) -> ImageStack:
    path = Path(path)
    if not path.exists():
        raise StackFormatError(f"{path}: no such file")
    if path.suffix.lower() in (".tif", ".tiff"):
        return read_tiff(path, pitch_nm, frame_rate)
    return read_raw(path)


def write_stack(path: str | Path, stack: ImageStack, dtype=None):
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        write_tiff(path, stack, dtype)
    else:
        write_raw(path, stack, dtype)


def write_fine_image(path: str | Path, image: np.ndarray, pitch_nm: float | None = None):
    """32-bit float TIFF plus ``<stem>.csv`` listing nonzero pixels (column-major index, row, col, value)."""
    path = Path(path)
    image = np.asarray(image)
    tifffile.imwrite(path, image.astype(np.float32), photometric="minisblack",
                     metadata={"pitch_nm": pitch_nm} if pitch_nm else None)
    L = image.shape[0]
    cols, rows = np.nonzero(image.T)
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "row", "col", "value"])
        for r, c in zip(rows, cols):
            w.writerow([int(r + L * c), int(r), int(c), repr(float(image[r, c]))])


def read_image(path: str | Path) -> np.ndarray:
    try:
        return tifffile.imread(path)
    except (OSError, ValueError, tifffile.TiffFileError) as exc:
        raise StackFormatError(f"{path}: {exc}") from exc


def write_mask(path: str | Path, mask: np.ndarray):
    tifffile.imwrite(path, np.asarray(mask, dtype=np.uint8), photometric="minisblack")


def write_ground_truth(path: str | Path, positions: np.ndarray, brightness: np.ndarray, fine_pitch: float):
    """One row per emitter: fine-grid row/col, physical coordinates of the pixel centre, mean photons per frame."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "y_nm", "x_nm", "brightness"])
        for (r, c), b in zip(positions, brightness):
            w.writerow([int(r), int(c), (r + 0.5) * fine_pitch, (c + 0.5) * fine_pitch, repr(float(b))])


def read_ground_truth(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 2), dtype=int), np.zeros(0)
    pos = np.array([[int(r["row"]), int(r["col"])] for r in rows])
    bright = np.array([float(r.get("brightness", 0.0) or 0.0) for r in rows])
    return pos, bright
