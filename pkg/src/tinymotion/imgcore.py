"""Pixel buffer types and lossless 8-bit image I/O (PGM/PPM binary, PNG).

Frames are immutable: pixel data is stored as a read-only numpy array so
that frames can be shared freely between threads and cached loaders.
Video decoding is out of scope; sequences are directories of numbered
still images (``%06d.pgm`` etc.), typically dumped by an external tool.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

# BT.601 luma weights; common default for 8-bit video sources.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _readonly_u8(data: np.ndarray, ndim: int, what: str) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != ndim or arr.size == 0:
        raise ValueError(f"{what} data must be a non-empty {ndim}-D array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValueError(f"{what} data must be uint8, got {arr.dtype}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GrayFrame:
    """Single-channel 8-bit image; ``data`` is (height, width), row-major."""

    data: np.ndarray
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "data", _readonly_u8(self.data, 2, "gray"))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, GrayFrame):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class RgbFrame:
    """Interleaved 8-bit RGB image; ``data`` is (height, width, 3)."""

    data: np.ndarray
    index: int = 0

    def __post_init__(self):
        arr = _readonly_u8(self.data, 3, "rgb")
        if arr.shape[2] != 3:
            raise ValueError(f"rgb data must have 3 channels, got {arr.shape[2]}")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, RgbFrame):
            return NotImplemented
        return self.index == other.index and np.array_equal(self.data, other.data)


def to_grayscale(frame: RgbFrame) -> GrayFrame:
    """BT.601 luma conversion, rounded half-up and clamped to [0, 255]."""
    luma = frame.data.astype(np.float64) @ _LUMA_WEIGHTS
    out = np.clip(np.floor(luma + 0.5), 0.0, 255.0).astype(np.uint8)
    return GrayFrame(out, index=frame.index)


def frame_index_from_path(path: Path | str) -> int:
    """Frame number encoded in a numeric file stem (``000012.pgm`` -> 12), else 0."""
    stem = Path(path).stem
    return int(stem) if stem.isdigit() else 0


class _PnmReader:
    """Tokenizer for binary netpbm headers ('#' comments allowed)."""

    def __init__(self, buf: bytes, path: Path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def fail(self, why: str):
        raise ValueError(f"{self.path}: malformed header ({why})")

    def token(self) -> bytes:
        buf, n = self.buf, len(self.buf)
        while self.pos < n:
            c = buf[self.pos]
            if c == ord("#"):
                while self.pos < n and buf[self.pos] not in b"\r\n":
                    self.pos += 1
            elif c in b" \t\r\n\x0b\x0c":
                self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < n and buf[self.pos] not in b" \t\r\n\x0b\x0c":
            self.pos += 1
        if start == self.pos:
            self.fail("unexpected end of header")
        return buf[start : self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        if not tok.isdigit():
            self.fail(f"non-numeric {what}: {tok!r}")
        return int(tok)

    def pixel_data(self, count: int) -> np.ndarray:
        # Exactly one whitespace byte separates the maxval from the raster.
        if self.pos >= len(self.buf) or self.buf[self.pos] not in b" \t\r\n\x0b\x0c":
            self.fail("missing whitespace before pixel data")
        self.pos += 1
        raw = self.buf[self.pos : self.pos + count]
        if len(raw) < count:
            self.fail(f"truncated pixel data ({len(raw)} of {count} bytes)")
        return np.frombuffer(raw, dtype=np.uint8)


def _load_pnm(buf: bytes, path: Path, channels: int) -> np.ndarray:
    reader = _PnmReader(buf, path)
    reader.token()  # magic, already checked
    width = reader.int_token("width")
    height = reader.int_token("height")
    maxval = reader.int_token("maxval")
    if width < 1 or height < 1:
        reader.fail(f"invalid dimensions {width}x{height}")
    if maxval > 255:
        raise ValueError(f"{path}: unsupported bit depth (maxval {maxval}; only 8-bit supported)")
    if maxval < 1:
        reader.fail(f"invalid maxval {maxval}")
    flat = reader.pixel_data(width * height * channels)
    if channels == 1:
        return flat.reshape(height, width)
    return flat.reshape(height, width, channels)


def _load_png(path: Path) -> GrayFrame | RgbFrame:
    from PIL import Image

    with Image.open(path) as img:
        mode = img.mode
        if mode == "L":
            return GrayFrame(np.asarray(img), index=frame_index_from_path(path))
        if mode == "RGB":
            return RgbFrame(np.asarray(img), index=frame_index_from_path(path))
    if mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        raise ValueError(f"{path}: unsupported bit depth (only 8-bit supported)")
    raise ValueError(f"{path}: unsupported PNG mode {mode!r} (8-bit gray or RGB only)")


def load_frame(path: Path | str) -> GrayFrame | RgbFrame:
    """Decode a PGM (P5), PPM (P6) or PNG file into a frame.

    The frame index is taken from a numeric filename stem when present.
    Raises FileNotFoundError for missing files and ValueError for malformed
    headers or non-8-bit data.
    """
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    buf = p.read_bytes()
    if buf.startswith(_PNG_MAGIC):
        return _load_png(p)
    if buf.startswith(b"P5"):
        return GrayFrame(_load_pnm(buf, p, 1), index=frame_index_from_path(p))
    if buf.startswith(b"P6"):
        return RgbFrame(_load_pnm(buf, p, 3), index=frame_index_from_path(p))
    raise ValueError(f"{p}: unsupported format (PGM/PPM binary or PNG expected)")


def write_gray(frame: GrayFrame, path: Path | str) -> None:
    """Write a binary PGM (P5, maxval 255); round-trips bit-exactly."""
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + frame.data.tobytes())
