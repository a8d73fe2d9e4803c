"""Motion difference maps from ego-motion-compensated frame windows.

The averaged difference halves responses at a moving object's past/future
("ghost") positions because only one of the two terms fires there, while its
current position keeps the full response. Grayscale open/close then removes
isolated speckle and fills pinholes; binarization is deferred to the
proposal stage.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .align import AlignmentError, GridSpec, LkParams, RansacParams, align_frame, float_pyramid
from .imgcore import GrayFrame

MODES = ("two_frame", "three_frame")


@dataclass(frozen=True, eq=False)
class MotionMap:
    """Single-channel 8-bit motion difference image for one center frame.

    ``degraded`` marks maps forced to zero because neighbor alignment failed.
    """

    data: np.ndarray
    index: int = 0
    k: int = 1
    degraded: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"motion map data must be non-empty 2-D, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError(f"motion map data must be uint8, got {arr.dtype}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MotionMap):
            return NotImplemented
        return (
            self.index == other.index
            and self.k == other.k
            and self.degraded == other.degraded
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class StructuringElement:
    shape: str = "square"
    size: int = 3

    def __post_init__(self):
        if self.shape not in ("square", "cross"):
            raise ValueError(f"shape must be 'square' or 'cross', got {self.shape!r}")
        if self.size < 1 or self.size % 2 == 0:
            raise ValueError(f"size must be odd and >= 1, got {self.size}")


def _check_dims(*frames) -> None:
    dims = {(f.height, f.width) for f in frames}
    if len(dims) != 1:
        raise ValueError(f"frame dimension mismatch: {sorted(dims)}")


def two_frame_diff(current: GrayFrame, aligned_prev: GrayFrame) -> MotionMap:
    """Per-pixel absolute difference |current - aligned_prev|."""
    _check_dims(current, aligned_prev)
    d = np.abs(current.data.astype(np.int16) - aligned_prev.data.astype(np.int16))
    return MotionMap(d.astype(np.uint8), index=current.index, k=current.index - aligned_prev.index)


def three_frame_diff(
    current: GrayFrame, aligned_prev: GrayFrame, aligned_next: GrayFrame
) -> MotionMap:
    """Averaged difference (|cur - prev| + |cur - next|) / 2, rounded half-up."""
    _check_dims(current, aligned_prev, aligned_next)
    cur = current.data.astype(np.int16)
    d1 = np.abs(cur - aligned_prev.data)
    d2 = np.abs(cur - aligned_next.data)
    avg = (d1 + d2 + 1) >> 1  # fits int16; max (255+255+1)//2 = 255
    return MotionMap(
        avg.astype(np.uint8), index=current.index, k=current.index - aligned_prev.index
    )


def _extreme3(src: np.ndarray, axis: int, op) -> np.ndarray:
    """Size-3 sliding min/max along one axis; out-of-frame samples never win."""
    out = np.empty_like(src)
    if axis == 1:
        op(src[:, :-2], src[:, 1:-1], out=out[:, 1:-1])
        op(out[:, 1:-1], src[:, 2:], out=out[:, 1:-1])
        op(src[:, 0], src[:, 1], out=out[:, 0])
        op(src[:, -2], src[:, -1], out=out[:, -1])
    else:
        op(src[:-2], src[1:-1], out=out[1:-1])
        op(out[1:-1], src[2:], out=out[1:-1])
        op(src[0], src[1], out=out[0])
        op(src[-2], src[-1], out=out[-1])
    return out


def _extreme_axis(src: np.ndarray, size: int, axis: int, op) -> np.ndarray:
    # A size-(2j+1) segment equals a size-3 segment composed j times.
    for _ in range(size // 2):
        src = _extreme3(src, axis, op)
    return src


def _erode(data: np.ndarray, se: StructuringElement) -> np.ndarray:
    # Out-of-frame samples count as +inf for erosion (-inf for dilation), so
    # the two stay adjoint and the opening/closing lattice laws hold.
    if se.size == 1:
        return data
    h = _extreme_axis(data, se.size, 1, np.minimum)
    if se.shape == "square":
        return _extreme_axis(h, se.size, 0, np.minimum)
    v = _extreme_axis(data, se.size, 0, np.minimum)
    return np.minimum(h, v)


def _dilate(data: np.ndarray, se: StructuringElement) -> np.ndarray:
    if se.size == 1:
        return data
    h = _extreme_axis(data, se.size, 1, np.maximum)
    if se.shape == "square":
        return _extreme_axis(h, se.size, 0, np.maximum)
    v = _extreme_axis(data, se.size, 0, np.maximum)
    return np.maximum(h, v)


def morph_open(map: MotionMap, se: StructuringElement, iterations: int = 1) -> MotionMap:
    """Grayscale opening (erosion then dilation), repeated ``iterations`` times."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    data = map.data
    for _ in range(iterations):
        data = _dilate(_erode(data, se), se)
    return replace(map, data=data)


def morph_close(map: MotionMap, se: StructuringElement, iterations: int = 1) -> MotionMap:
    """Grayscale closing (dilation then erosion), repeated ``iterations`` times."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    data = map.data
    for _ in range(iterations):
        data = _erode(_dilate(data, se), se)
    return replace(map, data=data)


def motion_map(
    prev: GrayFrame,
    current: GrayFrame,
    next: GrayFrame | None,
    mode: str = "three_frame",
    lk: LkParams = LkParams(),
    ransac: RansacParams = RansacParams(),
    grid: GridSpec = GridSpec(),
    se: StructuringElement = StructuringElement(),
    open_iterations: int = 1,
    close_iterations: int = 1,
) -> MotionMap:
    """Full motion map for one center frame: align neighbors, difference, refine.

    ``prev``/``next`` are the raw t-k / t+k frames (``next`` is ignored in
    two_frame mode). When alignment fails the result is an all-zero map with
    ``degraded=True`` so batch runs stay total.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "three_frame" and next is None:
        raise ValueError("three_frame mode requires a next frame")
    frames = (prev, current) if mode == "two_frame" or next is None else (prev, current, next)
    _check_dims(*frames)
    k = current.index - prev.index
    try:
        ref_pyr = float_pyramid(current, lk.pyramid_levels)
        aligned_prev, _ = align_frame(
            current, prev, lk=lk, ransac=ransac, grid=grid, reference_pyramid=ref_pyr
        )
        if mode == "three_frame":
            aligned_next, _ = align_frame(
                current, next, lk=lk, ransac=ransac, grid=grid, reference_pyramid=ref_pyr
            )
            diff = three_frame_diff(current, aligned_prev, aligned_next)
        else:
            diff = two_frame_diff(current, aligned_prev)
    except AlignmentError:
        zero = np.zeros((current.height, current.width), dtype=np.uint8)
        return MotionMap(zero, index=current.index, k=k, degraded=True)
    refined = morph_close(morph_open(diff, se, open_iterations), se, close_iterations)
    return replace(refined, k=k)
