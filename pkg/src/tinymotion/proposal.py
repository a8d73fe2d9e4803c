"""Candidate boxes from motion maps: threshold, label, filter, score.

This is a classical surrogate for a learned detection head: blob mean
intensity (normalized to [0, 1]) stands in for a confidence score, which is
monotone in motion energy but carries no appearance information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .boxes import BoundingBox, Detection
from .motiondiff import MotionMap

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True, eq=False)
class BinaryMap:
    """Boolean foreground mask plus the motion map it was thresholded from."""

    data: np.ndarray
    source: MotionMap | None = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"binary map must be non-empty 2-D, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            raise ValueError(f"binary map must be bool, got {arr.dtype}")
        if self.source is not None and self.source.data.shape != arr.shape:
            raise ValueError("binary map shape differs from source motion map")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class Blob:
    """Connected foreground component with its tight box and intensity stats."""

    bbox: BoundingBox
    area: int
    mean_intensity: float


def otsu_threshold(map: MotionMap) -> int:
    """Threshold t maximizing between-class variance of the split {<t, >=t}.

    Ties break toward the lower threshold. Constant maps return 256 (above
    any pixel) so that binarize() yields all-false.
    """
    hist = np.bincount(map.data.ravel(), minlength=256).astype(np.float64)
    total = hist.sum()
    values = np.arange(256, dtype=np.float64)
    weighted = hist * values
    # Class 0 holds values < t for t in 0..255 (t=0 -> empty class 0).
    c0 = np.concatenate([[0.0], np.cumsum(hist)[:-1]])
    s0 = np.concatenate([[0.0], np.cumsum(weighted)[:-1]])
    c1 = total - c0
    s1 = weighted.sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = np.where(c0 > 0, s0 / c0, 0.0)
        mu1 = np.where(c1 > 0, s1 / c1, 0.0)
    sigma_b = (c0 / total) * (c1 / total) * (mu0 - mu1) ** 2
    best = int(np.argmax(sigma_b))
    if sigma_b[best] <= 0.0:
        return 256
    return best


def binarize(map: MotionMap, method: int | str = "otsu") -> BinaryMap:
    """Threshold a motion map; ``method`` is a fixed threshold in 0..255 or "otsu"."""
    if isinstance(method, str):
        if method != "otsu":
            raise ValueError(f"unknown binarize method {method!r}")
        threshold = otsu_threshold(map)
    else:
        threshold = int(method)
        if not 0 <= threshold <= 255:
            raise ValueError(f"fixed threshold must be in 0..255, got {threshold}")
    return BinaryMap(map.data >= threshold, source=map)


def connected_components(binary: BinaryMap, connectivity: int = 8) -> list[Blob]:
    """Maximal connected true-pixel sets, in raster order of bbox top-left.

    Mean intensity is measured on the originating motion map; a bare mask
    without a source scores foreground pixels as 255.
    """
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    structure = _STRUCT_8 if connectivity == 8 else _STRUCT_4
    labels, count = ndimage.label(binary.data, structure=structure)
    if count == 0:
        return []
    if binary.source is not None:
        intensity = binary.source.data
    else:
        intensity = np.where(binary.data, 255, 0).astype(np.uint8)
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=count + 1)
    sums = np.bincount(flat, weights=intensity.ravel().astype(np.float64), minlength=count + 1)
    blobs = []
    for label, sl in enumerate(ndimage.find_objects(labels), start=1):
        bbox = BoundingBox(float(sl[1].start), float(sl[0].start), float(sl[1].stop), float(sl[0].stop))
        blobs.append(
            Blob(bbox=bbox, area=int(areas[label]), mean_intensity=float(sums[label] / areas[label]))
        )
    blobs.sort(key=lambda b: (b.bbox.y1, b.bbox.x1))
    return blobs


def blobs_to_detections(
    blobs: list[Blob],
    width: int,
    height: int,
    min_area: int = 4,
    max_area: int = 1024,
    pad: int = 2,
    border_margin: int = 8,
    frame_index: int = 0,
) -> list[Detection]:
    """Filter blobs by area and border contact, pad boxes, and score them.

    Blobs touching the ``border_margin`` band are dropped (warp borders leave
    uncovered strips that difference as spurious motion). Kept boxes grow by
    ``pad`` on each side, clamped to the frame; score = mean_intensity / 255.
    """
    if min_area > max_area:
        raise ValueError("min_area must be <= max_area")
    out = []
    for blob in blobs:
        if not min_area <= blob.area <= max_area:
            continue
        b = blob.bbox
        if (
            b.x1 < border_margin
            or b.y1 < border_margin
            or b.x2 > width - border_margin
            or b.y2 > height - border_margin
        ):
            continue
        padded = BoundingBox(
            max(b.x1 - pad, 0.0),
            max(b.y1 - pad, 0.0),
            min(b.x2 + pad, float(width)),
            min(b.y2 + pad, float(height)),
        )
        out.append(Detection(frame=frame_index, bbox=padded, score=blob.mean_intensity / 255.0))
    return out
