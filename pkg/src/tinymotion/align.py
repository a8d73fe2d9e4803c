"""Ego-motion compensation between neighboring frames.

Grid keypoints on the moving frame are tracked into the reference frame with
pyramidal Lucas-Kanade, a homography is fit robustly with seeded RANSAC and
normalized DLT, and the moving frame is warped into the reference frame's
coordinates. Textureless or degenerate inputs surface an AlignmentError so
callers can degrade gracefully instead of producing garbage motion maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .imgcore import GrayFrame


class AlignmentError(RuntimeError):
    """Frame alignment could not be established (too few reliable tracks)."""


@dataclass(frozen=True)
class LkParams:
    """Pyramidal Lucas-Kanade tracker settings.

    ``min_eigen`` thresholds the minimum eigenvalue of the window gradient
    matrix, normalized by window pixel count (8-bit intensity scale), so it
    is comparable across window sizes. Constant windows score exactly 0.
    """

    pyramid_levels: int = 3
    window: int = 21
    max_iters: int = 30
    epsilon: float = 0.01
    min_eigen: float = 1e-4

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class RansacParams:
    max_iters: int = 2000
    inlier_threshold: float = 3.0
    min_inliers: int = 12
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.inlier_threshold > 0:
            raise ValueError("inlier_threshold must be > 0")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


@dataclass(frozen=True)
class GridSpec:
    rows: int = 16
    cols: int = 16
    margin: int = 16


@dataclass
class TrackResult:
    """Per-point LK output: tracked positions, success flags, window residuals."""

    points: np.ndarray  # (N, 2) float64, destination-frame coordinates
    status: np.ndarray  # (N,) bool
    residual: np.ndarray  # (N,) float64, mean abs intensity error at solution


def grid_keypoints(width: int, height: int, rows: int, cols: int, margin: int) -> np.ndarray:
    """Uniform (rows x cols) point grid inset by ``margin`` pixels.

    Returns an (rows*cols, 2) float64 array of (x, y), row-major. A single
    row/column anchors at the inset origin.
    """
    if rows < 1 or cols < 1:
        raise ValueError("rows and cols must be >= 1")
    if margin < 0:
        raise ValueError("margin must be >= 0")
    if 2 * margin >= min(width, height):
        raise ValueError(f"margin {margin} too large for {width}x{height} frame")
    xs = margin + np.arange(cols) * ((width - 1 - 2 * margin) / max(cols - 1, 1))
    ys = margin + np.arange(rows) * ((height - 1 - 2 * margin) / max(rows - 1, 1))
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()]).astype(np.float64)


def build_pyramid(frame: GrayFrame, levels: int) -> list[GrayFrame]:
    """Gaussian pyramid: level 0 is the input, each next level is 5x5-blurred
    (sigma 1.0) and decimated by 2 with floor dimensions."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(frame.width, frame.height) < 2 ** (levels - 1):
        raise ValueError(
            f"frame {frame.width}x{frame.height} too small for {levels} pyramid levels"
        )
    out = [frame]
    cur = frame.data
    for _ in range(levels - 1):
        cur = _kernels.gauss5_decimate(cur.astype(np.float32), _kernels.GAUSS5)
        out.append(GrayFrame(cur, index=frame.index))
    return out


def float_pyramid(frame: GrayFrame, levels: int) -> list[np.ndarray]:
    """build_pyramid levels as float32 arrays, the form lk_track consumes.

    Precompute these when tracking repeatedly against the same frame.
    """
    return [lvl.data.astype(np.float32) for lvl in build_pyramid(frame, levels)]


def lk_track(
    prev: GrayFrame,
    next: GrayFrame,
    points: np.ndarray,
    params: LkParams,
    prev_pyramid: list[np.ndarray] | None = None,
    next_pyramid: list[np.ndarray] | None = None,
) -> TrackResult:
    """Track ``points`` from ``prev`` into ``next`` with coarse-to-fine LK.

    A point fails (status False) when its gradient matrix is too weak at any
    level, when the window leaves the frame, or when the iteration does not
    converge within ``max_iters``. Pass pyramids from float_pyramid() to
    avoid rebuilding them across calls.
    """
    if (prev.width, prev.height) != (next.width, next.height):
        raise ValueError("frame dimension mismatch")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        raise ValueError("empty point list")
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (N, 2), got {pts.shape}")
    if (
        pts[:, 0].min() < 0
        or pts[:, 0].max() > prev.width - 1
        or pts[:, 1].min() < 0
        or pts[:, 1].max() > prev.height - 1
    ):
        raise ValueError("points outside frame")

    prev_pyr = prev_pyramid if prev_pyramid is not None else float_pyramid(prev, params.pyramid_levels)
    next_pyr = next_pyramid if next_pyramid is not None else float_pyramid(next, params.pyramid_levels)
    if len(prev_pyr) != params.pyramid_levels or len(next_pyr) != params.pyramid_levels:
        raise ValueError("pyramid level count does not match params.pyramid_levels")

    n = pts.shape[0]
    status = np.ones(n, dtype=np.bool_)
    resid = np.zeros(n, dtype=np.float64)
    disp = np.zeros((n, 2), dtype=np.float64)
    half = params.window // 2

    for level in range(params.pyramid_levels - 1, -1, -1):
        scale = 1.0 / (2.0**level)
        _kernels.lk_level(
            prev_pyr[level],
            next_pyr[level],
            pts * scale,
            disp,
            status,
            resid,
            half,
            params.max_iters,
            params.epsilon,
            params.min_eigen,
        )
        if level > 0:
            disp *= 2.0

    tracked = pts + disp
    return TrackResult(points=tracked, status=status, residual=resid)


def _normalize_points(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """Hartley normalization: centroid to origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        return None
    s = math.sqrt(2.0) / dist
    t = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    normed = (pts - centroid) * s
    return normed, t


def _dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray | None:
    """Normalized DLT fit of a homography (least squares for n > 4).

    The null vector of the stacked 2n x 9 system is taken from the smallest
    eigenvector of the 9x9 normal matrix: equivalent to the SVD solution but
    independent of BLAS thread pools, which this hot path must not wake.
    Returns None for degenerate configurations.
    """
    ns = _normalize_points(src)
    nd = _normalize_points(dst)
    if ns is None or nd is None:
        return None
    (sp, ts), (dp, td) = ns, nd
    n = sp.shape[0]
    a = np.zeros((2 * n, 9))
    x, y = sp[:, 0], sp[:, 1]
    u, v = dp[:, 0], dp[:, 1]
    one = np.ones(n)
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = one
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = one
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v
    if n == 4:
        # Minimal fits want full SVD precision; an 8x9 SVD is cheap and,
        # unlike big-matrix SVDs, never wakes BLAS worker threads.
        _, sv, vt = np.linalg.svd(a)
        if sv[6] < 1e-9 * max(sv[0], 1e-300):
            return None
        hn = vt[-1].reshape(3, 3)
    else:
        evals, evecs = np.linalg.eigh(a.T @ a)
        # Eigenvalues are squared singular values; rank < 8 (collinear or
        # coincident points) leaves the solution ambiguous.
        if evals[1] < 1e-18 * max(evals[-1], 1e-300):
            return None
        hn = evecs[:, 0].reshape(3, 3)
    h = np.linalg.inv(td) @ hn @ ts
    if abs(h[2, 2]) < 1e-12:
        return None
    h = h / h[2, 2]
    if abs(np.linalg.det(h)) < 1e-12:
        return None
    return h


def _project(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    q = pts @ h[:, :2].T + h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        out = q[:, :2] / q[:, 2:3]
    out[~np.isfinite(out).all(axis=1)] = np.inf
    return out


def _symmetric_error(h: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Average of forward and backward reprojection distances, in pixels."""
    hinv = np.linalg.inv(h)
    fwd = np.sqrt(((_project(h, src) - dst) ** 2).sum(axis=1))
    bwd = np.sqrt(((_project(hinv, dst) - src) ** 2).sum(axis=1))
    err = 0.5 * (fwd + bwd)
    err[~np.isfinite(err)] = np.inf
    return err


def _has_collinear_triple(pts: np.ndarray, eps: float = 1e-8) -> bool:
    scale = max(np.abs(pts).max(), 1.0)
    for i in range(2):
        for j in range(i + 1, 3):
            for k in range(j + 1, 4):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                if abs(u[0] * v[1] - u[1] * v[0]) < eps * scale * scale:
                    return True
    return False


def estimate_homography_ransac(
    src: np.ndarray, dst: np.ndarray, params: RansacParams
) -> tuple[np.ndarray, np.ndarray]:
    """RANSAC homography with normalized-DLT fits.

    Samples minimal 4-point sets, keeps the largest consensus under the
    symmetric reprojection threshold, then refits on all consensus inliers.
    Deterministic for a fixed ``rng_seed``. Returns (3x3 homography with
    h[2,2] == 1, boolean inlier mask).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise ValueError("src and dst must be equal-shape (N, 2) arrays")
    n = src.shape[0]
    if n < 4:
        raise AlignmentError(f"insufficient correspondences: {n} < 4")

    rng = np.random.default_rng(params.rng_seed)
    best_count = 0
    best_mask: np.ndarray | None = None
    # Draw until a 4-point consensus makes further improvement unlikely.
    confidence = 0.9999
    needed = params.max_iters
    it = 0
    while it < min(params.max_iters, needed):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        if _has_collinear_triple(src[idx]) or _has_collinear_triple(dst[idx]):
            continue
        h = _dlt(src[idx], dst[idx])
        if h is None:
            continue
        mask = _symmetric_error(h, src, dst) <= params.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            ratio = count / n
            hit = ratio**4
            if hit >= 1.0:
                break
            if hit > 0.0:
                needed = min(
                    params.max_iters, int(math.ceil(math.log(1.0 - confidence) / math.log(1.0 - hit)))
                )

    if best_mask is None or best_count < max(params.min_inliers, 4):
        raise AlignmentError(
            f"alignment failure: consensus {best_count} below min_inliers {params.min_inliers}"
        )
    h = _dlt(src[best_mask], dst[best_mask])
    if h is None:
        raise AlignmentError("alignment failure: degenerate inlier set")
    return h, best_mask


def warp_perspective(frame: GrayFrame, h: np.ndarray) -> GrayFrame:
    """Warp ``frame`` by homography ``h`` via inverse mapping.

    Each output pixel bilinearly samples the source at ``h^-1 (x, y, 1)``;
    source locations outside the frame produce 0.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    if abs(np.linalg.det(h)) < 1e-12:
        raise ValueError("singular homography")
    hinv = np.linalg.inv(h)
    out = _kernels.warp_homography(frame.data, np.ascontiguousarray(hinv))
    return GrayFrame(out, index=frame.index)


def align_frame(
    reference: GrayFrame,
    moving: GrayFrame,
    lk: LkParams = LkParams(),
    ransac: RansacParams = RansacParams(),
    grid: GridSpec = GridSpec(),
    reference_pyramid: list[np.ndarray] | None = None,
    moving_pyramid: list[np.ndarray] | None = None,
) -> tuple[GrayFrame, np.ndarray]:
    """Warp ``moving`` into ``reference`` coordinates.

    Returns (aligned frame, homography mapping moving -> reference).
    Raises AlignmentError when too few keypoints track or the RANSAC
    consensus is below ``ransac.min_inliers``.
    """
    if (reference.width, reference.height) != (moving.width, moving.height):
        raise ValueError("frame dimension mismatch")
    pts = grid_keypoints(moving.width, moving.height, grid.rows, grid.cols, grid.margin)
    tracks = lk_track(
        moving, reference, pts, lk, prev_pyramid=moving_pyramid, next_pyramid=reference_pyramid
    )
    ok = tracks.status
    if int(ok.sum()) < 4:
        raise AlignmentError(f"alignment failure: only {int(ok.sum())} keypoints tracked")
    h, _ = estimate_homography_ransac(pts[ok], tracks.points[ok], ransac)
    return warp_perspective(moving, h), h
