"""Numba kernels for the per-pixel/per-point hot paths.

Everything here is deterministic: no fastmath, and parallel loops only ever
write disjoint output slots, so results are byte-identical for any thread
count. Kernels are cached on disk to amortize JIT cost across runs.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

# 5-tap Gaussian, sigma = 1.0, normalized.
_G = np.exp(-0.5 * np.arange(-2.0, 3.0) ** 2)
GAUSS5 = (_G / _G.sum()).astype(np.float64)


@njit(cache=True)
def _clamp(v: int, lo: int, hi: int) -> int:
    if v < lo:
        return lo
    if v > hi:
        return hi
    return v


@njit(cache=True, parallel=True)
def gauss5_decimate(img: np.ndarray, kern: np.ndarray) -> np.ndarray:
    """Separable 5-tap Gaussian blur (replicate border) then 2x decimation.

    The horizontal pass is evaluated only at the surviving (even) columns.
    """
    h, w = img.shape
    oh, ow = h // 2, w // 2
    tmp = np.empty((h, ow), np.float32)
    for y in prange(h):
        for ox in range(ow):
            x = 2 * ox
            acc = 0.0
            for t in range(5):
                acc += kern[t] * img[y, _clamp(x + t - 2, 0, w - 1)]
            tmp[y, ox] = acc
    out = np.empty((oh, ow), np.uint8)
    for oy in prange(oh):
        y = 2 * oy
        for ox in range(ow):
            acc = 0.0
            for t in range(5):
                acc += kern[t] * tmp[_clamp(y + t - 2, 0, h - 1), ox]
            v = math.floor(acc + 0.5)
            if v < 0.0:
                v = 0.0
            elif v > 255.0:
                v = 255.0
            out[oy, ox] = np.uint8(v)
    return out


@njit(cache=True, inline="always")
def _bilinear(img: np.ndarray, x: float, y: float) -> float:
    # Caller guarantees 0 <= x <= w-1, 0 <= y <= h-1.
    h, w = img.shape
    x0 = int(math.floor(x))
    y0 = int(math.floor(y))
    if x0 > w - 2:
        x0 = w - 2
    if y0 > h - 2:
        y0 = h - 2
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1.0 - fx) * (1.0 - fy)
        + img[y0, x0 + 1] * fx * (1.0 - fy)
        + img[y0 + 1, x0] * (1.0 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )


@njit(cache=True, parallel=True)
def warp_homography(src: np.ndarray, hinv: np.ndarray) -> np.ndarray:
    """Inverse-map perspective warp with bilinear sampling; outside -> 0."""
    h, w = src.shape
    out = np.zeros((h, w), np.uint8)
    xmax = w - 1.0
    ymax = h - 1.0
    for y in prange(h):
        # Source coordinates are projective-linear in x; accumulate per row.
        nx = hinv[0, 1] * y + hinv[0, 2]
        ny = hinv[1, 1] * y + hinv[1, 2]
        nd = hinv[2, 1] * y + hinv[2, 2]
        for x in range(w):
            if abs(nd) >= 1e-12:
                sx = nx / nd
                sy = ny / nd
                if 0.0 <= sx <= xmax and 0.0 <= sy <= ymax:
                    x0 = int(sx)
                    y0 = int(sy)
                    if x0 > w - 2:
                        x0 = w - 2
                    if y0 > h - 2:
                        y0 = h - 2
                    fx = sx - x0
                    fy = sy - y0
                    v = (
                        src[y0, x0] * (1.0 - fx) * (1.0 - fy)
                        + src[y0, x0 + 1] * fx * (1.0 - fy)
                        + src[y0 + 1, x0] * (1.0 - fx) * fy
                        + src[y0 + 1, x0 + 1] * fx * fy
                    )
                    v = math.floor(v + 0.5)
                    if v < 0.0:
                        v = 0.0
                    elif v > 255.0:
                        v = 255.0
                    out[y, x] = np.uint8(v)
            nx += hinv[0, 0]
            ny += hinv[1, 0]
            nd += hinv[2, 0]
    return out


@njit(cache=True, parallel=True)
def lk_level(
    prev_img: np.ndarray,
    next_img: np.ndarray,
    pts: np.ndarray,
    disp: np.ndarray,
    status: np.ndarray,
    resid: np.ndarray,
    half: int,
    max_iters: int,
    epsilon: float,
    min_eigen: float,
) -> None:
    """One pyramid level of iterative LK for all points (in-place update).

    ``pts`` are point coordinates at this level; ``disp`` holds the current
    displacement estimate and is refined in place. ``min_eigen`` applies to
    the spatial gradient matrix normalized by window pixel count (8-bit
    intensity scale).
    """
    h, w = prev_img.shape
    n = pts.shape[0]
    side = 2 * half + 1
    npix = side * side
    eig_scale = 1.0 / npix

    for i in prange(n):
        if not status[i]:
            continue
        px = pts[i, 0]
        py = pts[i, 1]
        # Template window (and its +/-1 gradient taps) must stay in frame.
        if px - half - 1.0 < 0.0 or px + half + 1.0 > w - 1.0 or py - half - 1.0 < 0.0 or py + half + 1.0 > h - 1.0:
            status[i] = False
            continue

        tmpl = np.empty((side, side), np.float64)
        gx = np.empty((side, side), np.float64)
        gy = np.empty((side, side), np.float64)
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        for wy in range(side):
            sy = py + wy - half
            for wx in range(side):
                sx = px + wx - half
                tmpl[wy, wx] = _bilinear(prev_img, sx, sy)
                dx = (_bilinear(prev_img, sx + 1.0, sy) - _bilinear(prev_img, sx - 1.0, sy)) * 0.5
                dy = (_bilinear(prev_img, sx, sy + 1.0) - _bilinear(prev_img, sx, sy - 1.0)) * 0.5
                gx[wy, wx] = dx
                gy[wy, wx] = dy
                a11 += dx * dx
                a12 += dx * dy
                a22 += dy * dy
        tr = a11 + a22
        det = a11 * a22 - a12 * a12
        disc = tr * tr - 4.0 * det
        if disc < 0.0:
            disc = 0.0
        min_eig = 0.5 * (tr - math.sqrt(disc)) * eig_scale
        if min_eig < min_eigen or det <= 0.0:
            status[i] = False
            continue

        vx = disp[i, 0]
        vy = disp[i, 1]
        converged = False
        for _ in range(max_iters):
            cx = px + vx
            cy = py + vy
            if cx - half < 0.0 or cx + half > w - 1.0 or cy - half < 0.0 or cy + half > h - 1.0:
                status[i] = False
                break
            b1 = 0.0
            b2 = 0.0
            for wy in range(side):
                for wx in range(side):
                    dt = tmpl[wy, wx] - _bilinear(next_img, cx + wx - half, cy + wy - half)
                    b1 += dt * gx[wy, wx]
                    b2 += dt * gy[wy, wx]
            # Solve the 2x2 normal equations.
            ux = (a22 * b1 - a12 * b2) / det
            uy = (a11 * b2 - a12 * b1) / det
            vx += ux
            vy += uy
            if math.sqrt(ux * ux + uy * uy) <= epsilon:
                converged = True
                break
        if not status[i]:
            continue
        if not converged:
            status[i] = False
            continue

        cx = px + vx
        cy = py + vy
        if cx - half < 0.0 or cx + half > w - 1.0 or cy - half < 0.0 or cy + half > h - 1.0:
            status[i] = False
            continue
        err = 0.0
        for wy in range(side):
            for wx in range(side):
                err += abs(tmpl[wy, wx] - _bilinear(next_img, cx + wx - half, cy + wy - half))
        disp[i, 0] = vx
        disp[i, 1] = vy
        resid[i] = err / npix


def warm_up() -> None:
    """Force-compile all kernels on a tiny input (first call is slow)."""
    img = np.zeros((8, 8), np.float32)
    img[3:5, 3:5] = 200.0
    gauss5_decimate(img, GAUSS5)
    warp_homography(np.zeros((4, 4), np.uint8), np.eye(3))
    pts = np.array([[4.0, 4.0]])
    lk_level(img, img, pts, np.zeros((1, 2)), np.ones(1, np.bool_), np.zeros(1), 2, 1, 0.01, 0.0)
