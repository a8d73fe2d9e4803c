"""Synthetic moving-camera sequences with exact ground truth.

A static multi-octave value-noise canvas is sampled per frame through an
accumulated camera homography, small bright/dark disks follow linear world
trajectories, and optional Gaussian photometric noise is added last. All
randomness is derived from coordinate hashes of the seed, so output is
bit-identical across runs and thread counts. Ground truth (per-frame target
boxes, frame-to-frame homographies, camera matrices) is exact by
construction, which makes these sequences usable as an end-to-end oracle
for the alignment and differencing stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .boxes import BoundingBox, GroundTruth
from .imgcore import GrayFrame, write_gray

_MAX_CANVAS_PIXELS = 64_000_000


@dataclass(frozen=True)
class BackgroundSpec:
    """Multi-octave value noise: octave o has lattice spacing base_scale/2^o
    and amplitude 2^-o; contrast scales deviation from mid-gray."""

    octaves: int = 4
    base_scale: float = 32.0
    contrast: float = 0.7

    def __post_init__(self):
        if self.octaves < 1:
            raise ValueError("octaves must be >= 1")
        if self.base_scale / 2 ** (self.octaves - 1) < 1.0:
            raise ValueError("finest octave lattice spacing must be >= 1 pixel")


@dataclass(frozen=True)
class CameraPath:
    """Constant per-frame step of the image->world homography."""

    translation: tuple[float, float] = (0.0, 0.0)
    rotation_deg: float = 0.0
    zoom: float = 1.0
    skew: tuple[float, float] = (0.0, 0.0)

    def step_matrix(self) -> np.ndarray:
        th = math.radians(self.rotation_deg)
        z = self.zoom
        c, s = z * math.cos(th), z * math.sin(th)
        tx, ty = self.translation
        px, py = self.skew
        return np.array([[c, -s, tx], [s, c, ty], [px, py, 1.0]])


@dataclass(frozen=True)
class TargetSpec:
    size: float = 8.0
    velocity: tuple[float, float] = (0.0, 0.0)
    start: tuple[float, float] = (0.0, 0.0)
    intensity_offset: int = 60

    def __post_init__(self):
        if self.size <= 0:
            raise ValueError("target size must be > 0")
        if not -255 <= self.intensity_offset <= 255:
            raise ValueError("intensity_offset must be in -255..255")


@dataclass(frozen=True)
class SynthConfig:
    width: int
    height: int
    num_frames: int
    background: BackgroundSpec = BackgroundSpec()
    camera: CameraPath = CameraPath()
    targets: tuple[TargetSpec, ...] = ()
    noise_sigma: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("frame must be at least 8x8")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass
class SynthSequence:
    """Rendered frames plus exact ground truth.

    ``gt_homographies[t]`` maps frame-t pixel coordinates to frame-(t+1)
    pixel coordinates. ``camera_matrices[t]`` maps frame-t pixels to world
    coordinates; ``target_world[j, t]`` is target j's world center at t.
    """

    frames: list[GrayFrame]
    gt_boxes: list[list[GroundTruth]]
    gt_homographies: list[np.ndarray]
    camera_matrices: list[np.ndarray] = field(default_factory=list)
    target_world: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 2)))


def _mix64(h: np.ndarray) -> np.ndarray:
    h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return h ^ (h >> np.uint64(31))


def _hash01(ix: np.ndarray, iy: np.ndarray, salt: int) -> np.ndarray:
    """Deterministic uniform [0, 1) value per integer lattice coordinate."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(salt & 0xFFFFFFFFFFFFFFFF)
        h = _mix64(h)
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _salt(seed: int, stream: int, extra: int = 0) -> int:
    return (seed * 0x9E3779B97F4A7C15 + stream * 0xC2B2AE3D27D4EB4F + extra * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF


def _value_noise(wx: np.ndarray, wy: np.ndarray, bg: BackgroundSpec, seed: int) -> np.ndarray:
    """Normalized [0, 1) multi-octave value noise at world coordinates."""
    total = np.zeros_like(wx)
    norm = 0.0
    for o in range(bg.octaves):
        spacing = bg.base_scale / 2**o
        amp = 0.5**o
        u = wx / spacing
        v = wy / spacing
        i0 = np.floor(u)
        j0 = np.floor(v)
        fu = u - i0
        fv = v - j0
        salt = _salt(seed, 1, o)
        n00 = _hash01(i0, j0, salt)
        n10 = _hash01(i0 + 1, j0, salt)
        n01 = _hash01(i0, j0 + 1, salt)
        n11 = _hash01(i0 + 1, j0 + 1, salt)
        top = n00 * (1 - fu) + n10 * fu
        bot = n01 * (1 - fu) + n11 * fu
        total += amp * (top * (1 - fv) + bot * fv)
        norm += amp
    return total / norm


def _gauss_noise(shape: tuple[int, int], seed: int, frame: int) -> np.ndarray:
    ys, xs = np.indices(shape)
    u1 = _hash01(xs, ys, _salt(seed, 2, frame))
    u2 = _hash01(xs, ys, _salt(seed, 3, frame))
    u1 = np.maximum(u1, 1e-300)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)


def _project(m: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    return (
        (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / d,
        (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / d,
    )


def _bilinear_grid(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = img.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2)
    fx = x - x0
    fy = y - y0
    return (
        img[y0, x0] * (1 - fx) * (1 - fy)
        + img[y0, x0 + 1] * fx * (1 - fy)
        + img[y0 + 1, x0] * (1 - fx) * fy
        + img[y0 + 1, x0 + 1] * fx * fy
    )


def generate(config: SynthConfig) -> SynthSequence:
    """Render a sequence; deterministic per seed.

    Raises ValueError when a target's rendered disk touches or leaves the
    frame at any point of its path, or when the camera path sweeps an
    implausibly large canvas.
    """
    w, h, n = config.width, config.height, config.num_frames
    step = config.camera.step_matrix()
    cams = [np.eye(3)]
    for _ in range(n - 1):
        c = cams[-1] @ step
        cams.append(c / c[2, 2])

    corners_x = np.array([0.0, w - 1.0, 0.0, w - 1.0])
    corners_y = np.array([0.0, 0.0, h - 1.0, h - 1.0])
    min_x = min_y = np.inf
    max_x = max_y = -np.inf
    for cam in cams:
        cx, cy = _project(cam, corners_x, corners_y)
        min_x, max_x = min(min_x, cx.min()), max(max_x, cx.max())
        min_y, max_y = min(min_y, cy.min()), max(max_y, cy.max())
    origin_x = math.floor(min_x) - 3
    origin_y = math.floor(min_y) - 3
    canvas_w = math.ceil(max_x) - origin_x + 4
    canvas_h = math.ceil(max_y) - origin_y + 4
    if canvas_w * canvas_h > _MAX_CANVAS_PIXELS:
        raise ValueError(
            f"camera path sweeps a {canvas_w}x{canvas_h} canvas; reduce motion or frame count"
        )

    cy_grid, cx_grid = np.indices((canvas_h, canvas_w), dtype=np.float64)
    noise = _value_noise(cx_grid + origin_x, cy_grid + origin_y, config.background, config.rng_seed)
    canvas = np.clip(255.0 * (0.5 + config.background.contrast * (noise - 0.5)), 0.0, 255.0)

    targets = config.targets
    target_world = np.zeros((len(targets), n, 2))
    for j, t in enumerate(targets):
        steps = np.arange(n, dtype=np.float64)
        target_world[j, :, 0] = t.start[0] + t.velocity[0] * steps
        target_world[j, :, 1] = t.start[1] + t.velocity[1] * steps

    py_grid, px_grid = np.indices((h, w), dtype=np.float64)
    frames: list[GrayFrame] = []
    gt_boxes: list[list[GroundTruth]] = []
    for t in range(n):
        wx, wy = _project(cams[t], px_grid, py_grid)
        val = _bilinear_grid(canvas, wx - origin_x, wy - origin_y)

        boxes: list[GroundTruth] = []
        for j, target in enumerate(targets):
            d = np.hypot(wx - target_world[j, t, 0], wy - target_world[j, t, 1])
            alpha = np.clip(target.size / 2.0 + 0.5 - d, 0.0, 1.0)
            if alpha.max() <= 0.0:
                raise ValueError(f"target {j} leaves the frame at frame {t}")
            touched = alpha > 0.0
            if touched[0].any() or touched[-1].any() or touched[:, 0].any() or touched[:, -1].any():
                raise ValueError(f"target {j} leaves the frame at frame {t}")
            core = alpha > 0.5
            if not core.any():
                raise ValueError(f"target {j} renders no solid pixels at frame {t}")
            rows = np.flatnonzero(core.any(axis=1))
            cols = np.flatnonzero(core.any(axis=0))
            boxes.append(
                GroundTruth(
                    frame=t,
                    bbox=BoundingBox(
                        float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)
                    ),
                )
            )
            target_val = np.clip(val + target.intensity_offset, 0.0, 255.0)
            val = val * (1.0 - alpha) + target_val * alpha

        if config.noise_sigma > 0:
            val = val + config.noise_sigma * _gauss_noise((h, w), config.rng_seed, t)
        data = np.clip(np.floor(val + 0.5), 0.0, 255.0).astype(np.uint8)
        frames.append(GrayFrame(data, index=t))
        gt_boxes.append(boxes)

    pair_h = np.linalg.inv(step)
    pair_h = pair_h / pair_h[2, 2]
    gt_homographies = [pair_h.copy() for _ in range(n - 1)]
    return SynthSequence(
        frames=frames,
        gt_boxes=gt_boxes,
        gt_homographies=gt_homographies,
        camera_matrices=cams,
        target_world=target_world,
    )


def export_sequence(seq: SynthSequence, out_dir: Path | str) -> None:
    """Write frames (%06d.pgm), YOLO boxes (%06d.txt, only for frames that
    have targets), and pair homographies (%06d.hom, frame t -> t+1)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .ingest import write_homography, write_yolo_boxes

    for frame in seq.frames:
        write_gray(frame, out / f"{frame.index:06d}.pgm")
    for t, boxes in enumerate(seq.gt_boxes):
        if boxes:
            frame = seq.frames[t]
            write_yolo_boxes(out / f"{t:06d}.txt", [g.bbox for g in boxes], frame.width, frame.height)
    for t, hom in enumerate(seq.gt_homographies):
        write_homography(out / f"{t:06d}.hom", hom)


def config_from_dict(raw: dict) -> SynthConfig:
    """Build a config from parsed JSON, naming any missing/unknown field."""
    if not isinstance(raw, dict):
        raise ValueError("synth config must be a JSON object")
    for req in ("width", "height", "num_frames"):
        if req not in raw:
            raise ValueError(f"synth config missing required field: {req!r}")
    known = {
        "width",
        "height",
        "num_frames",
        "background",
        "camera",
        "targets",
        "noise_sigma",
        "rng_seed",
    }
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"synth config has unknown fields: {sorted(unknown)}")

    def build(cls, src: dict, what: str):
        extra = set(src) - {f for f in cls.__dataclass_fields__}
        if extra:
            raise ValueError(f"synth config {what} has unknown fields: {sorted(extra)}")
        kwargs = {
            k: tuple(v) if isinstance(v, list) else v for k, v in src.items()
        }
        return cls(**kwargs)

    return SynthConfig(
        width=raw["width"],
        height=raw["height"],
        num_frames=raw["num_frames"],
        background=build(BackgroundSpec, raw.get("background", {}), "background"),
        camera=build(CameraPath, raw.get("camera", {}), "camera"),
        targets=tuple(build(TargetSpec, t, "target") for t in raw.get("targets", [])),
        noise_sigma=raw.get("noise_sigma", 0.0),
        rng_seed=raw.get("rng_seed", 0),
    )


def config_to_dict(config: SynthConfig) -> dict:
    return asdict(config)


def preset(name: str) -> SynthConfig:
    """Named sequence presets.

    ``tiny-fast`` is the challenge setup used by the end-to-end checks: one
    8x8 px disk moving 3 px/frame against a panning, slowly rotating camera
    (just over 4 px/frame of background motion) with sigma-2 photometric
    noise. ``static`` is a noiseless, motionless, targetless scene.
    """
    if name == "tiny-fast":
        return SynthConfig(
            width=640,
            height=480,
            num_frames=200,
            background=BackgroundSpec(octaves=4, base_scale=32.0, contrast=0.7),
            camera=CameraPath(translation=(4.0, 0.8), rotation_deg=0.02),
            targets=(TargetSpec(size=8.0, velocity=(3.0, 0.0), start=(600.0, 400.0), intensity_offset=60),),
            noise_sigma=2.0,
            rng_seed=7,
        )
    if name == "static":
        return SynthConfig(
            width=320,
            height=240,
            num_frames=30,
            background=BackgroundSpec(octaves=4, base_scale=24.0, contrast=0.7),
            camera=CameraPath(),
            targets=(),
            noise_sigma=0.0,
            rng_seed=11,
        )
    raise ValueError(f"unknown preset {name!r} (available: tiny-fast, static)")
