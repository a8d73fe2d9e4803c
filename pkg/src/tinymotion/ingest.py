"""On-disk formats: frame sequences, YOLO boxes, detections JSONL, homographies.

Ground truth uses the YOLO text convention (one ``class cx cy w h`` line per
box, center/size normalized to frame dimensions) so real drone datasets drop
in unchanged. Detections are JSON Lines with pixel-coordinate boxes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .boxes import BoundingBox, Detection, GroundTruth

FRAME_EXTENSIONS = (".pgm", ".png", ".ppm")


class DataError(ValueError):
    """Malformed or missing input data (CLI exit code 2)."""


def list_frames(seq_dir: Path | str) -> list[tuple[int, Path]]:
    """Numbered frame files in a sequence directory, ordered by number."""
    d = Path(seq_dir)
    if not d.is_dir():
        raise DataError(f"sequence directory not found: {d}")
    frames = []
    for p in d.iterdir():
        if p.suffix.lower() in FRAME_EXTENSIONS and p.stem.isdigit():
            frames.append((int(p.stem), p))
    frames.sort()
    if not frames:
        raise DataError(f"no numbered frames (*.pgm/*.png/*.ppm) in {d}")
    for (a, pa), (b, pb) in zip(frames, frames[1:]):
        if a == b:
            raise DataError(f"duplicate frame number {a}: {pa.name} and {pb.name}")
    return frames


def write_detections(path: Path | str, dets: list[Detection]) -> None:
    """JSON Lines, one object per detection, sorted by (frame, -score)."""
    ordered = sorted(enumerate(dets), key=lambda item: (item[1].frame, -item[1].score, item[0]))
    with open(path, "w", encoding="ascii") as fh:
        for _, d in ordered:
            fh.write(
                json.dumps({"frame": d.frame, "bbox": list(d.bbox), "score": d.score}) + "\n"
            )


def read_detections(path: Path | str) -> list[Detection]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"detections file not found: {p}")
    out = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(
                Detection(
                    frame=int(obj["frame"]),
                    bbox=BoundingBox(*(float(v) for v in obj["bbox"])),
                    score=float(obj["score"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{p}:{lineno}: malformed detection line ({exc})") from exc
    return out


def write_yolo_boxes(path: Path | str, boxes: list[BoundingBox], width: int, height: int) -> None:
    lines = []
    for b in boxes:
        cx = (b.x1 + b.x2) / 2.0 / width
        cy = (b.y1 + b.y2) / 2.0 / height
        bw = (b.x2 - b.x1) / width
        bh = (b.y2 - b.y1) / height
        lines.append(f"0 {cx:.6f} {cy:.6f} {bw:.6f} {bh:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_yolo_boxes(path: Path | str, width: int, height: int, frame: int) -> list[GroundTruth]:
    """De-normalize one YOLO annotation file to pixel-coordinate ground truth."""
    p = Path(path)
    out = []
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise DataError(f"{p}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            _, cx, cy, bw, bh = (float(v) for v in parts)
        except ValueError as exc:
            raise DataError(f"{p}:{lineno}: non-numeric field ({exc})") from exc
        x1 = (cx - bw / 2.0) * width
        y1 = (cy - bh / 2.0) * height
        out.append(
            GroundTruth(frame=frame, bbox=BoundingBox(x1, y1, x1 + bw * width, y1 + bh * height))
        )
    return out


def read_gt_dir(gt_dir: Path | str) -> tuple[list[GroundTruth], dict[int, tuple[int, int]]]:
    """All ground truth in a sequence directory, de-normalized per frame.

    Returns (ground truths, {frame: (width, height)}). Frames without an
    annotation file simply contribute no boxes.
    """
    from .imgcore import load_frame

    gts: list[GroundTruth] = []
    dims: dict[int, tuple[int, int]] = {}
    for index, frame_path in list_frames(gt_dir):
        frame = load_frame(frame_path)
        dims[index] = (frame.width, frame.height)
        ann = frame_path.with_suffix(".txt")
        if ann.is_file():
            gts.extend(read_yolo_boxes(ann, frame.width, frame.height, index))
    return gts, dims


def write_homography(path: Path | str, h: np.ndarray) -> None:
    """Nine whitespace-separated decimals, row-major."""
    values = np.asarray(h, dtype=np.float64).reshape(9)
    Path(path).write_text(" ".join(f"{v:.17g}" for v in values) + "\n")


def read_homography(path: Path | str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"homography file not found: {p}")
    parts = p.read_text().split()
    if len(parts) != 9:
        raise DataError(f"{p}: expected 9 values, got {len(parts)}")
    try:
        return np.array([float(v) for v in parts]).reshape(3, 3)
    except ValueError as exc:
        raise DataError(f"{p}: non-numeric homography value ({exc})") from exc


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
