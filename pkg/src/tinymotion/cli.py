"""Command-line pipeline: diffmap, detect, eval, synth, bench.

Runs are reproducible: configuration comes from an optional JSON file with
flag overrides (flags win), RANSAC is seeded, and worker parallelism never
changes output bytes. Every diffmap/detect run writes a manifest recording
the config snapshot, per-frame status, stage timings, and input checksums.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 alignment failure rate
above 50% when --fail-on-degraded is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__, ingest
from .align import GridSpec, LkParams, RansacParams
from .boxes import Detection
from .evaluation import average_precision, throughput_bench
from .imgcore import GrayFrame, RgbFrame, load_frame, to_grayscale, write_gray
from .ingest import DataError
from .motiondiff import (
    MotionMap,
    StructuringElement,
    morph_close,
    morph_open,
    motion_map,
    three_frame_diff,
)
from .proposal import binarize, blobs_to_detections, connected_components
from .synth import config_from_dict, config_to_dict, export_sequence, generate, preset

_BENCH_MAX_CENTERS = 32


@dataclass(frozen=True)
class PipelineConfig:
    """Snapshot of every knob that affects diffmap/detect output."""

    k: int = 2
    mode: str = "three_frame"
    grid: GridSpec = GridSpec()
    lk: LkParams = LkParams()
    ransac: RansacParams = RansacParams()
    se: StructuringElement = StructuringElement()
    open_iterations: int = 1
    close_iterations: int = 1
    # Fixed default sits above the half-response "ghost" level of a moving
    # object (offset/2) so trailing/leading echoes never enter the boxes.
    threshold: int | str = 40
    min_area: int = 4
    max_area: int = 1024
    pad: int = 2
    border_margin: int = 8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode not in ("two_frame", "three_frame"):
            raise ValueError(f"mode must be two_frame or three_frame, got {self.mode!r}")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["threshold"] = self.threshold if isinstance(self.threshold, str) else int(self.threshold)
        return d


def _parse_threshold(value: str) -> int | str:
    if value == "otsu":
        return "otsu"
    if value.startswith("fixed:"):
        try:
            n = int(value[len("fixed:") :])
        except ValueError:
            raise DataError(f"invalid threshold {value!r}: expected otsu or fixed:N")
        if not 0 <= n <= 255:
            raise DataError(f"fixed threshold must be in 0..255, got {n}")
        return n
    raise DataError(f"invalid threshold {value!r}: expected otsu or fixed:N")


def _config_from_file(path: Path) -> PipelineConfig:
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    known = {
        "k", "mode", "grid", "lk", "ransac", "morphology",
        "threshold", "min_area", "max_area", "pad", "border_margin",
    }
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"{path}: unknown config fields: {sorted(unknown)}")
    morph = raw.get("morphology", {})
    threshold = raw.get("threshold", 40)
    if isinstance(threshold, str):
        threshold = _parse_threshold(threshold)
    try:
        return PipelineConfig(
            k=raw.get("k", 2),
            mode=raw.get("mode", "three_frame"),
            grid=GridSpec(**raw.get("grid", {})),
            lk=LkParams(**raw.get("lk", {})),
            ransac=RansacParams(**raw.get("ransac", {})),
            se=StructuringElement(
                shape=morph.get("shape", "square"), size=morph.get("size", 3)
            ),
            open_iterations=morph.get("open_iterations", 1),
            close_iterations=morph.get("close_iterations", 1),
            threshold=threshold,
            min_area=raw.get("min_area", 4),
            max_area=raw.get("max_area", 1024),
            pad=raw.get("pad", 2),
            border_margin=raw.get("border_margin", 8),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: invalid config ({exc})") from exc


def _resolve_config(args) -> PipelineConfig:
    cfg = _config_from_file(Path(args.config)) if args.config else PipelineConfig()
    updates: dict = {}
    if args.k is not None:
        updates["k"] = args.k
    if args.mode is not None:
        updates["mode"] = {"two": "two_frame", "three": "three_frame"}[args.mode]
    grid_updates = {}
    if args.grid is not None:
        try:
            rows, cols = (int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise DataError(f"invalid --grid {args.grid!r}: expected RxC, e.g. 16x16")
        grid_updates.update(rows=rows, cols=cols)
    if args.margin is not None:
        grid_updates["margin"] = args.margin
    if grid_updates:
        updates["grid"] = dataclasses.replace(cfg.grid, **grid_updates)
    if args.ransac_seed is not None:
        updates["ransac"] = dataclasses.replace(cfg.ransac, rng_seed=args.ransac_seed)
    if args.se_size is not None:
        updates["se"] = dataclasses.replace(cfg.se, size=args.se_size)
    if args.threshold is not None:
        updates["threshold"] = _parse_threshold(args.threshold)
    if args.min_area is not None:
        updates["min_area"] = args.min_area
    if args.max_area is not None:
        updates["max_area"] = args.max_area
    try:
        return dataclasses.replace(cfg, **updates)
    except ValueError as exc:
        raise DataError(f"invalid configuration: {exc}")


@dataclass
class _CenterResult:
    index: int
    status: str
    map: MotionMap
    detections: list[Detection] = field(default_factory=list)


def _map_bounded(fn, items, workers: int):
    """Order-preserving map with a bounded number of in-flight tasks."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) > workers + 4:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _make_loader(cache_size: int):
    @lru_cache(maxsize=cache_size)
    def load_gray(path_str: str) -> GrayFrame:
        frame = load_frame(path_str)
        if isinstance(frame, RgbFrame):
            frame = to_grayscale(frame)
        return frame

    return load_gray


def _run_pipeline(cfg: PipelineConfig, in_dir: Path, workers: int, want_detections: bool):
    """Stream motion maps (and optionally detections) over a sequence.

    Yields (frames, centers, results iterator); only a bounded window of
    frames is resident at any time.
    """
    frames = ingest.list_frames(in_dir)
    n = len(frames)
    need = 2 * cfg.k + 1 if cfg.mode == "three_frame" else cfg.k + 1
    if n < need:
        raise DataError(f"insufficient frames: {cfg.mode} with k={cfg.k} needs >= {need}, found {n}")
    last = n - cfg.k if cfg.mode == "three_frame" else n
    centers = list(range(cfg.k, last))
    loader = _make_loader(max(32, 4 * cfg.k + 8 * workers))

    def process(pos: int) -> _CenterResult:
        prev = loader(str(frames[pos - cfg.k][1]))
        cur = loader(str(frames[pos][1]))
        nxt = loader(str(frames[pos + cfg.k][1])) if cfg.mode == "three_frame" else None
        mm = motion_map(
            prev,
            cur,
            nxt,
            mode=cfg.mode,
            lk=cfg.lk,
            ransac=cfg.ransac,
            grid=cfg.grid,
            se=cfg.se,
            open_iterations=cfg.open_iterations,
            close_iterations=cfg.close_iterations,
        )
        result = _CenterResult(
            index=frames[pos][0],
            status="degraded-alignment" if mm.degraded else "ok",
            map=mm,
        )
        if want_detections and not mm.degraded:
            blobs = connected_components(binarize(mm, cfg.threshold))
            result.detections = blobs_to_detections(
                blobs,
                width=mm.width,
                height=mm.height,
                min_area=cfg.min_area,
                max_area=cfg.max_area,
                pad=cfg.pad,
                border_margin=cfg.border_margin,
                frame_index=mm.index,
            )
        return result

    return frames, centers, _map_bounded(process, centers, workers)


def _manifest(command: str, cfg: PipelineConfig, frames, statuses: dict[int, str], timings: dict) -> dict:
    return {
        "tool": "tinymotion",
        "version": __version__,
        "command": command,
        "config": cfg.as_dict(),
        "frames": [
            {"index": index, "status": statuses.get(index, "no-window")} for index, _ in frames
        ],
        "timings": {k: round(v, 6) for k, v in timings.items()},
        "checksums": {path.name: ingest.sha256_file(path) for _, path in frames},
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_diffmap(args) -> int:
    cfg = _resolve_config(args)
    in_dir = Path(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    frames, centers, results = _run_pipeline(cfg, in_dir, args.workers, want_detections=False)
    statuses: dict[int, str] = {}
    degraded = 0
    for result in results:
        statuses[result.index] = result.status
        degraded += result.status != "ok"
        write_gray(
            GrayFrame(result.map.data, index=result.index), out_dir / f"{result.index:06d}_mdm.pgm"
        )
    elapsed = time.perf_counter() - t0
    manifest = _manifest("diffmap", cfg, frames, statuses, {"diffmap_s": elapsed})
    _write_json(out_dir / "manifest.json", manifest)
    print(f"diffmap: {len(centers)} maps ({degraded} degraded) -> {out_dir}")
    if args.fail_on_degraded and centers and degraded / len(centers) > 0.5:
        print("tinymotion: error: alignment failure rate above 50%", file=sys.stderr)
        return 3
    return 0


def cmd_detect(args) -> int:
    cfg = _resolve_config(args)
    in_dir = Path(args.input)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    frames, centers, results = _run_pipeline(cfg, in_dir, args.workers, want_detections=True)
    statuses: dict[int, str] = {}
    detections: list[Detection] = []
    degraded = 0
    for result in results:
        statuses[result.index] = result.status
        degraded += result.status != "ok"
        detections.extend(result.detections)
    elapsed = time.perf_counter() - t0
    ingest.write_detections(out_path, detections)
    manifest = _manifest("detect", cfg, frames, statuses, {"detect_s": elapsed})
    _write_json(out_path.with_name(out_path.name + ".manifest.json"), manifest)
    print(f"detect: {len(detections)} detections over {len(centers)} frames -> {out_path}")
    if args.fail_on_degraded and centers and degraded / len(centers) > 0.5:
        print("tinymotion: error: alignment failure rate above 50%", file=sys.stderr)
        return 3
    return 0


def _eval_one(dets_path: Path, gt_dir: Path, args):
    dets = ingest.read_detections(dets_path)
    gts, _ = ingest.read_gt_dir(gt_dir)
    if args.size_range:
        try:
            lo, hi = (float(v) for v in args.size_range.split(":"))
        except ValueError:
            raise DataError(f"invalid --size-range {args.size_range!r}: expected MIN:MAX")
        kept = [g for g in gts if lo <= g.bbox.area <= hi]
        dropped = [g for g in gts if not lo <= g.bbox.area <= hi]
        # Detections that hit a filtered-out box are ignored, not penalized.
        from .evaluation import iou as _iou

        dets = [
            d
            for d in dets
            if not any(
                g.frame == d.frame and _iou(d.bbox, g.bbox) >= args.iou for g in dropped
            )
        ]
        gts = kept
    return average_precision(dets, gts, iou_thresh=args.iou)


def cmd_eval(args) -> int:
    dets_path = Path(args.detections)
    gt_dir = Path(args.gt)
    if args.per_video:
        videos = sorted(p.name for p in gt_dir.iterdir() if p.is_dir())
        if not videos:
            raise DataError(f"--per-video: no video subdirectories in {gt_dir}")
        payload = {"videos": {}}
        pooled_dets: list[Detection] = []
        pooled_gts = []
        for vi, name in enumerate(videos):
            vdets_path = dets_path / f"{name}.jsonl"
            report = _eval_one(vdets_path, gt_dir / name, args)
            payload["videos"][name] = report.as_dict()
            offset = (vi + 1) * 10**9  # keep frame keys unique across videos
            for d in ingest.read_detections(vdets_path):
                pooled_dets.append(dataclasses.replace(d, frame=d.frame + offset))
            for g in ingest.read_gt_dir(gt_dir / name)[0]:
                pooled_gts.append(dataclasses.replace(g, frame=g.frame + offset))
        payload["pooled"] = average_precision(pooled_dets, pooled_gts, iou_thresh=args.iou).as_dict()
        report_dict = payload
        pr_curve = payload["pooled"]["pr_curve"]
    else:
        report = _eval_one(dets_path, gt_dir, args)
        report_dict = report.as_dict()
        pr_curve = report_dict["pr_curve"]

    text = json.dumps(report_dict, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    if args.pr_csv:
        lines = ["recall,precision"] + [f"{r},{p}" for r, p in pr_curve]
        Path(args.pr_csv).write_text("\n".join(lines) + "\n")
    return 0


def cmd_synth(args) -> int:
    if args.preset:
        config = preset(args.preset)
    else:
        path = Path(args.config)
        if not path.is_file():
            raise DataError(f"synth config not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from exc
        try:
            config = config_from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    seq = generate(config)
    out_dir = Path(args.out)
    export_sequence(seq, out_dir)
    _write_json(out_dir / "synth-config.json", config_to_dict(config))
    boxes = sum(len(b) for b in seq.gt_boxes)
    print(f"synth: {len(seq.frames)} frames, {boxes} gt boxes -> {out_dir}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    frames_list = ingest.list_frames(Path(args.input))
    if len(frames_list) < 50:
        raise DataError(f"bench needs >= 50 frames, found {len(frames_list)}")
    if cfg.mode != "three_frame":
        raise DataError("bench measures the three_frame pipeline")
    loader = _make_loader(2 * _BENCH_MAX_CENTERS + 4 * cfg.k + 8)
    n = len(frames_list)
    centers = list(range(cfg.k, n - cfg.k))[:_BENCH_MAX_CENTERS]

    windows = [
        (
            loader(str(frames_list[pos - cfg.k][1])),
            loader(str(frames_list[pos][1])),
            loader(str(frames_list[pos + cfg.k][1])),
        )
        for pos in centers
    ]

    from .align import align_frame

    def stage_align(window):
        prev, cur, nxt = window
        align_frame(cur, prev, lk=cfg.lk, ransac=cfg.ransac, grid=cfg.grid)
        align_frame(cur, nxt, lk=cfg.lk, ransac=cfg.ransac, grid=cfg.grid)

    aligned = []
    for prev, cur, nxt in windows:
        ap, _ = _safe_align(cur, prev, cfg)
        an, _ = _safe_align(cur, nxt, cfg)
        aligned.append((ap, cur, an))

    def stage_diff(item):
        ap, cur, an = item
        three_frame_diff(cur, ap, an)

    raw_maps = [three_frame_diff(cur, ap, an) for ap, cur, an in aligned]

    def stage_morph(mm):
        morph_close(morph_open(mm, cfg.se, cfg.open_iterations), cfg.se, cfg.close_iterations)

    refined = [
        morph_close(morph_open(mm, cfg.se, cfg.open_iterations), cfg.se, cfg.close_iterations)
        for mm in raw_maps
    ]

    def stage_proposals(mm):
        blobs = connected_components(binarize(mm, cfg.threshold))
        blobs_to_detections(
            blobs,
            width=mm.width,
            height=mm.height,
            min_area=cfg.min_area,
            max_area=cfg.max_area,
            pad=cfg.pad,
            border_margin=cfg.border_margin,
        )

    def stage_full(window):
        prev, cur, nxt = window
        motion_map(
            prev, cur, nxt,
            mode=cfg.mode, lk=cfg.lk, ransac=cfg.ransac, grid=cfg.grid, se=cfg.se,
            open_iterations=cfg.open_iterations, close_iterations=cfg.close_iterations,
        )

    stages = [
        ("align", stage_align, windows),
        ("diff", stage_diff, aligned),
        ("morphology", stage_morph, raw_maps),
        ("proposals", stage_proposals, refined),
        ("diffmap", stage_full, windows),
    ]
    results = {}
    for name, fn, items in stages:
        bench = throughput_bench(fn, items, repeats=args.repeats, name=name)
        results[name] = {
            "fps": round(bench.fps, 3),
            "runs_fps": [round(v, 3) for v in bench.runs],
            "frames": bench.frames,
        }
        print(f"{name:>12}: {bench.fps:8.2f} FPS  (median of {args.repeats} runs)")
    payload = {
        "tool": "tinymotion",
        "version": __version__,
        "command": "bench",
        "config": cfg.as_dict(),
        "repeats": args.repeats,
        "centers": len(centers),
        "stages": results,
    }
    if args.out:
        _write_json(Path(args.out), payload)
    return 0


def _safe_align(reference, moving, cfg: PipelineConfig):
    from .align import AlignmentError, align_frame

    try:
        return align_frame(reference, moving, lk=cfg.lk, ransac=cfg.ransac, grid=cfg.grid)
    except AlignmentError:
        return moving, np.eye(3)


class _Parser(argparse.ArgumentParser):
    # Spec'd exit codes: usage errors are 1, not argparse's default 2.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON (flags override it)")
    p.add_argument("--k", type=int, default=None, help="frame step (default 2)")
    p.add_argument("--mode", choices=["two", "three"], default=None, help="difference mode")
    p.add_argument("--grid", default=None, help="keypoint grid RxC (default 16x16)")
    p.add_argument("--margin", type=int, default=None, help="grid margin in pixels")
    p.add_argument("--ransac-seed", type=int, default=None, help="RANSAC rng seed")
    p.add_argument("--se-size", type=int, default=None, help="structuring element size (odd)")
    p.add_argument("--threshold", default=None, help="binarize method: otsu or fixed:N")
    p.add_argument("--min-area", type=int, default=None, help="min blob area in px")
    p.add_argument("--max-area", type=int, default=None, help="max blob area in px")
    p.add_argument("--workers", type=int, default=1, help="worker threads (output-invariant)")
    p.add_argument(
        "--fail-on-degraded",
        action="store_true",
        help="exit 3 when over half of the frames fail alignment",
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tinymotion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"tinymotion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("diffmap", help="write motion difference maps for a sequence")
    p.add_argument("input", help="input sequence directory")
    p.add_argument("--out", required=True, help="output directory")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_diffmap)

    p = sub.add_parser("detect", help="run the full proposal pipeline")
    p.add_argument("input", help="input sequence directory")
    p.add_argument("--out", required=True, help="output detections JSONL file")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="evaluate detections against YOLO ground truth")
    p.add_argument("detections", help="detections JSONL (or directory with --per-video)")
    p.add_argument("gt", help="ground-truth sequence directory")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold (default 0.5)")
    p.add_argument("--per-video", action="store_true", help="evaluate per video subdirectory")
    p.add_argument("--size-range", default=None, help="only keep GT with area in MIN:MAX px^2")
    p.add_argument("--out", default=None, help="write the report JSON here as well")
    p.add_argument("--pr-csv", default=None, help="write the PR curve as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic ground-truthed sequence")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="synth config JSON file")
    group.add_argument("--preset", help="named preset (tiny-fast, static)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="per-stage throughput of the diffmap pipeline")
    p.add_argument("input", help="input sequence directory (>= 50 frames)")
    p.add_argument("--repeats", type=int, default=5, help="timed repetitions (default 5)")
    p.add_argument("--out", default=None, help="write the timing report JSON here")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"tinymotion: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"tinymotion: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
