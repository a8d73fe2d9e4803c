"""Tiny moving-object detection from a moving camera.

The pipeline stabilizes neighboring frames with a grid-keypoint homography,
computes averaged frame-difference motion maps, extracts blob proposals, and
evaluates detections against ground truth. A self-contained adaptive fusion
block (softmax modality gate + channel/spatial attention) with verified
analytic gradients is included, along with a synthetic moving-camera sequence
generator that provides exact ground truth for end-to-end checks.
"""

__version__ = "0.1.0"

from .imgcore import GrayFrame, RgbFrame, load_frame, to_grayscale, write_gray
from .align import (
    AlignmentError,
    GridSpec,
    LkParams,
    RansacParams,
    align_frame,
    build_pyramid,
    estimate_homography_ransac,
    grid_keypoints,
    lk_track,
    warp_perspective,
)
from .motiondiff import (
    MotionMap,
    StructuringElement,
    morph_close,
    morph_open,
    motion_map,
    three_frame_diff,
    two_frame_diff,
)
from .boxes import BoundingBox, Detection, GroundTruth
from .proposal import BinaryMap, Blob, binarize, blobs_to_detections, connected_components
from .evaluation import EvalReport, average_precision, iou, match_frame, throughput_bench
from .fusion import FusionParams, FusionTrace, fusion_backward, fusion_forward, init_params
from .synth import SynthConfig, SynthSequence, export_sequence, generate

__all__ = [
    "AlignmentError",
    "BinaryMap",
    "Blob",
    "BoundingBox",
    "Detection",
    "EvalReport",
    "FusionParams",
    "FusionTrace",
    "GrayFrame",
    "GridSpec",
    "GroundTruth",
    "LkParams",
    "MotionMap",
    "RansacParams",
    "RgbFrame",
    "StructuringElement",
    "SynthConfig",
    "SynthSequence",
    "align_frame",
    "average_precision",
    "binarize",
    "blobs_to_detections",
    "build_pyramid",
    "connected_components",
    "estimate_homography_ransac",
    "export_sequence",
    "fusion_backward",
    "fusion_forward",
    "generate",
    "grid_keypoints",
    "init_params",
    "iou",
    "lk_track",
    "load_frame",
    "match_frame",
    "morph_close",
    "morph_open",
    "motion_map",
    "three_frame_diff",
    "throughput_bench",
    "to_grayscale",
    "two_frame_diff",
    "warp_perspective",
    "write_gray",
]
