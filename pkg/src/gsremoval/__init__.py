"""Evaluation metrics and graph-based refinement for object removal in 3D Gaussian Splatting scenes."""

from __future__ import annotations

__version__ = "0.1.0"

from .depth import GhtConfig, acc_depth, depth_diff, ght_threshold
from .gaussians import GaussianCloud, GraphEmpty, RemovalSet, candidate_filter, load_ply, save_ply
from .masksim import sim_sam
from .raster import BinaryMask, DepthMap, MaskSet, iou, load_depth, load_mask, load_mask_set
from .refine import RefineConfig, build_graph, cut, energy, refine, solve
from .semantic import acc_post_ratio, acc_seg, iou_drop, summarize_scene

__all__ = [
    "BinaryMask",
    "DepthMap",
    "GaussianCloud",
    "GhtConfig",
    "GraphEmpty",
    "MaskSet",
    "RefineConfig",
    "RemovalSet",
    "__version__",
    "acc_depth",
    "acc_post_ratio",
    "acc_seg",
    "build_graph",
    "candidate_filter",
    "cut",
    "depth_diff",
    "energy",
    "ght_threshold",
    "iou",
    "iou_drop",
    "load_depth",
    "load_mask",
    "load_mask_set",
    "load_ply",
    "refine",
    "save_ply",
    "sim_sam",
    "solve",
    "summarize_scene",
]
