"""Semantic recognition metrics: IoU drop and segmentation accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

DEFAULT_THRESHOLDS = (0.5, 0.7, 0.9)

# Below this pre-removal mIoU the drop is bounded by a value too small to
# separate a failed removal from a segmenter that never saw the object.
LOW_CONFIDENCE_MIOU = 0.2


class MetricError(ValueError):
    pass


def _check_ratio(name: str, value: float) -> None:
    if not (0.0 <= value <= 1.0) or math.isnan(value):
        raise MetricError(f"{name} must lie in [0, 1], got {value!r}")


@dataclass(frozen=True)
class SemanticViewRecord:
    view_id: str
    iou_pre: float
    iou_post: float
    detected_pre: bool = True
    detected_post: bool = True

    def __post_init__(self) -> None:
        _check_ratio("iou_pre", self.iou_pre)
        _check_ratio("iou_post", self.iou_post)
        if not self.detected_pre and self.iou_pre != 0:
            raise MetricError(f"{self.view_id}: undetected object must have iou_pre = 0")
        if not self.detected_post and self.iou_post != 0:
            raise MetricError(f"{self.view_id}: undetected object must have iou_post = 0")


@dataclass(frozen=True)
class SemanticSceneSummary:
    miou_pre: float
    miou_post: float
    iou_drop: float
    pct_reduction: float | None
    acc_seg_at: Mapping[float, float] = field(default_factory=dict)
    acc_post_at: Mapping[float, float] = field(default_factory=dict)
    n_views: int = 0
    skipped_views: int = 0
    low_confidence: bool = False

    def drop_cell(self) -> str:
        return format_drop_cell(self.iou_drop, self.pct_reduction)


def iou_drop(iou_pre: float, iou_post: float) -> float:
    """Return ``iou_pre - iou_post``; higher means the object is less recognisable."""
    _check_ratio("iou_pre", iou_pre)
    _check_ratio("iou_post", iou_post)
    return iou_pre - iou_post


def _require_records(records: Sequence[SemanticViewRecord]) -> None:
    if len(records) == 0:
        raise MetricError("at least one view record is required")


def acc_seg(records: Sequence[SemanticViewRecord], threshold: float) -> float:
    """Fraction of views where the object is no longer segmented (``iou_post < threshold``)."""
    _require_records(records)
    if not 0.0 < threshold <= 1.0:
        raise MetricError(f"threshold must lie in (0, 1], got {threshold}")
    return sum(r.iou_post < threshold for r in records) / len(records)


def acc_post_ratio(records: Sequence[SemanticViewRecord], threshold: float) -> float:
    """Fraction of views where the object is still segmented (``iou_post > threshold``)."""
    _require_records(records)
    if not 0.0 < threshold <= 1.0:
        raise MetricError(f"threshold must lie in (0, 1], got {threshold}")
    return sum(r.iou_post > threshold for r in records) / len(records)


def summarize_scene(
    records: Sequence[SemanticViewRecord],
    thresholds: Iterable[float] = DEFAULT_THRESHOLDS,
    skipped_views: int = 0,
) -> SemanticSceneSummary:
    """Aggregate per-view records with unweighted means.

    Records are sorted by view id first so that the float sums do not depend
    on the input order.
    """
    _require_records(records)
    ordered = sorted(records, key=lambda r: r.view_id)
    n = len(ordered)
    miou_pre = math.fsum(r.iou_pre for r in ordered) / n
    miou_post = math.fsum(r.iou_post for r in ordered) / n
    drop = miou_pre - miou_post
    pct = 100.0 * drop / miou_pre if miou_pre > 0 else None
    thresholds = tuple(thresholds)
    return SemanticSceneSummary(
        miou_pre=miou_pre,
        miou_post=miou_post,
        iou_drop=drop,
        pct_reduction=pct,
        acc_seg_at={t: acc_seg(ordered, t) for t in thresholds},
        acc_post_at={t: acc_post_ratio(ordered, t) for t in thresholds},
        n_views=n,
        skipped_views=skipped_views,
        low_confidence=miou_pre < LOW_CONFIDENCE_MIOU,
    )


def format_pct(pct: float | None) -> str:
    """Three significant figures, the way the result tables print them (98.4, 100, 3.50)."""
    if pct is None:
        return "n/a"
    text = f"{pct:#.3g}"
    if "e" in text:
        return f"{pct:.1f}"
    return text.rstrip(".")


def format_drop_cell(drop: float, pct: float | None) -> str:
    """Composite ``"drop / pct"`` cell, e.g. ``"0.62 / 98.4"``."""
    return f"{drop:.2f} / {format_pct(pct)}"
