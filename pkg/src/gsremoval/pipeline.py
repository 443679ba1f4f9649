"""Batch evaluation: scene manifests, per-view metrics, scene summaries, reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .depth import GhtConfig, acc_depth, depth_diff, ght_threshold_detailed
from .masksim import DEFAULT_OVERLAP, sim_sam_detailed
from .raster import BinaryMask, iou, load_depth, load_mask, load_mask_set
from .semantic import (
    DEFAULT_THRESHOLDS,
    SemanticSceneSummary,
    SemanticViewRecord,
    format_drop_cell,
    format_pct,
    summarize_scene,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
REPORT_SCHEMA = "gsremoval-report"
REPORT_VERSION = 1
WORKERS_ENV = "GSREMOVAL_WORKERS"

VIEW_PATH_KEYS = (
    "object_mask",
    "semantic_pre",
    "semantic_post",
    "sam_pre",
    "sam_post",
    "depth_pre",
    "depth_post",
)

CSV_COLUMNS = (
    "view_id",
    "iou_pre",
    "iou_post",
    "iou_drop",
    "detected_pre",
    "detected_post",
    "sim_sam",
    "n_masks_pre",
    "n_masks_post",
    "xi_depth",
    "acc_depth",
    "depth_degenerate",
    "flags",
    "error",
)


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------
# manifest


@dataclass
class ViewEntry:
    view_id: str
    paths: dict[str, Path | None]
    missing: list[Path] = field(default_factory=list)
    skip_reason: str | None = None
    notes: list[str] = field(default_factory=list)

    def available(self, *keys: str) -> bool:
        return all(self.paths.get(k) is not None and self.paths[k].exists() for k in keys)


@dataclass
class SceneManifest:
    scene_id: str
    object_id: str
    method_id: str
    views: list[ViewEntry]
    source: Path | None = None
    ply: Path | None = None
    removal_set: Path | None = None
    refine_config: Path | None = None

    @property
    def missing_paths(self) -> list[Path]:
        return [p for v in self.views for p in v.missing]

    @property
    def usable_views(self) -> list[ViewEntry]:
        return [v for v in self.views if v.skip_reason is None]


def _resolve(base: Path, value: Any) -> Path | None:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ManifestError(f"path entries must be strings or null, got {value!r}")
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_manifest(data: Mapping[str, Any], base: Path) -> SceneManifest:
    if not isinstance(data, Mapping):
        raise ManifestError("manifest must be a JSON object")
    version = data.get("schema_version", MANIFEST_VERSION)
    if version != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest schema_version {version}")
    raw_views = data.get("views")
    if not isinstance(raw_views, list):
        raise ManifestError("manifest needs a 'views' list")
    views: list[ViewEntry] = []
    seen: set[str] = set()
    for i, rv in enumerate(raw_views):
        if not isinstance(rv, Mapping) or "view_id" not in rv:
            raise ManifestError(f"view #{i} lacks a view_id")
        vid = str(rv["view_id"])
        if vid in seen:
            raise ManifestError(f"duplicate view id {vid!r}")
        seen.add(vid)
        unknown = set(rv) - set(VIEW_PATH_KEYS) - {"view_id"}
        if unknown:
            raise ManifestError(f"view {vid!r}: unknown keys {sorted(unknown)}")
        entry = ViewEntry(vid, {k: _resolve(base, rv.get(k)) for k in VIEW_PATH_KEYS})
        for key, p in entry.paths.items():
            if p is not None and not p.exists():
                entry.missing.append(p)
                entry.notes.append(f"missing {key}: {p}")
        if not entry.available("object_mask"):
            entry.skip_reason = "object mask missing"
        views.append(entry)

    def opt(key: str) -> Path | None:
        p = _resolve(base, data.get(key))
        return p

    manifest = SceneManifest(
        scene_id=str(data.get("scene_id", "")),
        object_id=str(data.get("object_id", "")),
        method_id=str(data.get("method_id", "")),
        views=views,
        ply=opt("ply"),
        removal_set=opt("removal_set"),
        refine_config=opt("refine_config"),
    )
    if not manifest.usable_views:
        raise ManifestError("manifest has no usable views")
    return manifest


def validate_manifest(path: str | os.PathLike) -> SceneManifest:
    """Parse a JSON manifest and record missing inputs per view.

    A view without its object mask is skipped. Missing semantic masks count as
    "object not detected" (IoU 0); missing SAM directories or depth files only
    disable the corresponding metric.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    manifest = parse_manifest(data, path.parent)
    manifest.source = path
    return manifest


# --------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalConfig:
    ght: GhtConfig = GhtConfig()
    sam_overlap: float = DEFAULT_OVERLAP
    sam_overlap_mode: str = "iou"
    iou_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.sam_overlap_mode not in ("iou", "mask_area"):
            raise ValueError("sam_overlap_mode must be 'iou' or 'mask_area'")
        object.__setattr__(self, "iou_thresholds", tuple(float(t) for t in self.iou_thresholds))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "EvalConfig":
        data = dict(data)
        ght_raw = dict(data.pop("ght", {}))
        if isinstance(ght_raw.get("nu"), str):
            ght_raw["nu"] = float(ght_raw["nu"])
        ght = GhtConfig(**ght_raw)
        thresholds = tuple(data.pop("iou_thresholds", DEFAULT_THRESHOLDS))
        unknown = set(data) - {"sam_overlap", "sam_overlap_mode", "workers"}
        if unknown:
            raise ValueError(f"unknown eval config keys {sorted(unknown)}")
        return cls(ght=ght, iou_thresholds=thresholds, **data)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["iou_thresholds"] = list(self.iou_thresholds)
        d.pop("workers")
        d["ght"]["nu"] = "inf" if math.isinf(self.ght.nu) else self.ght.nu
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ViewRow:
    view_id: str
    iou_pre: float | None = None
    iou_post: float | None = None
    iou_drop: float | None = None
    detected_pre: bool | None = None
    detected_post: bool | None = None
    sim_sam: float | None = None
    n_masks_pre: int | None = None
    n_masks_post: int | None = None
    xi_depth: float | None = None
    acc_depth: float | None = None
    depth_degenerate: bool | None = None
    flags: list[str] = field(default_factory=list)
    error: str | None = None

    def semantic_record(self) -> SemanticViewRecord | None:
        if self.iou_pre is None or self.iou_post is None:
            return None
        return SemanticViewRecord(
            self.view_id, self.iou_pre, self.iou_post, bool(self.detected_pre), bool(self.detected_post)
        )


@dataclass
class SceneSummary:
    semantic: SemanticSceneSummary | None
    mean_sim_sam: float | None
    mean_acc_depth: float | None
    n_views: int
    skipped_views: int
    n_errors: int

    @property
    def iou_drop_cell(self) -> str | None:
        return self.semantic.drop_cell() if self.semantic else None


@dataclass
class EvaluationReport:
    scene_id: str
    object_id: str
    method_id: str
    rows: list[ViewRow]
    summary: SceneSummary
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def has_errors(self) -> bool:
        return any(r.error for r in self.rows)


def _load_semantic(path: Path | None, shape, row: ViewRow, which: str) -> BinaryMask | None:
    if path is None or not path.exists():
        row.flags.append(f"no_{which}_mask")
        return None
    mask = load_mask(path)
    if mask.shape != shape:
        raise ValueError(f"{which} semantic mask is {mask.shape}, object mask is {shape}")
    return mask


def evaluate_view(view: ViewEntry, cfg: EvalConfig) -> ViewRow:
    """All metrics for one view; failures become an ``error`` on the row."""
    row = ViewRow(view.view_id)
    try:
        obj = load_mask(view.paths["object_mask"])
    except Exception as exc:  # noqa: BLE001 - any unreadable input flags the row
        row.error = f"object mask: {exc}"
        return row
    if obj.area == 0:
        row.flags.append("empty_object_mask")

    errors = []
    try:
        sem_pre = _load_semantic(view.paths["semantic_pre"], obj.shape, row, "pre")
        sem_post = _load_semantic(view.paths["semantic_post"], obj.shape, row, "post")
        # an absent or empty prediction means the prompt found nothing: IoU 0
        row.detected_pre = sem_pre is not None and sem_pre.area > 0
        row.detected_post = sem_post is not None and sem_post.area > 0
        row.iou_pre = iou(sem_pre, obj) if row.detected_pre else 0.0
        row.iou_post = iou(sem_post, obj) if row.detected_post else 0.0
        row.iou_drop = row.iou_pre - row.iou_post
    except Exception as exc:  # noqa: BLE001
        row.iou_pre = row.iou_post = row.iou_drop = None
        row.detected_pre = row.detected_post = None
        errors.append(f"semantic: {exc}")

    if view.available("sam_pre", "sam_post"):
        try:
            res = sim_sam_detailed(
                load_mask_set(view.paths["sam_pre"]),
                load_mask_set(view.paths["sam_post"]),
                obj,
                cfg.sam_overlap,
                cfg.sam_overlap_mode == "mask_area",
            )
            row.sim_sam = res.value
            row.n_masks_pre, row.n_masks_post = len(res.kept_a), len(res.kept_b)
            if res.no_overlap:
                row.flags.append("sam_no_overlap")
        except Exception as exc:  # noqa: BLE001
            errors.append(f"sim_sam: {exc}")
    else:
        row.flags.append("sam_skipped")

    if view.available("depth_pre", "depth_post"):
        try:
            diff = depth_diff(load_depth(view.paths["depth_pre"]), load_depth(view.paths["depth_post"]))
            if diff.shape != obj.shape:
                raise ValueError(f"depth maps are {diff.shape}, object mask is {obj.shape}")
            th = ght_threshold_detailed(diff, cfg.ght)
            row.xi_depth = th.value
            row.depth_degenerate = th.degenerate
            row.acc_depth = acc_depth(diff, obj, th.value)
        except Exception as exc:  # noqa: BLE001
            row.xi_depth = row.acc_depth = row.depth_degenerate = None
            errors.append(f"depth: {exc}")
    else:
        row.flags.append("depth_skipped")

    if errors:
        row.error = "; ".join(errors)
    return row


def _mean(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def summarize_rows(
    rows: Sequence[ViewRow], thresholds: Sequence[float] = DEFAULT_THRESHOLDS, skipped_views: int = 0
) -> SceneSummary:
    """Scene aggregates from view rows (unweighted means over views that have each metric)."""
    ordered = sorted(rows, key=lambda r: r.view_id)
    records = [r for r in (row.semantic_record() for row in ordered) if r is not None]
    semantic = summarize_scene(records, thresholds, skipped_views) if records else None
    return SceneSummary(
        semantic=semantic,
        mean_sim_sam=_mean(r.sim_sam for r in ordered),
        mean_acc_depth=_mean(r.acc_depth for r in ordered),
        n_views=len(ordered),
        skipped_views=skipped_views,
        n_errors=sum(1 for r in ordered if r.error),
    )


def _worker_count(cfg: EvalConfig) -> int:
    if cfg.workers:
        return max(1, int(cfg.workers))
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", WORKERS_ENV, env)
    return min(4, os.cpu_count() or 1)


def run_eval(manifest: SceneManifest, cfg: EvalConfig = EvalConfig()) -> EvaluationReport:
    """Evaluate every usable view; rows come back sorted by view id."""
    views = sorted(manifest.usable_views, key=lambda v: v.view_id)
    skipped = len(manifest.views) - len(views)
    workers = _worker_count(cfg)
    if workers > 1 and len(views) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda v: evaluate_view(v, cfg), views))
    else:
        rows = [evaluate_view(v, cfg) for v in views]
    for v in manifest.views:
        if v.skip_reason:
            log.info("view %s skipped: %s", v.view_id, v.skip_reason)
    summary = summarize_rows(rows, cfg.iou_thresholds, skipped)
    provenance = {
        "tool": "gsremoval",
        "tool_version": __version__,
        "config_hash": cfg.digest(),
        "config": cfg.to_dict(),
        "manifest": str(manifest.source) if manifest.source else None,
    }
    return EvaluationReport(manifest.scene_id, manifest.object_id, manifest.method_id, rows, summary, provenance)


# --------------------------------------------------------------------------
# report I/O


def _threshold_map(m: Mapping[float, float]) -> dict[str, float]:
    return {repr(float(k)): v for k, v in m.items()}


def report_to_dict(report: EvaluationReport) -> dict[str, Any]:
    s = report.summary
    semantic = None
    if s.semantic is not None:
        semantic = asdict(s.semantic)
        semantic["acc_seg_at"] = _threshold_map(s.semantic.acc_seg_at)
        semantic["acc_post_at"] = _threshold_map(s.semantic.acc_post_at)
    return {
        "schema": REPORT_SCHEMA,
        "schema_version": REPORT_VERSION,
        "provenance": report.provenance,
        "scene": {"scene_id": report.scene_id, "object_id": report.object_id, "method_id": report.method_id},
        "rows": [asdict(r) for r in report.rows],
        "summary": {
            "semantic": semantic,
            "iou_drop_cell": s.iou_drop_cell,
            "mean_sim_sam": s.mean_sim_sam,
            "mean_acc_depth": s.mean_acc_depth,
            "n_views": s.n_views,
            "skipped_views": s.skipped_views,
            "n_errors": s.n_errors,
        },
    }


def report_from_dict(data: Mapping[str, Any]) -> EvaluationReport:
    if data.get("schema") != REPORT_SCHEMA:
        raise ValueError("not an evaluation report")
    if data.get("schema_version") != REPORT_VERSION:
        raise ValueError(f"unsupported report schema_version {data.get('schema_version')}")
    rows = [ViewRow(**r) for r in data["rows"]]
    s = data["summary"]
    semantic = None
    if s["semantic"] is not None:
        sem = dict(s["semantic"])
        sem["acc_seg_at"] = {float(k): v for k, v in sem["acc_seg_at"].items()}
        sem["acc_post_at"] = {float(k): v for k, v in sem["acc_post_at"].items()}
        semantic = SemanticSceneSummary(**sem)
    summary = SceneSummary(
        semantic, s["mean_sim_sam"], s["mean_acc_depth"], s["n_views"], s["skipped_views"], s["n_errors"]
    )
    scene = data["scene"]
    return EvaluationReport(
        scene["scene_id"], scene["object_id"], scene["method_id"], rows, summary, dict(data["provenance"])
    )


def load_report(path: str | os.PathLike) -> EvaluationReport:
    return report_from_dict(json.loads(Path(path).read_text()))


def _fmt(value: Any, decimals: int = 4) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.{decimals}f}"
    if isinstance(value, list):
        return ";".join(value)
    return str(value)


def rows_csv(rows: Sequence[ViewRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        d = asdict(r)
        writer.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def summary_columns(thresholds: Sequence[float]) -> list[str]:
    cols = ["scene_id", "object_id", "method_id", "n_views", "skipped_views", "n_errors",
            "miou_pre", "miou_post", "iou_drop", "pct_reduction", "iou_drop_cell"]
    cols += [f"acc_seg@{t:g}" for t in thresholds]
    cols += [f"acc_post_pct@{t:g}" for t in thresholds]
    cols += ["mean_acc_depth", "mean_sim_sam", "low_confidence"]
    return cols


def summary_record(report: EvaluationReport, decimals: int = 4) -> dict[str, str]:
    s = report.summary
    sem = s.semantic
    thresholds = list(sem.acc_seg_at) if sem else list(DEFAULT_THRESHOLDS)
    rec: dict[str, str] = {
        "scene_id": report.scene_id,
        "object_id": report.object_id,
        "method_id": report.method_id,
        "n_views": str(s.n_views),
        "skipped_views": str(s.skipped_views),
        "n_errors": str(s.n_errors),
        "miou_pre": _fmt(sem.miou_pre if sem else None, decimals),
        "miou_post": _fmt(sem.miou_post if sem else None, decimals),
        "iou_drop": _fmt(sem.iou_drop if sem else None, decimals),
        "pct_reduction": format_pct(sem.pct_reduction) if sem else "",
        "iou_drop_cell": s.iou_drop_cell or "",
        "mean_acc_depth": _fmt(s.mean_acc_depth, decimals),
        "mean_sim_sam": _fmt(s.mean_sim_sam, decimals),
        "low_confidence": _fmt(sem.low_confidence if sem else None),
    }
    for t in thresholds:
        rec[f"acc_seg@{t:g}"] = _fmt(sem.acc_seg_at[t] if sem else None, decimals)
        # the post-removal detection rate is reported in percent
        rec[f"acc_post_pct@{t:g}"] = _fmt(100.0 * sem.acc_post_at[t] if sem else None, 1 if decimals < 4 else 2)
    return rec


def summary_csv(reports: Sequence[EvaluationReport], decimals: int = 4) -> str:
    thresholds: list[float] = []
    for r in reports:
        if r.summary.semantic:
            thresholds = list(r.summary.semantic.acc_seg_at)
            break
    cols = summary_columns(thresholds or DEFAULT_THRESHOLDS)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for r in reports:
        writer.writerow(summary_record(r, decimals))
    return buf.getvalue()


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def summary_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".summary.csv")


def emit_report(report: EvaluationReport, fmt: str, path: str | os.PathLike) -> None:
    """Write a report.

    ``json`` keeps full float precision so the file round-trips. ``csv``
    writes one row per view (4 decimals) to ``path`` and the scene summary to
    ``<stem>.summary.csv``.
    """
    if fmt == "json":
        atomic_write(path, json.dumps(report_to_dict(report), indent=2) + "\n")
    elif fmt == "csv":
        atomic_write(path, rows_csv(report.rows))
        atomic_write(summary_path(path), summary_csv([report]))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def table_rows(reports: Sequence[EvaluationReport]) -> list[list[str]]:
    """Paper-style rows: scene, object, method, mIoU pre/post, "drop / pct", depth, sim."""
    out = [["scene", "object", "method", "mIoU_pre", "mIoU_post", "IoU_drop", "acc_depth", "sim_sam"]]
    for r in sorted(reports, key=lambda r: (r.scene_id, r.object_id, r.method_id)):
        s = r.summary
        sem = s.semantic
        out.append([
            r.scene_id,
            r.object_id,
            r.method_id,
            _fmt(sem.miou_pre, 2) if sem else "",
            _fmt(sem.miou_post, 2) if sem else "",
            format_drop_cell(sem.iou_drop, sem.pct_reduction) if sem else "",
            _fmt(s.mean_acc_depth, 2),
            _fmt(s.mean_sim_sam, 2),
        ])
    return out
