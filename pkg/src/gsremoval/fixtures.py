"""Synthetic scenes with known metric values.

A fixture is a small grid with one rectangular object seen from a few views.
The "post-removal" renders are scripted: nothing removed, everything removed,
or a residual band of the object left behind. Expected metrics are derived
from pixel counts (and, for mask sets, by enumerating every matching) so they
do not depend on the code under test.

Optionally a Gaussian "dumbbell" is written as well: an object lobe with a
fraction of its splats left out of the seed removal set, a bridge and a second
lobe with background features, and a flat support under the object.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .gaussians import GaussianCloud, RemovalSet, save_ply, save_removal_set
from .raster import BinaryMask, DepthMap, MaskSet, save_depth, save_mask, save_mask_set

MODES = ("none", "perfect", "residual")


class FixtureError(ValueError):
    pass


@dataclass(frozen=True)
class DumbbellSpec:
    n_object: int = 100
    residual_fraction: float = 0.2
    n_bridge: int = 8
    n_far: int = 60
    n_support: int = 36
    feature_dim: int = 8
    feature_noise: float = 0.01
    splat_scale: float = 0.25
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_object < 2 or min(self.n_bridge, self.n_far, self.n_support) < 0:
            raise FixtureError("dumbbell splat counts must be nonnegative (object at least 2)")
        if not 0.0 <= self.residual_fraction < 1.0:
            raise FixtureError("residual_fraction must lie in [0, 1)")
        if self.feature_dim < 3:
            raise FixtureError("feature_dim must be at least 3")
        if self.splat_scale <= 0:
            raise FixtureError("splat_scale must be positive")


@dataclass(frozen=True)
class FixtureSpec:
    """Fixture parameters.

    ``object`` is ``(row0, col0, row1, col1)`` with exclusive upper bounds for
    view 0; view ``v`` shifts it right by ``v * view_shift`` columns. In
    ``residual`` mode the top ``rho`` fraction of the object's rows stays
    behind (``rho * object height`` must be a whole number of rows).
    """

    height: int = 64
    width: int = 64
    object: tuple[int, int, int, int] = (20, 20, 30, 30)
    mode: str = "none"
    rho: float = 0.0
    n_views: int = 2
    view_shift: int = 2
    semantic_margin: int = 1
    background_depth: float = 10.0
    object_depth: float = 4.0
    scene_id: str = "synthetic"
    object_id: str = "box"
    method_id: str = "scripted"
    gaussians: DumbbellSpec | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise FixtureError(f"mode must be one of {MODES}, got {self.mode!r}")
        r0, c0, r1, c1 = self.object
        object.__setattr__(self, "object", (int(r0), int(c0), int(r1), int(c1)))
        if self.height < 8 or self.width < 8:
            raise FixtureError("grid must be at least 8x8")
        if not (0 <= r0 < r1 <= self.height and 0 <= c0 < c1 <= self.width):
            raise FixtureError(f"object rectangle {self.object} lies outside the grid")
        if c1 + (self.n_views - 1) * self.view_shift > self.width:
            raise FixtureError("object leaves the grid in later views; reduce view_shift or n_views")
        if self.n_views < 1 or self.view_shift < 0 or self.semantic_margin < 0:
            raise FixtureError("n_views must be positive; view_shift and semantic_margin nonnegative")
        if not 0.0 <= self.rho <= 1.0:
            raise FixtureError("rho must lie in [0, 1]")
        rows = self.rho * (r1 - r0)
        if abs(rows - round(rows)) > 1e-9:
            raise FixtureError(f"rho * object height = {rows} is not a whole number of rows")
        if not (math.isfinite(self.background_depth) and math.isfinite(self.object_depth)):
            raise FixtureError("depths must be finite")
        if self.background_depth <= 0 or self.object_depth <= 0 or self.object_depth == self.background_depth:
            raise FixtureError("depths must be positive and distinct")

    @property
    def residual_rows(self) -> int:
        r0, _, r1, _ = self.object
        if self.mode == "none":
            return r1 - r0
        if self.mode == "perfect":
            return 0
        return int(round(self.rho * (r1 - r0)))

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "FixtureSpec":
        data = dict(data)
        g = data.pop("gaussians", None)
        if "object" in data:
            data["object"] = tuple(data["object"])
        try:
            return cls(gaussians=DumbbellSpec(**g) if g is not None else None, **data)
        except TypeError as exc:
            raise FixtureError(f"invalid fixture spec: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["object"] = list(self.object)
        return d


def _rect(h: int, w: int, r0: int, c0: int, r1: int, c1: int) -> np.ndarray:
    m = np.zeros((h, w), dtype=bool)
    m[max(r0, 0):min(r1, h), max(c0, 0):min(c1, w)] = True
    return m


def _frac_iou(a: np.ndarray, b: np.ndarray) -> Fraction:
    union = int(np.count_nonzero(a | b))
    return Fraction(1) if union == 0 else Fraction(int(np.count_nonzero(a & b)), union)


def _best_matching(ious: list[list[Fraction]]) -> Fraction:
    """Largest total over all injective partial matchings (plain recursion)."""
    n = len(ious)
    m = len(ious[0]) if n else 0

    def go(i: int, used: frozenset) -> Fraction:
        if i == n:
            return Fraction(0)
        best = go(i + 1, used)
        for j in range(m):
            if j not in used and ious[i][j] > 0:
                best = max(best, ious[i][j] + go(i + 1, used | {j}))
        return best

    return go(0, frozenset())


def expected_sim_sam(pre: list[np.ndarray], post: list[np.ndarray], obj: np.ndarray, tau: Fraction) -> Fraction:
    a = [m for m in pre if _frac_iou(m, obj) >= tau]
    b = [m for m in post if _frac_iou(m, obj) >= tau]
    if not a and not b:
        return Fraction(0)
    total = _best_matching([[_frac_iou(x, y) for y in b] for x in a]) if a and b else Fraction(0)
    return total / max(len(a), len(b))


def _view_layers(spec: FixtureSpec, v: int) -> dict[str, Any]:
    h, w = spec.height, spec.width
    r0, c0, r1, c1 = spec.object
    c0, c1 = c0 + v * spec.view_shift, c1 + v * spec.view_shift
    m = spec.semantic_margin
    obj = _rect(h, w, r0, c0, r1, c1)
    res_rows = spec.residual_rows
    residual = _rect(h, w, r0, c0, r0 + res_rows, c1)
    halfway = r0 + (r1 - r0) // 2

    def semantic(region: np.ndarray) -> np.ndarray:
        if not region.any():
            return region
        rows = np.flatnonzero(region.any(1))
        cols = np.flatnonzero(region.any(0))
        return _rect(h, w, rows[0] - m, cols[0] - m, rows[-1] + 1 + m, cols[-1] + 1 + m)

    # a support surface under the object; after removal it shows through
    # wherever the object is gone
    support_pre = _rect(h, w, r1 - 2, c0 - 2, r1 + 6, c1 + 2)
    support_post = support_pre | (obj & ~residual) | _rect(h, w, r0 + res_rows, c0 - 2, r1, c1 + 2)
    backdrop = [_rect(h, w, 0, 0, 3, w), _rect(h, w, h - 3, 0, h, w)]
    sam_pre = [obj, _rect(h, w, r0, c0, halfway, c1), _rect(h, w, halfway, c0, r1, c1), support_pre] + backdrop
    sam_post = [support_post] + backdrop
    if res_rows:
        sam_post.insert(0, residual)
    if spec.mode == "none":
        sam_post = list(sam_pre)
        support_post = support_pre

    depth_pre = np.full((h, w), spec.background_depth, dtype=np.float32)
    depth_pre[obj] = spec.object_depth
    depth_post = np.full((h, w), spec.background_depth, dtype=np.float32)
    depth_post[residual] = spec.object_depth
    # one pixel without a depth value, away from the object
    depth_pre[h - 1, w - 1] = np.nan
    depth_post[h - 1, w - 1] = np.nan
    return {
        "object": obj,
        "residual": residual,
        "semantic_pre": semantic(obj),
        "semantic_post": semantic(residual),
        "sam_pre": sam_pre,
        "sam_post": sam_post,
        "depth_pre": depth_pre,
        "depth_post": depth_post,
    }


def _expected_view(layers: dict[str, Any]) -> dict[str, Any]:
    obj = layers["object"]
    sem_pre, sem_post = layers["semantic_pre"], layers["semantic_post"]
    iou_pre = _frac_iou(sem_pre, obj) if sem_pre.any() else Fraction(0)
    iou_post = _frac_iou(sem_post, obj) if sem_post.any() else Fraction(0)
    # the object band changes depth by a constant and nothing else changes, so
    # any threshold strictly between 0 and that constant separates the classes
    valid = np.isfinite(layers["depth_pre"]) & np.isfinite(layers["depth_post"])
    changed = valid & (layers["depth_pre"] != layers["depth_post"])
    acc = Fraction(int(np.count_nonzero(changed & obj)), int(np.count_nonzero(valid & obj)))
    sim = expected_sim_sam(layers["sam_pre"], layers["sam_post"], obj, Fraction(1, 10))
    return {
        "iou_pre": float(iou_pre),
        "iou_post": float(iou_post),
        # the drop is taken between the reported IoUs
        "iou_drop": float(iou_pre) - float(iou_post),
        "acc_depth": float(acc),
        "sim_sam": float(sim),
        "detected_post": bool(sem_post.any()),
    }


def _dumbbell(g: DumbbellSpec) -> tuple[GaussianCloud, RemovalSet, dict[str, list[int]]]:
    rng = np.random.default_rng(g.seed)

    def ball(n: int, centre) -> np.ndarray:
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return np.asarray(centre) + d * rng.uniform(0, 1, size=(n, 1)) ** (1 / 3)

    side = max(1, int(round(math.sqrt(g.n_support))))
    gx, gz = np.meshgrid(np.linspace(-1, 1, side), np.linspace(-1, 1, side))
    support = np.stack([gx.ravel(), np.full(side * side, -1.15), gz.ravel()], axis=1)[: g.n_support]
    bridge = np.stack([np.linspace(1.0, 3.0, g.n_bridge), np.zeros(g.n_bridge), np.zeros(g.n_bridge)], axis=1)
    parts = [ball(g.n_object, (0, 0, 0)), bridge, ball(g.n_far, (4, 0, 0)), support]
    positions = np.concatenate(parts)
    n = len(positions)
    n_obj = g.n_object

    basis = np.eye(g.feature_dim)
    centres = np.empty((n, g.feature_dim))
    centres[:n_obj] = basis[0]
    centres[n_obj:n_obj + g.n_bridge + g.n_far] = basis[1]
    centres[n_obj + g.n_bridge + g.n_far:] = basis[2]
    features = centres + g.feature_noise * rng.normal(size=centres.shape)

    n_res = int(round(g.residual_fraction * n_obj))
    residual = np.sort(rng.choice(n_obj, size=n_res, replace=False))
    seed_flags = np.zeros(n, dtype=bool)
    seed_flags[:n_obj] = True
    seed_flags[residual] = False

    cloud = GaussianCloud.from_arrays(
        positions.astype(np.float32),
        np.full((n, 3), math.log(g.splat_scale), dtype=np.float32),
        features=features.astype(np.float32),
    )
    groups = {
        "object_seed": [int(i) for i in np.flatnonzero(seed_flags)],
        "residual": [int(i) for i in residual],
        "background": list(range(n_obj, n)),
    }
    return cloud, RemovalSet(seed_flags, "seed"), groups


def gen_fixture(spec: FixtureSpec | Mapping[str, Any], out_dir: str | Path) -> dict[str, Any]:
    """Write a fixture (manifest, rasters, optional PLY) and ``expected.json``; returns the expectations."""
    if not isinstance(spec, FixtureSpec):
        spec = FixtureSpec.from_mapping(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    views, expected_views = [], {}
    for v in range(spec.n_views):
        vid = f"{v:03d}"
        layers = _view_layers(spec, v)
        paths = {
            "object_mask": f"object/{vid}.png",
            "semantic_pre": f"semantic_pre/{vid}.png",
            "semantic_post": f"semantic_post/{vid}.png",
            "sam_pre": f"sam_pre/{vid}",
            "sam_post": f"sam_post/{vid}",
            "depth_pre": f"depth_pre/{vid}.pfm",
            "depth_post": f"depth_post/{vid}.pfm",
        }
        for key in ("object_mask", "semantic_pre", "semantic_post", "depth_pre", "depth_post", "sam_pre", "sam_post"):
            (out / paths[key]).parent.mkdir(parents=True, exist_ok=True)
        save_mask(BinaryMask(layers["object"]), out / paths["object_mask"])
        save_mask(BinaryMask(layers["semantic_pre"]), out / paths["semantic_pre"])
        if layers["semantic_post"].any() or v % 2 == 0:
            save_mask(BinaryMask(layers["semantic_post"]), out / paths["semantic_post"])
        else:
            # no prediction at all: the segmenter found nothing
            paths["semantic_post"] = None
        for key in ("sam_pre", "sam_post"):
            masks = [BinaryMask(m) for m in layers[key]]
            save_mask_set(MaskSet(tuple(masks)), out / paths[key])
        save_depth(DepthMap(layers["depth_pre"]), out / paths["depth_pre"])
        save_depth(DepthMap(layers["depth_post"]), out / paths["depth_post"])
        views.append({"view_id": vid, **paths})
        expected_views[vid] = _expected_view(layers)

    manifest: dict[str, Any] = {
        "schema_version": 1,
        "scene_id": spec.scene_id,
        "object_id": spec.object_id,
        "method_id": spec.method_id,
        "views": views,
    }
    rows = list(expected_views.values())
    expected: dict[str, Any] = {
        "spec": spec.to_dict(),
        "views": expected_views,
        "summary": {
            "miou_pre": math.fsum(r["iou_pre"] for r in rows) / len(rows),
            "miou_post": math.fsum(r["iou_post"] for r in rows) / len(rows),
            "iou_drop": math.fsum(r["iou_drop"] for r in rows) / len(rows),
            "mean_acc_depth": math.fsum(r["acc_depth"] for r in rows) / len(rows),
            "mean_sim_sam": math.fsum(r["sim_sam"] for r in rows) / len(rows),
        },
    }

    if spec.gaussians is not None:
        cloud, seed, groups = _dumbbell(spec.gaussians)
        save_ply(cloud, out / "scene.ply")
        save_removal_set(seed, out / "seed.txt")
        (out / "refine.json").write_text(json.dumps({"k_neighbors": 10, "delta": 0.8}, indent=2) + "\n")
        manifest.update({"ply": "scene.ply", "removal_set": "seed.txt", "refine_config": "refine.json"})
        expected["refine"] = groups

    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / "expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    return expected


__all__ = ["DumbbellSpec", "FixtureError", "FixtureSpec", "expected_sim_sam", "gen_fixture"]
