"""Gaussian-splat clouds in the standard 3DGS PLY layout, removal sets, and the
geometric predicates used to pick refinement candidates.

The vertex table read from disk is kept verbatim so that saving reproduces
every property bit for bit, including ones this package does not interpret.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from plyfile import PlyData, PlyElement
from scipy.spatial import cKDTree

PathLike = Union[str, os.PathLike]

POSITION_FIELDS = ("x", "y", "z")
SCALE_FIELDS = ("scale_0", "scale_1", "scale_2")
ROTATION_FIELDS = ("rot_0", "rot_1", "rot_2", "rot_3")
OPACITY_FIELD = "opacity"
DC_FIELDS = ("f_dc_0", "f_dc_1", "f_dc_2")
REQUIRED_FIELDS = POSITION_FIELDS + SCALE_FIELDS + ROTATION_FIELDS + (OPACITY_FIELD,) + DC_FIELDS

SIDECAR_SUFFIX = ".features.json"
SIDECAR_FORMAT = "gsremoval-features"


class PlyFormatError(ValueError):
    pass


class GraphEmpty(RuntimeError):
    """No candidate splats or no graph edges survive filtering; refinement cannot run."""


def _indexed(names: Sequence[str], prefix: str) -> list[str]:
    pat = re.compile(rf"^{prefix}_(\d+)$")
    hits = [(int(m.group(1)), n) for n in names if (m := pat.match(n))]
    return [n for _, n in sorted(hits)]


@dataclass(frozen=True)
class GaussianCloud:
    """A 3DGS point cloud.

    Args:
        vertex: structured array with one record per splat (PLY vertex layout).
        external_features: optional ``(n, d)`` semantic features kept outside
            the vertex table (sidecar file).
    """

    vertex: np.ndarray
    external_features: np.ndarray | None = None

    def __post_init__(self) -> None:
        names = self.vertex.dtype.names or ()
        missing = [f for f in REQUIRED_FIELDS if f not in names]
        if missing:
            raise PlyFormatError("missing required vertex properties: " + ", ".join(missing))
        if self.external_features is not None:
            feats = np.asarray(self.external_features, dtype=np.float32)
            if feats.ndim != 2 or feats.shape[0] != len(self.vertex):
                raise PlyFormatError(
                    f"feature array shape {feats.shape} does not match {len(self.vertex)} splats"
                )
            object.__setattr__(self, "external_features", feats)
        scales = np.exp(self.log_scales)
        if not np.all(np.isfinite(scales) & (scales > 0)):
            raise PlyFormatError("splat scales must be finite and positive")

    @classmethod
    def from_arrays(
        cls,
        positions: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray | None = None,
        opacity_logits: np.ndarray | None = None,
        color_dc: np.ndarray | None = None,
        features: np.ndarray | None = None,
        features_in_vertex: bool = True,
    ) -> "GaussianCloud":
        positions = np.asarray(positions, dtype=np.float32).reshape(-1, 3)
        n = len(positions)
        log_scales = np.asarray(log_scales, dtype=np.float32).reshape(n, 3)
        if rotations is None:
            rotations = np.tile(np.array([1, 0, 0, 0], dtype=np.float32), (n, 1))
        rotations = np.asarray(rotations, dtype=np.float32).reshape(n, 4)
        opacity = np.zeros(n, np.float32) if opacity_logits is None else np.asarray(opacity_logits, np.float32)
        dc = np.zeros((n, 3), np.float32) if color_dc is None else np.asarray(color_dc, np.float32).reshape(n, 3)
        feats = None if features is None else np.asarray(features, dtype=np.float32).reshape(n, -1)

        fields = list(REQUIRED_FIELDS)
        if feats is not None and features_in_vertex:
            fields += [f"feature_{i}" for i in range(feats.shape[1])]
        vertex = np.zeros(n, dtype=[(f, "<f4") for f in fields])
        for i, f in enumerate(POSITION_FIELDS):
            vertex[f] = positions[:, i]
        for i, f in enumerate(SCALE_FIELDS):
            vertex[f] = log_scales[:, i]
        for i, f in enumerate(ROTATION_FIELDS):
            vertex[f] = rotations[:, i]
        vertex[OPACITY_FIELD] = opacity
        for i, f in enumerate(DC_FIELDS):
            vertex[f] = dc[:, i]
        if feats is not None and features_in_vertex:
            for i in range(feats.shape[1]):
                vertex[f"feature_{i}"] = feats[:, i]
            return cls(vertex)
        return cls(vertex, feats)

    def __len__(self) -> int:
        return len(self.vertex)

    @property
    def count(self) -> int:
        return len(self.vertex)

    def _columns(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.zeros((len(self.vertex), 0))
        return np.stack([self.vertex[n].astype(np.float64) for n in names], axis=1)

    @cached_property
    def positions(self) -> np.ndarray:
        return self._columns(POSITION_FIELDS)

    @cached_property
    def log_scales(self) -> np.ndarray:
        return self._columns(SCALE_FIELDS)

    @cached_property
    def rotations(self) -> np.ndarray:
        """Unit quaternions (normalised on access; the stored values stay untouched)."""
        q = self._columns(ROTATION_FIELDS)
        norm = np.linalg.norm(q, axis=1, keepdims=True)
        return np.divide(q, norm, out=np.tile([1.0, 0, 0, 0], (len(q), 1)), where=norm > 0)

    @cached_property
    def opacity_logits(self) -> np.ndarray:
        return self.vertex[OPACITY_FIELD].astype(np.float64)

    @cached_property
    def color_coeffs(self) -> np.ndarray:
        names = self.vertex.dtype.names
        return self._columns(list(DC_FIELDS) + _indexed(names, "f_rest"))

    @cached_property
    def max_scales(self) -> np.ndarray:
        return np.exp(self.log_scales).max(axis=1)

    @property
    def feature_fields(self) -> list[str]:
        return _indexed(self.vertex.dtype.names, "feature")

    @cached_property
    def features(self) -> np.ndarray | None:
        if self.external_features is not None:
            return self.external_features
        names = self.feature_fields
        if not names:
            return None
        return self._columns(names)

    @property
    def has_features(self) -> bool:
        return self.features is not None

    def subset(self, keep: np.ndarray) -> "GaussianCloud":
        keep = np.asarray(keep)
        ext = None if self.external_features is None else self.external_features[keep]
        return GaussianCloud(self.vertex[keep], ext)


@dataclass(frozen=True)
class RemovalSet:
    """Per-splat removal flags for one cloud."""

    flags: np.ndarray
    provenance: str = ""

    def __post_init__(self) -> None:
        flags = np.asarray(self.flags, dtype=bool).reshape(-1).copy()
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)

    @classmethod
    def from_indices(cls, indices: Sequence[int], count: int, provenance: str = "") -> "RemovalSet":
        flags = np.zeros(count, dtype=bool)
        idx = np.asarray(list(indices), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= count):
            raise IndexError(f"removal index out of range for {count} splats")
        flags[idx] = True
        return cls(flags, provenance)

    def __len__(self) -> int:
        return len(self.flags)

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    @property
    def n_removed(self) -> int:
        return int(np.count_nonzero(self.flags))

    def union(self, other: "RemovalSet", provenance: str | None = None) -> "RemovalSet":
        if len(other) != len(self):
            raise ValueError("removal sets refer to clouds of different size")
        return RemovalSet(self.flags | other.flags, provenance if provenance is not None else self.provenance)


# --------------------------------------------------------------------------
# PLY I/O


def _sidecar_path(ply_path: Path) -> Path:
    return ply_path.with_name(ply_path.name + SIDECAR_SUFFIX)


def load_ply(path: PathLike, features_path: PathLike | None = None) -> GaussianCloud:
    """Read a binary little-endian 3DGS PLY.

    Semantic features come from ``feature_*`` vertex properties or, when those
    are absent, from a sidecar (``<file>.features.json`` next to the PLY or an
    explicit ``features_path``).
    """
    path = Path(path)
    try:
        ply = PlyData.read(str(path))
    except (OSError, ValueError) as exc:
        raise PlyFormatError(f"cannot read PLY {path}: {exc}") from exc
    if ply.text:
        raise PlyFormatError(f"{path}: ascii PLY is not supported; expected binary_little_endian")
    if ply.byte_order not in ("<", "="):
        raise PlyFormatError(f"{path}: big-endian PLY is not supported")
    if "vertex" not in ply:
        raise PlyFormatError(f"{path}: no vertex element")
    vertex = np.array(ply["vertex"].data)
    names = vertex.dtype.names or ()
    missing = [f for f in REQUIRED_FIELDS if f not in names]
    if missing:
        raise PlyFormatError(f"{path}: missing required vertex properties: " + ", ".join(missing))

    external = None
    if not _indexed(names, "feature"):
        side = Path(features_path) if features_path is not None else _sidecar_path(path)
        if features_path is not None or side.exists():
            external = load_features_sidecar(side, expected_count=len(vertex))
    return GaussianCloud(vertex, external)


def save_ply(cloud: GaussianCloud, path: PathLike, removal: RemovalSet | None = None) -> None:
    """Write the cloud, dropping splats flagged in ``removal``; survivors keep their order.

    External features, if any, are written to a sidecar next to the PLY.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if removal is not None:
        if len(removal) != len(cloud):
            raise ValueError(f"removal set has {len(removal)} flags for {len(cloud)} splats")
        cloud = cloud.subset(~removal.flags)
    vertex = cloud.vertex.astype(cloud.vertex.dtype.newbyteorder("<"))
    element = PlyElement.describe(vertex, "vertex")
    tmp = path.with_name(path.name + ".tmp")
    PlyData([element], text=False, byte_order="<").write(str(tmp))
    os.replace(tmp, path)
    if cloud.external_features is not None:
        save_features_sidecar(cloud.external_features, _sidecar_path(path))


def load_features_sidecar(path: PathLike, expected_count: int | None = None) -> np.ndarray:
    """Load ``(n, d)`` features from a JSON header plus flat little-endian float32 data."""
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PlyFormatError(f"cannot read feature sidecar {path}: {exc}") from exc
    if header.get("format") != SIDECAR_FORMAT:
        raise PlyFormatError(f"{path}: not a feature sidecar")
    n, d = int(header["count"]), int(header["dim"])
    data_path = path.parent / header["data"]
    raw = np.fromfile(data_path, dtype="<f4")
    if raw.size != n * d:
        raise PlyFormatError(f"{data_path}: expected {n * d} floats, found {raw.size}")
    if expected_count is not None and n != expected_count:
        raise PlyFormatError(f"{path}: sidecar has {n} rows for {expected_count} splats")
    return raw.reshape(n, d).astype(np.float32)


def save_features_sidecar(features: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    features = np.asarray(features, dtype="<f4")
    data_name = path.name.replace(".json", ".bin") if path.name.endswith(".json") else path.name + ".bin"
    (path.parent / data_name).write_bytes(features.tobytes())
    header = {
        "format": SIDECAR_FORMAT,
        "version": 1,
        "count": int(features.shape[0]),
        "dim": int(features.shape[1]),
        "dtype": "float32",
        "byte_order": "little",
        "data": data_name,
    }
    path.write_text(json.dumps(header, indent=2) + "\n")


# --------------------------------------------------------------------------
# removal-set files


def save_removal_set(removal: RemovalSet, path: PathLike) -> None:
    """``.bits`` files hold a packed bitmask; anything else gets one index per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".bits":
        path.write_bytes(np.packbits(removal.flags, bitorder="little").tobytes())
    else:
        path.write_text("".join(f"{i}\n" for i in removal.indices))


def load_removal_set(path: PathLike, count: int, provenance: str | None = None) -> RemovalSet:
    path = Path(path)
    tag = provenance if provenance is not None else path.stem
    if path.suffix == ".bits":
        packed = np.frombuffer(path.read_bytes(), dtype=np.uint8)
        if packed.size != (count + 7) // 8:
            raise ValueError(f"{path}: bitmask holds {packed.size * 8} bits for {count} splats")
        return RemovalSet(np.unpackbits(packed, bitorder="little")[:count].astype(bool), tag)
    indices = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            indices.append(int(line))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: not an integer index: {line!r}") from exc
    return RemovalSet.from_indices(indices, count, tag)


# --------------------------------------------------------------------------
# geometric predicates


def largest_scale(cloud: GaussianCloud, i: int) -> float:
    """Largest axis scale of splat ``i`` (scales are stored as logs)."""
    if not 0 <= i < len(cloud):
        raise IndexError(f"splat index {i} out of range for {len(cloud)} splats")
    return float(cloud.max_scales[i])


def intersects(cloud: GaussianCloud, i: int, j: int) -> bool:
    """Sphere test: centre distance strictly below the sum of the largest scales."""
    for k in (i, j):
        if not 0 <= k < len(cloud):
            raise IndexError(f"splat index {k} out of range for {len(cloud)} splats")
    d = float(np.linalg.norm(cloud.positions[i] - cloud.positions[j]))
    return d < float(cloud.max_scales[i] + cloud.max_scales[j])


def candidate_filter(cloud: GaussianCloud, seed: RemovalSet) -> np.ndarray:
    """Seed splats plus every splat intersecting at least one of them, ascending.

    A KD-tree over the seed centres is queried with each splat's radius plus
    the largest seed radius; hits are confirmed with the exact strict test.
    """
    if len(seed) != len(cloud):
        raise ValueError(f"seed has {len(seed)} flags for {len(cloud)} splats")
    seed_idx = seed.indices
    if seed_idx.size == 0:
        raise GraphEmpty("graph empty: the seed removal set is empty")
    pos = cloud.positions
    radii = cloud.max_scales
    tree = cKDTree(pos[seed_idx])
    reach = radii + radii[seed_idx].max()
    keep = seed.flags.copy()
    others = np.flatnonzero(~seed.flags)
    hits = tree.query_ball_point(pos[others], reach[others])
    for j, near in zip(others, hits):
        if not near:
            continue
        near_idx = seed_idx[np.asarray(near)]
        d = np.linalg.norm(pos[near_idx] - pos[j], axis=1)
        if np.any(d < radii[near_idx] + radii[j]):
            keep[j] = True
    return np.flatnonzero(keep)
