"""Raster data model: binary masks, mask sets and depth maps.

Masks are stored as read-only ``(H, W)`` boolean arrays. Depth maps carry a
separate validity raster since renderers leave pixels undefined where no
Gaussian is hit.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from PIL import Image

PathLike = Union[str, os.PathLike]

MASK_SUFFIXES = (".png", ".pgm")
FOREGROUND_LEVEL = 127


class RasterError(ValueError):
    """Raised for malformed raster files or inconsistent raster shapes."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class BinaryMask:
    """Boolean foreground raster.

    Args:
        bits: ``(H, W)`` array; anything truthy is foreground.
    """

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise RasterError(f"mask must be 2D, got shape {bits.shape}")
        if bits.shape[0] == 0 or bits.shape[1] == 0:
            raise RasterError("mask must have positive width and height")
        object.__setattr__(self, "bits", _frozen(bits.astype(bool, copy=True)))

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # type: ignore[return-value]

    @property
    def area(self) -> int:
        return int(np.count_nonzero(self.bits))

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self.bits)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))


@dataclass(frozen=True)
class MaskSet:
    """Ordered collection of same-sized masks.

    The position of a mask in ``masks`` is its identity for tie-breaking, so
    the order is never rearranged after construction.
    """

    masks: tuple[BinaryMask, ...] = field(default_factory=tuple)
    names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        masks = tuple(self.masks)
        object.__setattr__(self, "masks", masks)
        names = tuple(self.names) if self.names else tuple(str(i) for i in range(len(masks)))
        if len(names) != len(masks):
            raise RasterError("names must match masks one-to-one")
        object.__setattr__(self, "names", names)
        shapes = {m.shape for m in masks}
        if len(shapes) > 1:
            raise RasterError(f"mask set mixes dimensions {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self) -> Iterator[BinaryMask]:
        return iter(self.masks)

    def __getitem__(self, i: int) -> BinaryMask:
        return self.masks[i]

    @property
    def shape(self) -> tuple[int, int] | None:
        return self.masks[0].shape if self.masks else None

    def stack(self) -> np.ndarray:
        """Return the masks as an ``(N, H, W)`` boolean array."""
        if not self.masks:
            return np.zeros((0, 0, 0), dtype=bool)
        return np.stack([m.bits for m in self.masks])

    def subset(self, indices: Sequence[int]) -> "MaskSet":
        return MaskSet(tuple(self.masks[i] for i in indices), tuple(self.names[i] for i in indices))


@dataclass(frozen=True)
class DepthMap:
    """Rendered depth raster with a per-pixel validity flag."""

    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or 0 in values.shape:
            raise RasterError(f"depth map must be a non-empty 2D array, got {values.shape}")
        valid = np.isfinite(values) & (values >= 0)
        if self.valid is not None:
            given = np.asarray(self.valid, dtype=bool)
            if given.shape != values.shape:
                raise RasterError("validity raster does not match depth shape")
            valid &= given
        object.__setattr__(self, "values", _frozen(values.copy()))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


def check_same_shape(a, b, what: str = "masks") -> None:
    if a.shape != b.shape:
        raise RasterError(f"{what} have different dimensions: {a.shape} vs {b.shape}")


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union of two masks.

    Two empty masks agree perfectly and score 1.0.
    """
    check_same_shape(a, b)
    inter = np.count_nonzero(a.bits & b.bits)
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 1.0
    return inter / union


def iou_counts(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    """Return ``(intersection, union)`` pixel counts."""
    check_same_shape(a, b)
    return int(np.count_nonzero(a.bits & b.bits)), int(np.count_nonzero(a.bits | b.bits))


# --------------------------------------------------------------------------
# mask files


def load_mask(path: PathLike) -> BinaryMask:
    """Read an 8-bit PNG/PGM mask; values above 127 are foreground.

    Multi-channel images are accepted only when every colour channel holds the
    same value at each pixel (alpha is ignored).
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise RasterError(f"cannot read mask {path}: {exc}") from exc

    if mode == "1":
        return BinaryMask(arr.astype(bool))
    if mode in ("L", "P"):
        if mode == "P":
            raise RasterError(f"{path}: palette images are not supported as masks")
        return BinaryMask(arr > FOREGROUND_LEVEL)
    if mode in ("LA", "RGB", "RGBA"):
        colour = arr[..., :1] if mode == "LA" else arr[..., :3]
        if not np.all(colour == colour[..., :1]):
            raise RasterError(f"{path}: multi-channel mask with disagreeing channels")
        return BinaryMask(colour[..., 0] > FOREGROUND_LEVEL)
    raise RasterError(f"{path}: unsupported image mode {mode!r}; expected 8-bit single channel")


def save_mask(mask: BinaryMask, path: PathLike) -> None:
    """Write a mask as an 8-bit image (0 / 255). Format follows the suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.bits.astype(np.uint8) * 255, mode="L").save(path)


def load_mask_set(directory: PathLike) -> MaskSet:
    """Load every PNG/PGM in ``directory``; sorted file names fix the order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise RasterError(f"mask-set directory not found: {directory}")
    files = sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in MASK_SUFFIXES)
    masks = [load_mask(p) for p in files]
    shapes: dict[tuple[int, int], list[str]] = {}
    for p, m in zip(files, masks):
        shapes.setdefault(m.shape, []).append(p.name)
    if len(shapes) > 1:
        # the majority shape is assumed intended; report the rest
        majority = max(shapes, key=lambda s: len(shapes[s]))
        offenders = [f"{n} {s[1]}x{s[0]}" for s, names in shapes.items() if s != majority for n in names]
        raise RasterError(
            f"{directory}: mixed mask dimensions (expected {majority[1]}x{majority[0]}); offenders: "
            + ", ".join(offenders)
        )
    return MaskSet(tuple(masks), tuple(p.name for p in files))


def save_mask_set(masks: MaskSet, directory: PathLike, prefix: str = "mask") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(masks))))
    for i, m in enumerate(masks):
        save_mask(m, directory / f"{prefix}_{i:0{width}d}.png")


# --------------------------------------------------------------------------
# PFM depth

_PFM_DIMS = re.compile(rb"^\s*(\d+)\s+(\d+)\s*$")


def _read_header_line(fh) -> bytes:
    line = fh.readline()
    if not line:
        raise RasterError("truncated PFM header")
    return line.strip()


def load_depth(path: PathLike) -> DepthMap:
    """Read a single-channel Portable FloatMap.

    The sign of the header scale selects byte order (negative = little
    endian). Its magnitude is not applied to the samples. Rows are stored
    bottom-up in PFM and are flipped to top-down here. NaN, infinite and
    negative samples are marked invalid.
    """
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise RasterError(f"cannot read depth {path}: {exc}") from exc
    with fh:
        magic = _read_header_line(fh)
        if magic == b"PF":
            raise RasterError(f"{path}: 3-channel PFM, expected single channel")
        if magic != b"Pf":
            raise RasterError(f"{path}: not a PFM file (magic {magic!r})")
        dims = _PFM_DIMS.match(_read_header_line(fh))
        if dims is None:
            raise RasterError(f"{path}: malformed PFM dimension line")
        width, height = int(dims.group(1)), int(dims.group(2))
        try:
            scale = float(_read_header_line(fh))
        except ValueError as exc:
            raise RasterError(f"{path}: malformed PFM scale line") from exc
        if scale == 0 or not np.isfinite(scale):
            raise RasterError(f"{path}: PFM scale must be non-zero and finite")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        raw = fh.read()
    expected = width * height * 4
    if width == 0 or height == 0 or len(raw) < expected:
        raise RasterError(f"{path}: PFM payload has {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw[:expected], dtype=dtype).reshape(height, width)
    return DepthMap(np.flipud(data).astype(np.float32))


def save_depth(depth: DepthMap | np.ndarray, path: PathLike) -> None:
    """Write a little-endian single-channel PFM (scale -1)."""
    values = depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float32)
    if isinstance(depth, DepthMap):
        values = np.where(depth.valid, values, np.float32(np.nan))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        fh.write(np.flipud(values).astype("<f4").tobytes())
