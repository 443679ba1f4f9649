"""Depth-change metric with an automatic threshold.

The threshold is picked on the histogram of absolute depth differences over
the whole image with Generalized Histogram Thresholding (GHT). The default
hyperparameters sit at the limit where GHT reduces to Otsu's method.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .raster import BinaryMask, DepthMap, RasterError, check_same_shape


class DepthMetricError(ValueError):
    pass


@dataclass(frozen=True)
class DepthDiffMap:
    diffs: np.ndarray
    valid: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.diffs.shape  # type: ignore[return-value]

    @property
    def height(self) -> int:
        return self.diffs.shape[0]

    @property
    def width(self) -> int:
        return self.diffs.shape[1]

    def valid_values(self) -> np.ndarray:
        return self.diffs[self.valid]


@dataclass(frozen=True)
class GhtConfig:
    """GHT hyperparameters.

    ``nu = inf`` with ``tau = 0`` and ``kappa = 0`` is the Otsu limit.
    """

    n_bins: int = 256
    nu: float = math.inf
    tau: float = 0.0
    kappa: float = 0.0
    omega: float = 0.5

    def __post_init__(self) -> None:
        if self.n_bins < 2:
            raise ValueError("n_bins must be at least 2")
        for name in ("nu", "tau", "kappa"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError("omega must lie in [0, 1]")


@dataclass(frozen=True)
class DepthThreshold:
    value: float
    split_bin: int | None
    degenerate: bool


def depth_diff(pre: DepthMap, post: DepthMap) -> DepthDiffMap:
    """Absolute per-pixel depth change; valid only where both renders are."""
    check_same_shape(pre, post, "depth maps")
    valid = pre.valid & post.valid
    diffs = np.abs(pre.values.astype(np.float64) - post.values.astype(np.float64))
    diffs = np.where(valid, diffs, 0.0)
    diffs.flags.writeable = False
    valid = valid.copy()
    valid.flags.writeable = False
    return DepthDiffMap(diffs, valid)


def _clip(z: np.ndarray) -> np.ndarray:
    return np.maximum(1e-30, z)


def ght_scores(counts: np.ndarray, cfg: GhtConfig = GhtConfig()) -> np.ndarray:
    """GHT objective for every split of ``counts``.

    Entry ``k`` scores the split putting bins ``0..k`` in the lower class. Bin
    positions are the bin indices, so the scores do not depend on the depth
    units.
    """
    n = np.asarray(counts, dtype=np.float64)
    if n.ndim != 1 or len(n) < 2 or np.any(n < 0):
        raise ValueError("counts must be a 1D nonnegative histogram with at least 2 bins")
    x = np.arange(len(n), dtype=np.float64)
    w0 = _clip(np.cumsum(n)[:-1])
    w1 = _clip(np.cumsum(n[::-1])[-2::-1])
    mu0 = np.cumsum(n * x)[:-1] / w0
    mu1 = np.cumsum((n * x)[::-1])[-2::-1] / w1
    d0 = np.cumsum(n * x**2)[:-1] - w0 * mu0**2
    d1 = np.cumsum((n * x**2)[::-1])[-2::-1] - w1 * mu1**2

    if math.isinf(cfg.nu):
        if cfg.tau == 0:
            # Otsu: minimise within-class scatter
            return -(d0 + d1)
        v0 = v1 = np.full_like(w0, cfg.tau**2)
    else:
        p0 = w0 / (w0 + w1)
        p1 = w1 / (w0 + w1)
        v0 = _clip((p0 * cfg.nu * cfg.tau**2 + d0) / (p0 * cfg.nu + w0))
        v1 = _clip((p1 * cfg.nu * cfg.tau**2 + d1) / (p1 * cfg.nu + w1))
    f0 = -d0 / v0 - w0 * np.log(v0) + 2 * (w0 + cfg.kappa * cfg.omega) * np.log(w0)
    f1 = -d1 / v1 - w1 * np.log(v1) + 2 * (w1 + cfg.kappa * (1 - cfg.omega)) * np.log(w1)
    return f0 + f1


def ght_select_bin(counts: np.ndarray, cfg: GhtConfig = GhtConfig()) -> int:
    """Index ``k`` of the best split; ties resolve to the floor of the tied indices' mean."""
    if math.isinf(cfg.nu) and cfg.tau == 0 and _integral(counts):
        best = _otsu_exact_argmax(counts)
    else:
        scores = ght_scores(counts, cfg)
        best = np.flatnonzero(scores == scores.max())
    return int(np.floor(np.mean(best)))


def _integral(counts) -> bool:
    n = np.asarray(counts)
    return n.dtype.kind in "iu" or bool(np.all(n == np.floor(n)))


def _otsu_exact_argmax(counts) -> list[int]:
    """Tied best Otsu splits, compared exactly in integer arithmetic.

    Minimising within-class scatter equals maximising
    ``(s0 * T - w0 * S)^2 / (w0 * w1)``; symmetric histograms tie exactly
    there while floating point splits the tie by an ulp.
    """
    c = [int(v) for v in np.asarray(counts)]
    total = sum(c)
    s_total = sum(i * v for i, v in enumerate(c))
    best: list[int] = []
    top_num, top_den = -1, 1
    w0 = s0 = 0
    for k in range(len(c) - 1):
        w0 += c[k]
        s0 += k * c[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            num, den = 0, 1
        else:
            num, den = (s0 * total - w0 * s_total) ** 2, w0 * w1
        lhs, rhs = num * top_den, top_num * den
        if lhs > rhs:
            best, top_num, top_den = [k], num, den
        elif lhs == rhs:
            best.append(k)
    return best


def diff_histogram(diff: DepthDiffMap, n_bins: int) -> tuple[np.ndarray, float]:
    """Histogram of valid differences over ``[0, max_diff]`` and the bin width."""
    values = diff.valid_values()
    top = float(values.max()) if values.size else 0.0
    if top <= 0:
        counts = np.zeros(n_bins, dtype=np.int64)
        counts[0] = values.size
        return counts, 0.0
    idx = np.floor(values / top * n_bins).astype(np.int64)
    np.clip(idx, 0, n_bins - 1, out=idx)
    return np.bincount(idx, minlength=n_bins), top / n_bins


def ght_threshold_detailed(diff: DepthDiffMap, cfg: GhtConfig = GhtConfig()) -> DepthThreshold:
    values = diff.valid_values()
    if values.size == 0:
        raise DepthMetricError("no valid depth differences")
    counts, width = diff_histogram(diff, cfg.n_bins)
    if np.count_nonzero(counts) < 2:
        # everything falls in one bin: nothing to separate
        return DepthThreshold(float(values.max()), None, True)
    k = ght_select_bin(counts, cfg)
    return DepthThreshold((k + 1) * width, k, False)


def ght_threshold(diff: DepthDiffMap, cfg: GhtConfig = GhtConfig()) -> float:
    """Depth-change threshold: the upper edge of the selected split bin."""
    return ght_threshold_detailed(diff, cfg).value


def acc_depth(diff: DepthDiffMap, object_mask: BinaryMask, xi_depth: float) -> float:
    """Fraction of valid object pixels whose depth changed by more than ``xi_depth``."""
    check_same_shape(diff, object_mask, "depth difference and object mask")
    if object_mask.area == 0:
        raise DepthMetricError("object mask is empty")
    region = object_mask.bits & diff.valid
    n = int(np.count_nonzero(region))
    if n == 0:
        raise DepthMetricError("object mask has no valid depth pixels")
    return int(np.count_nonzero(diff.diffs[region] > xi_depth)) / n


def change_mask(diff: DepthDiffMap, xi_depth: float) -> BinaryMask:
    """Pixels whose depth changed by more than the threshold (for inspection)."""
    return BinaryMask(diff.valid & (diff.diffs > xi_depth))


__all__ = [
    "DepthDiffMap",
    "DepthMetricError",
    "DepthThreshold",
    "GhtConfig",
    "RasterError",
    "acc_depth",
    "change_mask",
    "depth_diff",
    "diff_histogram",
    "ght_scores",
    "ght_select_bin",
    "ght_threshold",
    "ght_threshold_detailed",
]
