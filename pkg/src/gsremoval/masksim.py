"""Similarity between "segment anything" mask sets before and after removal.

Masks overlapping the removed object are kept, matched one-to-one so that the
summed IoU of the matches is maximal, and the sum is normalised by the larger
of the two filtered set sizes. Lower values mean the scene around the object
changed more.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.optimize import linear_sum_assignment

from .raster import BinaryMask, MaskSet, RasterError

DEFAULT_OVERLAP = 0.1

# Cost for pairs that do not overlap. Real pairs cost -IoU < 0, so a zero
# cost never improves an assignment and such pairs are simply left out. A
# positive penalty would be wrong here: the solver must fill every row of a
# square matrix and would trade one strong pair for several weak ones to
# avoid paying it.
_FORBIDDEN = 0.0


@dataclass(frozen=True)
class MaskMatching:
    pairs: tuple[tuple[int, int, float], ...]
    n_filtered_a: int
    n_filtered_b: int
    total_exact: Fraction = Fraction(0)

    @property
    def total(self) -> float:
        return float(self.total_exact)


@dataclass(frozen=True)
class SimSamResult:
    value: float
    matching: MaskMatching
    kept_a: tuple[int, ...]
    kept_b: tuple[int, ...]
    no_overlap: bool


def _check_dims(masks: MaskSet, ref: BinaryMask | tuple[int, int] | None) -> None:
    if ref is None or len(masks) == 0:
        return
    shape = ref.shape if isinstance(ref, BinaryMask) else ref
    if masks.shape != shape:
        raise RasterError(f"mask set has dimensions {masks.shape}, expected {shape}")


def _overlap_counts(stack: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise intersection and union counts between two ``(N, P)`` boolean stacks."""
    a = stack.astype(np.int64)
    b = other.astype(np.int64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return inter, union


def iou_matrix(a: MaskSet, b: MaskSet) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(intersection, union)`` integer matrices of shape ``(len(a), len(b))``."""
    if len(a) and len(b) and a.shape != b.shape:
        raise RasterError(f"mask sets have different dimensions: {a.shape} vs {b.shape}")
    if len(a) == 0 or len(b) == 0:
        z = np.zeros((len(a), len(b)), dtype=np.int64)
        return z, z.copy()
    return _overlap_counts(a.stack().reshape(len(a), -1), b.stack().reshape(len(b), -1))


def _ratio(inter: np.ndarray, union: np.ndarray) -> np.ndarray:
    out = np.ones(inter.shape, dtype=float)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def filter_object_masks(
    masks: MaskSet,
    object_mask: BinaryMask,
    tau: float = DEFAULT_OVERLAP,
    use_mask_area: bool = False,
) -> list[int]:
    """Indices of masks overlapping the object by at least ``tau``, in original order.

    By default the overlap is the IoU with the object. With ``use_mask_area``
    it is the fraction of the candidate mask lying inside the object, which
    keeps small parts of a large object.
    """
    _check_dims(masks, object_mask)
    if len(masks) == 0 or object_mask.area == 0:
        return []
    stack = masks.stack().reshape(len(masks), -1)
    obj = object_mask.bits.reshape(1, -1)
    inter, union = _overlap_counts(stack, obj)
    inter, union = inter[:, 0], union[:, 0]
    if use_mask_area:
        denom = stack.sum(1)
    else:
        denom = union
    # exact rational comparison inter / denom >= tau
    keep = []
    tau_q = Fraction(tau).limit_denominator(10**12) if isinstance(tau, float) else Fraction(tau)
    for i in range(len(masks)):
        if denom[i] > 0 and inter[i] > 0 and Fraction(int(inter[i]), int(denom[i])) >= tau_q:
            keep.append(i)
    return keep


def _solve(cost: np.ndarray, rows: list[int], cols: list[int]) -> list[tuple[int, int]]:
    """Optimal assignment on a sub-matrix; forbidden pairs are dropped."""
    if not rows or not cols:
        return []
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return [(rows[i], cols[j]) for i, j in zip(r, c) if sub[i, j] < _FORBIDDEN]


def match_masks(a: MaskSet, b: MaskSet) -> MaskMatching:
    """One-to-one matching of ``a`` and ``b`` maximising the summed IoU.

    Pairs without overlap never match. Among optimal matchings the one chosen
    gives each row of ``a`` in turn the lowest column index compatible with
    optimality (rows left unmatched only when no column is).
    """
    inter, union = iou_matrix(a, b)
    n, m = inter.shape
    if n == 0 or m == 0:
        return MaskMatching((), n, m)
    ious = _ratio(inter, union)
    overlap = inter > 0
    cost = np.where(overlap, -ious, _FORBIDDEN)

    def exact(pairs) -> Fraction:
        return sum((Fraction(int(inter[i, j]), int(union[i, j])) for i, j in pairs), Fraction(0))

    best = exact(_solve(cost, list(range(n)), list(range(m))))
    fixed: list[tuple[int, int]] = []
    fixed_value = Fraction(0)
    free_cols = list(range(m))
    for i in range(n):
        later_rows = list(range(i + 1, n))
        chosen = None
        for j in free_cols:
            if not overlap[i, j]:
                continue
            rest_cols = [c for c in free_cols if c != j]
            rest = _solve(cost, later_rows, rest_cols)
            pair_value = Fraction(int(inter[i, j]), int(union[i, j]))
            candidate = fixed_value + pair_value + exact(rest)
            if candidate >= best:
                best = candidate
                chosen = j
                break
        if chosen is not None:
            fixed.append((i, chosen))
            fixed_value += Fraction(int(inter[i, chosen]), int(union[i, chosen]))
            free_cols.remove(chosen)
    pairs = tuple((i, j, float(ious[i, j])) for i, j in fixed)
    return MaskMatching(pairs, n, m, fixed_value)


def sim_sam_detailed(
    a_raw: MaskSet,
    b_raw: MaskSet,
    object_mask: BinaryMask,
    tau: float = DEFAULT_OVERLAP,
    use_mask_area: bool = False,
) -> SimSamResult:
    _check_dims(a_raw, object_mask)
    _check_dims(b_raw, object_mask)
    keep_a = filter_object_masks(a_raw, object_mask, tau, use_mask_area)
    keep_b = filter_object_masks(b_raw, object_mask, tau, use_mask_area)
    matching = match_masks(a_raw.subset(keep_a), b_raw.subset(keep_b))
    denom = max(len(keep_a), len(keep_b))
    if denom == 0:
        return SimSamResult(0.0, matching, tuple(keep_a), tuple(keep_b), True)
    value = float(matching.total_exact / denom)
    return SimSamResult(value, matching, tuple(keep_a), tuple(keep_b), False)


def sim_sam(
    a_raw: MaskSet,
    b_raw: MaskSet,
    object_mask: BinaryMask,
    tau: float = DEFAULT_OVERLAP,
    use_mask_area: bool = False,
) -> float:
    """Mask-set similarity in [0, 1]; 0.0 when neither set overlaps the object."""
    return sim_sam_detailed(a_raw, b_raw, object_mask, tau, use_mask_area).value
