"""Slow, independent reference implementations used to check the library.

Nothing here imports the code under test; inputs and outputs are plain numpy
arrays, Python numbers and Fractions.
"""

from __future__ import annotations

import functools
import itertools
import math
from fractions import Fraction

import numpy as np


def frac_iou(a: np.ndarray, b: np.ndarray) -> Fraction:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int((a | b).sum())
    return Fraction(1) if union == 0 else Fraction(int((a & b).sum()), union)


def best_matching_total(a: list[np.ndarray], b: list[np.ndarray]) -> Fraction:
    """Maximum summed IoU over every injective partial matching of ``a`` into ``b``.

    Only pairs sharing at least one pixel can match. Each row is either left
    unmatched or paired with every still-free column in turn; memoising on
    the set of used columns keeps the enumeration fast without pruning any
    matching.
    """
    ious = [[frac_iou(x, y) if (x & y).any() else Fraction(0) for y in b] for x in a]
    n, m = len(a), len(b)

    @functools.lru_cache(maxsize=None)
    def go(i: int, used: int) -> Fraction:
        if i == n:
            return Fraction(0)
        best = go(i + 1, used)
        for j in range(m):
            if not used >> j & 1 and ious[i][j] > 0:
                best = max(best, ious[i][j] + go(i + 1, used | 1 << j))
        return best

    return go(0, 0)


def sim_sam_reference(a: list[np.ndarray], b: list[np.ndarray], obj: np.ndarray, tau=Fraction(1, 10)):
    fa = [m for m in a if frac_iou(m, obj) >= tau and (m & obj).any()]
    fb = [m for m in b if frac_iou(m, obj) >= tau and (m & obj).any()]
    if not fa and not fb:
        return Fraction(0), fa, fb
    return best_matching_total(fa, fb) / max(len(fa), len(fb)), fa, fb


def otsu_bin(counts) -> int:
    """Otsu split index by exact between-class variance.

    Split ``k`` puts bins ``0..k`` in the lower class; bin positions are the
    bin indices. Ties go to the floor of the mean tied index.
    """
    counts = [int(c) for c in counts]
    total = sum(counts)
    s_total = sum(i * c for i, c in enumerate(counts))
    scores = []
    w0 = s0 = 0
    for k in range(len(counts) - 1):
        w0 += counts[k]
        s0 += k * counts[k]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            scores.append(Fraction(0))
            continue
        # w0 * w1 * (mu0 - mu1)^2, scaled by total^2
        diff = Fraction(s0 * total - w0 * s_total)
        scores.append(diff * diff / (w0 * w1))
    top = max(scores)
    tied = [k for k, s in enumerate(scores) if s == top]
    return math.floor(sum(tied) / len(tied))


def intersecting_pairs(pos: np.ndarray, radii: np.ndarray) -> set[tuple[int, int]]:
    out = set()
    for i in range(len(pos)):
        for j in range(len(pos)):
            if i != j and math.dist(pos[i], pos[j]) < radii[i] + radii[j]:
                out.add((i, j))
    return out


def candidates(pos: np.ndarray, log_scales: np.ndarray, seed: np.ndarray) -> list[int]:
    radii = np.exp(log_scales).max(axis=1)
    pairs = intersecting_pairs(pos, radii)
    return sorted(i for i in range(len(pos)) if seed[i] or any((i, j) in pairs for j in np.flatnonzero(seed)))


def knn_graph(pos: np.ndarray, feats: np.ndarray, k: int, delta: float, lam: float = 1.0):
    """Edges ``{(u, v): weight}`` with ``u < v`` from an O(n^2) neighbour search."""
    n = len(pos)
    edges = {}
    for i in range(n):
        order = sorted((math.dist(pos[i], pos[j]), j) for j in range(n) if j != i)
        for _, j in order[:k]:
            d = float(np.linalg.norm(feats[i] - feats[j]))
            if 1.0 / (1.0 + d) >= delta:
                edges[(min(i, j), max(i, j))] = lam * math.exp(-d)
    return edges


def binary_energy(labels, prior_flags, edges, eps=1e-2, floor=1e-8, label_weights=(1.0, 1.0)) -> float:
    """Energy of a 0/1 labelling (1 = remove) written out term by term."""
    total = 0.0
    for y, s in zip(labels, prior_flags):
        target = (eps, 1 - eps) if s else (1 - eps, eps)
        x = (1.0 - y, float(y))
        for t, xv in zip(target, x):
            total += t * math.log(t / max(xv, floor))
    for (u, v), w in edges.items():
        total += w * (label_weights[0] + label_weights[1]) * abs(labels[u] - labels[v])
    return total


def exhaustive_binary_min(prior_flags, edges, **kw) -> tuple[float, tuple[int, ...]]:
    best = (math.inf, ())
    for labels in itertools.product((0, 1), repeat=len(prior_flags)):
        e = binary_energy(labels, prior_flags, edges, **kw)
        if e < best[0]:
            best = (e, labels)
    return best


def exhaustive_binary_min_array(prior_flags, eu, ev, w, eps=1e-2, floor=1e-8) -> tuple[float, np.ndarray]:
    """Vectorised enumeration of all ``2**n`` labellings (for n up to ~20)."""
    n = len(prior_flags)
    labels = (np.arange(2**n)[:, None] >> np.arange(n)[None, :]) & 1
    p = np.where(np.asarray(prior_flags) > 0.5, 1 - eps, eps)
    # cost of label 1 (remove) and label 0 (keep) per node
    cost1 = p * np.log(p) + (1 - p) * np.log((1 - p) / floor)
    cost0 = p * np.log(p / floor) + (1 - p) * np.log(1 - p)
    data = np.where(labels == 1, cost1, cost0).sum(1)
    tv = (2 * np.asarray(w)[None, :] * (labels[:, eu] != labels[:, ev])).sum(1) if len(eu) else 0.0
    e = data + tv
    k = int(np.argmin(e))
    return float(e[k]), labels[k]
