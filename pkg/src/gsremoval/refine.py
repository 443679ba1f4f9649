"""Graph-based refinement of a removal set.

Candidate splats (the seed plus everything touching it) become graph nodes.
Each node links to those of its K nearest neighbours whose semantic features
are similar enough; edge weights decay with feature distance. A two-label
energy (smoothed KL prior + weighted total variation on the label simplex)
spreads the seed labels along the graph, and the splats with the highest
removal probabilities are added to the seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy.spatial import cKDTree

from .gaussians import GaussianCloud, GraphEmpty, RemovalSet, candidate_filter
from .tv import KL_FLOOR, NumericalFailure, TVProblem, kl_data, solve_tv

log = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-9

# (K, delta) per scene, object and base method; None where the graph came out
# empty and refinement was not possible.
PARAMETER_TABLE: dict[tuple[str, str, str], tuple[int, float] | None] = {
    ("counter", "plant", "fgs"): (10, 0.8),
    ("counter", "plant", "sags"): None,
    ("counter", "egg box", "fgs"): None,
    ("counter", "egg box", "sags"): (10, 0.8),
    ("room", "plant", "fgs"): (4, 1.0),
    ("room", "plant", "sags"): (5, 0.8),
    ("room", "slippers", "fgs"): None,
    ("room", "slippers", "sags"): (4, 1.0),
    ("room", "coffee table", "fgs"): (6, 1.0),
    ("kitchen", "truck", "fgs"): (4, 1.0),
    ("garden", "table", "sags"): (10, 0.8),
    ("garden", "vase", "fgs"): (4, 1.0),
    ("garden", "vase", "sags"): (10, 0.8),
}


class MissingFeatures(ValueError):
    pass


class OffSimplex(ValueError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    k_neighbors: int = 10
    delta: float = 0.8
    cut_percentile: float = 95.0
    tv_weight: float = 1.0
    kl_smoothing: float = 1e-2
    label_weights: tuple[float, float] = (1.0, 1.0)
    max_iters: int = 100
    tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be at least 1")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if not 0.0 < self.cut_percentile < 100.0:
            raise ValueError("cut_percentile must lie in (0, 100)")
        if not self.tv_weight > 0:
            raise ValueError("tv_weight must be positive")
        if not 0.0 < self.kl_smoothing < 0.5:
            raise ValueError("kl_smoothing must lie in (0, 0.5)")
        if len(self.label_weights) != 2 or min(self.label_weights) < 0:
            raise ValueError("label_weights must be two nonnegative numbers")
        object.__setattr__(self, "label_weights", tuple(float(w) for w in self.label_weights))
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RefineConfig":
        known = {f.name for f in fields(cls)}
        aliases = {"k": "k_neighbors", "lambda_tv": "tv_weight", "epsilon": "kl_smoothing"}
        kwargs = {}
        for key, value in data.items():
            key = aliases.get(key, key)
            if key not in known:
                raise ValueError(f"unknown refine config key {key!r}")
            kwargs[key] = tuple(value) if key == "label_weights" else value
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "RefineConfig":
        return cls.from_mapping(json.loads(Path(path).read_text()))

    @classmethod
    def for_scene(cls, scene: str, obj: str, method: str, **overrides) -> "RefineConfig":
        """Defaults from the tabulated per-scene graph parameters."""
        entry = PARAMETER_TABLE.get((scene.lower(), obj.lower(), method.lower()))
        if entry is not None:
            overrides = {"k_neighbors": entry[0], "delta": entry[1], **overrides}
        return cls(**overrides)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["label_weights"] = list(self.label_weights)
        return d


@dataclass(frozen=True)
class RefinementGraph:
    node_indices: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    edge_w: np.ndarray
    unary_init: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_indices)

    @property
    def n_edges(self) -> int:
        return len(self.edge_u)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(u), int(v), float(w)) for u, v, w in zip(self.edge_u, self.edge_v, self.edge_w)]


@dataclass
class SolveResult:
    probabilities: np.ndarray
    energy_trace: list[float]
    status: str
    iterations: int = 0


@dataclass
class RefinementResult:
    probabilities: np.ndarray
    refined_set: RemovalSet
    energy_trace: list[float] = field(default_factory=list)
    status: str = "converged"
    graph: RefinementGraph | None = None
    cut_nodes: np.ndarray | None = None
    message: str = ""

    @property
    def added(self) -> np.ndarray:
        """Cloud indices removed by refinement that the seed kept."""
        if self.graph is None or self.cut_nodes is None:
            return np.zeros(0, dtype=np.int64)
        nodes = self.graph.node_indices[self.cut_nodes]
        return nodes[~self.graph.unary_init[self.cut_nodes].astype(bool)]


def feature_similarity(fu: np.ndarray, fv: np.ndarray) -> float:
    """``1 / (1 + ||fu - fv||)``: 1 for identical features, towards 0 as they diverge."""
    fu = np.asarray(fu, dtype=np.float64)
    fv = np.asarray(fv, dtype=np.float64)
    if fu.shape != fv.shape:
        raise ValueError(f"feature dimensions differ: {fu.shape} vs {fv.shape}")
    return 1.0 / (1.0 + float(np.linalg.norm(fu - fv)))


def build_graph(cloud: GaussianCloud, seed: RemovalSet, cfg: RefineConfig = RefineConfig()) -> RefinementGraph:
    """KNN graph over candidate splats, gated by feature similarity >= delta.

    An undirected edge is kept when either endpoint selected the other.
    """
    feats_all = cloud.features
    if feats_all is None:
        raise MissingFeatures("cloud has no semantic features (feature_* properties or sidecar)")
    nodes = candidate_filter(cloud, seed)
    n = len(nodes)
    pos = cloud.positions[nodes]
    feats = np.asarray(feats_all, dtype=np.float64)[nodes]
    k = min(cfg.k_neighbors, n - 1)
    if k < 1:
        raise GraphEmpty("graph empty: a single candidate splat has no neighbours")

    _, nbr = cKDTree(pos).query(pos, k=k + 1)
    nbr = np.asarray(nbr).reshape(n, k + 1)
    rows = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = nbr[i]
        own = np.flatnonzero(row == i)
        rows[i] = np.delete(row, own[0]) if own.size else row[:k]
    src = np.repeat(np.arange(n), k)
    dst = rows.reshape(-1)
    dist = np.linalg.norm(feats[src] - feats[dst], axis=1)
    sim = 1.0 / (1.0 + dist)
    sel = sim >= cfg.delta
    a = np.minimum(src[sel], dst[sel])
    b = np.maximum(src[sel], dst[sel])
    keys = np.unique(a * n + b)
    eu, ev = keys // n, keys % n
    if len(eu) == 0:
        raise GraphEmpty(f"graph empty: no neighbour pair reaches feature similarity {cfg.delta}")
    w = cfg.tv_weight * np.exp(-np.linalg.norm(feats[eu] - feats[ev], axis=1))
    unary = seed.flags[nodes].astype(np.float64)
    return RefinementGraph(nodes, eu, ev, w, unary)


def smoothed_prior(graph: RefinementGraph, cfg: RefineConfig) -> np.ndarray:
    """Removal coordinate of the smoothed initial labels: ``1 - eps`` for seeds, ``eps`` otherwise."""
    eps = cfg.kl_smoothing
    return np.where(graph.unary_init > 0.5, 1.0 - eps, eps)


def _tv_problem(graph: RefinementGraph, cfg: RefineConfig) -> TVProblem:
    c = graph.edge_w * (cfg.label_weights[0] + cfg.label_weights[1])
    return TVProblem(graph.n_nodes, graph.edge_u, graph.edge_v, c, smoothed_prior(graph, cfg))


def to_simplex(q: np.ndarray) -> np.ndarray:
    """Stack removal probabilities into ``(retain, remove)`` simplex points."""
    q = np.asarray(q, dtype=np.float64)
    return np.stack([1.0 - q, q], axis=1)


def energy(graph: RefinementGraph, x: np.ndarray, cfg: RefineConfig = RefineConfig()) -> float:
    """Smoothed-KL data term plus weighted d1 total variation.

    ``x`` holds one ``(retain, remove)`` point per node and must lie on the
    simplex (within ``1e-9``); the indicator is infinite otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (graph.n_nodes, 2):
        raise ValueError(f"x must have shape ({graph.n_nodes}, 2), got {x.shape}")
    if np.any(x < -SIMPLEX_TOL) or np.any(np.abs(x.sum(1) - 1.0) > SIMPLEX_TOL):
        raise OffSimplex("x is off the simplex")
    prior = smoothed_prior(graph, cfg)
    target = np.stack([1.0 - prior, prior], axis=1)
    data = np.sum(target * np.log(target / np.maximum(x, KL_FLOOR)))
    wd = np.asarray(cfg.label_weights)
    tv = np.sum(graph.edge_w * (np.abs(x[graph.edge_u] - x[graph.edge_v]) @ wd))
    return float(data + tv)


def solve(graph: RefinementGraph, cfg: RefineConfig = RefineConfig()) -> SolveResult:
    """Minimise the refinement energy; returns per-node removal probabilities.

    Deterministic: no randomness, fixed edge order. Raises
    :class:`NumericalFailure` (with the trace so far) if the energy stops being
    finite.
    """
    sol = solve_tv(_tv_problem(graph, cfg), max_iters=cfg.max_iters, tol=cfg.tol)
    log.debug("solve: %s after %d iterations, %d components", sol.status, sol.iterations, sol.n_components)
    return SolveResult(sol.q, sol.trace, sol.status, sol.iterations)


def cut_mask(x_removal: np.ndarray, percentile: float = 95.0) -> np.ndarray:
    """Nodes at or above the cut level: the value of the ``ceil((100 - p)% * n)``-th highest probability.

    With distinct values exactly that many nodes are cut; ties at the cut
    level are all cut.
    """
    x = np.asarray(x_removal, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("no probabilities to cut")
    if not 0.0 < percentile < 100.0:
        raise ValueError("percentile must lie in (0, 100)")
    k = max(1, math.ceil((100.0 - percentile) * x.size / 100.0 - 1e-9))
    level = np.sort(x)[::-1][k - 1]
    return x >= level


def cut(
    x_removal: np.ndarray,
    seed: RemovalSet,
    percentile: float = 95.0,
    node_indices: np.ndarray | None = None,
) -> RemovalSet:
    """Seed plus the highest-probability nodes (``node_indices`` maps nodes to splats)."""
    mask = cut_mask(x_removal, percentile)
    nodes = np.arange(len(mask)) if node_indices is None else np.asarray(node_indices)
    if len(nodes) != len(mask):
        raise ValueError("node_indices must match the probability vector")
    flags = seed.flags.copy()
    flags[nodes[mask]] = True
    return RemovalSet(flags, "refined")


def refine(cloud: GaussianCloud, seed: RemovalSet, cfg: RefineConfig = RefineConfig()) -> RefinementResult:
    """Build the graph, solve, cut and merge with the seed.

    An empty graph is reported through ``status == "graph-empty"`` with the seed
    returned unchanged.
    """
    if cloud.features is None:
        raise MissingFeatures("cloud has no semantic features (feature_* properties or sidecar)")
    try:
        graph = build_graph(cloud, seed, cfg)
    except GraphEmpty as exc:
        return RefinementResult(np.zeros(0), seed, [], "graph-empty", None, None, str(exc))
    result = solve(graph, cfg)
    mask = cut_mask(result.probabilities, cfg.cut_percentile)
    refined = cut(result.probabilities, seed, cfg.cut_percentile, graph.node_indices)
    return RefinementResult(
        result.probabilities, refined, result.energy_trace, result.status, graph, mask,
        f"{int(np.count_nonzero(mask))} of {graph.n_nodes} candidates cut",
    )


__all__ = [
    "GraphEmpty",
    "MissingFeatures",
    "NumericalFailure",
    "OffSimplex",
    "PARAMETER_TABLE",
    "RefineConfig",
    "RefinementGraph",
    "RefinementResult",
    "SolveResult",
    "build_graph",
    "cut",
    "cut_mask",
    "energy",
    "feature_similarity",
    "kl_data",
    "refine",
    "smoothed_prior",
    "solve",
    "to_simplex",
]
