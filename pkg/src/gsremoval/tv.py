"""Graph total-variation minimisation for two-label simplex problems.

With two labels a simplex point is ``(1 - q, q)`` and the problem becomes

    min_q  sum_v f_v(q_v) + sum_(u,v) c_uv |q_u - q_v|,    q in [lo, hi]^n

with ``f_v`` a smoothed KL divergence to the node's prior. It is solved by cut
pursuit: the nodes are partitioned into components sharing one value, the
reduced problem on components is solved, and components are split along the
steepest binary descent direction (a min cut) until no split lowers the
energy. Every partition refines the previous one, so the energy recorded after
each reduced solve never increases.

Reduced problems are solved exactly (to ``~1e-13``) by parametric max-flow:
for a threshold ``t`` the nodes whose optimal value exceeds ``t`` form a
minimum cut with unary costs ``f_v'(t)``, and bisecting ``t`` per group of
nodes recovers every value. Nodes that never separate end with bit-identical
values, so plateaus are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import maxflow
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

# log() guard for the KL data term
KL_FLOOR = 1e-8

_BISECTION_STEPS = 44
_BIG = 1e30


class NumericalFailure(ArithmeticError):
    def __init__(self, message: str, trace: list[float]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TVProblem:
    """Edges ``(eu[i], ev[i])`` with TV weight ``ec[i]``; ``prior[v]`` is the smoothed removal prior."""

    n: int
    eu: np.ndarray
    ev: np.ndarray
    ec: np.ndarray
    prior: np.ndarray
    lo: float = KL_FLOOR
    hi: float = 1.0 - KL_FLOOR

    def __post_init__(self) -> None:
        self.eu = np.asarray(self.eu, dtype=np.int64)
        self.ev = np.asarray(self.ev, dtype=np.int64)
        self.ec = np.asarray(self.ec, dtype=np.float64)
        self.prior = np.asarray(self.prior, dtype=np.float64)


@dataclass
class TVSolution:
    q: np.ndarray
    trace: list[float] = field(default_factory=list)
    status: str = "converged"
    iterations: int = 0
    n_components: int = 0


def kl_data(prior: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Per-node ``KL((1 - p, p) || (1 - q, q))`` with the denominator floored at ``KL_FLOOR``."""
    p1 = prior
    p0 = 1.0 - prior
    return p1 * np.log(p1 / np.maximum(q, KL_FLOOR)) + p0 * np.log(p0 / np.maximum(1.0 - q, KL_FLOOR))


def tv_energy(problem: TVProblem, q: np.ndarray) -> float:
    data = kl_data(problem.prior, q)
    tv = problem.ec * np.abs(q[problem.eu] - q[problem.ev])
    return float(np.sum(data) + np.sum(tv))


def min_cut(n: int, unary: np.ndarray, eu: np.ndarray, ev: np.ndarray, ec: np.ndarray) -> np.ndarray:
    """Binary labelling minimising ``sum_{v in S} unary_v + sum_{cut edges} ec``; returns ``v in S``."""
    g = maxflow.Graph[float](n, len(eu))
    nodes = g.add_nodes(n)
    if len(eu):
        g.add_edges(nodes[eu], nodes[ev], ec, ec)
    g.add_grid_tedges(nodes, np.maximum(-unary, 0.0), np.maximum(unary, 0.0))
    g.maxflow()
    return ~g.get_grid_segments(nodes)


def solve_levels(
    n: int,
    eu: np.ndarray,
    ev: np.ndarray,
    ec: np.ndarray,
    mass0: np.ndarray,
    mass1: np.ndarray,
    lo: float,
    hi: float,
    steps: int = _BISECTION_STEPS,
) -> np.ndarray:
    """Exact minimiser of ``sum_v -mass1_v log q_v - mass0_v log(1 - q_v) + TV`` on ``[lo, hi]``."""
    lo_v = np.full(n, lo)
    hi_v = np.full(n, hi)
    for _ in range(steps):
        t = 0.5 * (lo_v + hi_v)
        unary = -mass1 / t + mass0 / (1.0 - t)
        same = lo_v[eu] == lo_v[ev]
        if not np.all(same):
            cu, cv, cc = eu[~same], ev[~same], ec[~same]
            u_above = lo_v[cu] > lo_v[cv]
            np.add.at(unary, cv, np.where(u_above, -cc, cc))
            np.add.at(unary, cu, np.where(u_above, cc, -cc))
        above = min_cut(n, unary, eu[same], ev[same], ec[same])
        lo_v = np.where(above, t, lo_v)
        hi_v = np.where(above, hi_v, t)
    return 0.5 * (lo_v + hi_v)


def _components(n: int, eu: np.ndarray, ev: np.ndarray) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    adj = coo_matrix((np.ones(len(eu)), (eu, ev)), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    return labels.astype(np.int64)


def _reduce(problem: TVProblem, comp: np.ndarray):
    r = int(comp.max()) + 1
    mass1 = np.bincount(comp, weights=problem.prior, minlength=r)
    mass0 = np.bincount(comp, weights=1.0 - problem.prior, minlength=r)
    cu, cv = comp[problem.eu], comp[problem.ev]
    cross = cu != cv
    a = np.minimum(cu[cross], cv[cross])
    b = np.maximum(cu[cross], cv[cross])
    if a.size:
        keys, inverse = np.unique(a * r + b, return_inverse=True)
        weights = np.bincount(inverse, weights=problem.ec[cross], minlength=len(keys))
        ru, rv = keys // r, keys % r
    else:
        ru = rv = np.zeros(0, dtype=np.int64)
        weights = np.zeros(0)
    return r, ru, rv, weights, mass0, mass1


def solve_tv(problem: TVProblem, max_iters: int = 100, tol: float = 1e-10) -> TVSolution:
    """Cut-pursuit minimisation; see the module docstring."""
    n = problem.n
    if n == 0:
        return TVSolution(np.zeros(0), [], "converged", 0, 0)
    eu, ev, ec = problem.eu, problem.ev, problem.ec
    p1 = problem.prior
    p0 = 1.0 - p1
    comp = _components(n, eu, ev)
    trace: list[float] = []
    status = "max-iters"
    q = np.empty(n)
    it = 0
    for it in range(1, max_iters + 1):
        r, ru, rv, rw, m0, m1 = _reduce(problem, comp)
        qc = solve_levels(r, ru, rv, rw, m0, m1, problem.lo, problem.hi)
        # adjacent components that landed on the same value become one
        equal = qc[ru] == qc[rv]
        if np.any(equal):
            merged = _components(r, ru[equal], rv[equal])
            qc = np.bincount(merged, weights=qc, minlength=merged.max() + 1) / np.bincount(merged)
            comp = merged[comp]
        q = qc[comp]
        energy = tv_energy(problem, q)
        if not np.isfinite(energy):
            raise NumericalFailure("energy is not finite", trace + [energy])
        trace.append(energy)
        if len(trace) >= 2 and trace[-2] - energy <= tol * max(abs(energy), 1.0):
            status = "converged"
            break

        # steepest binary split of each component
        grad = -p1 / q + p0 / (1.0 - q)
        inner = comp[eu] == comp[ev]
        cu, cv, cc = eu[~inner], ev[~inner], ec[~inner]
        sgn = np.sign(q[cu] - q[cv])
        np.add.at(grad, cu, cc * sgn)
        np.add.at(grad, cv, -cc * sgn)
        unary = grad.copy()
        unary[q >= problem.hi] = _BIG
        unary[q <= problem.lo] = -_BIG
        iu, iv, ic = eu[inner], ev[inner], ec[inner]
        up = min_cut(n, unary, iu, iv, ic)

        signed = np.where(up, grad, -grad)
        r = int(comp.max()) + 1
        split_cost = np.bincount(comp, weights=signed, minlength=r)
        disagree = up[iu] != up[iv]
        split_cost += np.bincount(comp[iu][disagree], weights=2.0 * ic[disagree], minlength=r)
        all_up = np.bincount(comp, weights=grad, minlength=r)
        scale = np.bincount(comp, weights=np.abs(grad), minlength=r) + 1.0
        improving = split_cost < np.minimum(all_up, -all_up) - 1e-12 * scale
        if not np.any(improving):
            status = "converged"
            break
        side = np.where(improving[comp], up.astype(np.int64), 0)
        keep = (comp[eu] == comp[ev]) & (side[eu] == side[ev])
        comp = _components(n, eu[keep], ev[keep])
    return TVSolution(q, trace, status, it, int(comp.max()) + 1)
