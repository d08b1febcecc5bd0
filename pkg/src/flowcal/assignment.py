"""Static user-equilibrium traffic assignment by the Frank-Wolfe method.

The volume-delay curve is the BPR function with per-link (alpha, beta) taken
from the TNTP file.  Each iteration loads all demand onto current shortest
paths (all-or-nothing), then moves along the segment toward that assignment
with the exact step found by bisection on the directional derivative of the
Beckmann potential.  The relative gap is

    (sum_a x_a t_a - sum_a y_a t_a) / sum_a x_a t_a

with t evaluated at the current flows x and y the all-or-nothing flows;
several gap conventions exist, so this one is fixed here and in the docs.

Solving is a pure function of (network, demand, config): concurrent solves on
a shared immutable network are safe.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra

from .errors import DataError, NumericError
from .network import Link, Network, ODMatrix

_UNREACHABLE = -9999  # scipy's predecessor sentinel


@dataclass(frozen=True)
class AssignmentConfig:
    max_iterations: int = 500
    gap_tolerance: float = 1e-4
    line_search_tolerance: float = 1e-8

    def __post_init__(self):
        if self.max_iterations <= 0 or self.gap_tolerance <= 0 or (
            self.line_search_tolerance <= 0
        ):
            raise ValueError("AssignmentConfig fields must be strictly positive")


@dataclass
class FlowSolution:
    """Equilibrium flows and times, plus convergence bookkeeping."""

    link_flows: np.ndarray
    link_times: np.ndarray
    total_system_travel_time: float
    relative_gap: float
    iterations: int


@dataclass
class SolveTrace:
    """Per-iteration diagnostics from one Frank-Wolfe run.

    ``recent_aon`` keeps the last few (step size, predecessor-node matrix)
    pairs so used paths can be reconstructed by flow decomposition; rows of
    each matrix align with ``origins``.
    """

    beckmann: list[float]
    relative_gap: list[float]
    recent_aon: list[tuple[float, np.ndarray]]
    origins: list[int]


def link_travel_time(link: Link, flow: float) -> float:
    """BPR travel time of one link at the given flow (vehicles/hour)."""
    if flow < 0:
        raise ValueError(f"flow must be non-negative, got {flow}")
    return link.free_flow_time * (
        1.0 + link.vdf_alpha * (flow / link.capacity) ** link.vdf_beta
    )


class _Graph:
    """Cached vectorized view of a network for repeated solves."""

    def __init__(self, net: Network):
        self.net = net
        n = net.num_nodes
        self.n_nodes = n
        links = net.links
        self.from_idx = np.array([l.from_node - 1 for l in links], dtype=np.int64)
        self.to_idx = np.array([l.to_node - 1 for l in links], dtype=np.int64)
        self.capacity = np.array([l.capacity for l in links], dtype=float)
        self.fft = np.array([l.free_flow_time for l in links], dtype=float)
        self.alpha = np.array([l.vdf_alpha for l in links], dtype=float)
        self.beta = np.array([l.vdf_beta for l in links], dtype=float)

        # Group parallel links by (from, to); lexsort is stable, so ties in
        # per-pair argmin fall to the first link in file order.
        order = np.lexsort((self.to_idx, self.from_idx))
        keys = self.from_idx[order] * n + self.to_idx[order]
        unique_keys, starts = np.unique(keys, return_index=True)
        self.pair_order = order
        self.pair_starts = starts
        self.has_parallels = len(unique_keys) != len(links)
        self.pair_from = (unique_keys // n).astype(np.int64)
        self.pair_to = (unique_keys % n).astype(np.int64)

        self.pair_of = np.full((n, n), -1, dtype=np.int64)
        self.pair_of[self.pair_from, self.pair_to] = np.arange(len(unique_keys))

        template = csr_matrix(
            (np.arange(len(unique_keys), dtype=float), (self.pair_from, self.pair_to)),
            shape=(n, n),
        )
        self.csr_perm = template.data.astype(np.int64)
        self.matrix = template

    def pair_reduce(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Min time and the carrying link index for every (from, to) pair."""
        sorted_times = times[self.pair_order]
        if not self.has_parallels:
            return sorted_times, self.pair_order
        values = np.minimum.reduceat(sorted_times, self.pair_starts)
        chosen = np.empty(len(self.pair_starts), dtype=np.int64)
        bounds = np.append(self.pair_starts, len(times))
        for i in range(len(self.pair_starts)):
            lo, hi = bounds[i], bounds[i + 1]
            chosen[i] = self.pair_order[lo + int(np.argmin(sorted_times[lo:hi]))]
        return values, chosen

    def run_dijkstra(self, times: np.ndarray, origins0: np.ndarray):
        """Distances and predecessor nodes from each origin at these times."""
        pair_times, chosen = self.pair_reduce(times)
        self.matrix.data = pair_times[self.csr_perm]
        dist, pred = _csgraph_dijkstra(
            self.matrix, directed=True, indices=origins0, return_predecessors=True
        )
        return np.atleast_2d(dist), np.atleast_2d(pred), chosen

    def times_at(self, flows: np.ndarray) -> np.ndarray:
        return self.fft * (1.0 + self.alpha * (flows / self.capacity) ** self.beta)


@lru_cache(maxsize=16)
def _graph(net: Network) -> _Graph:
    return _Graph(net)


def _demand_arrays(od: ODMatrix):
    """(origin node ids, per-origin destination index arrays, demand arrays)."""
    origins, dest_arrays, demand_arrays = [], [], []
    for origin, pairs in sorted(od.by_origin().items()):
        origins.append(origin)
        dest_arrays.append(np.array([d - 1 for d, _ in pairs], dtype=np.int64))
        demand_arrays.append(np.array([v for _, v in pairs], dtype=float))
    return origins, dest_arrays, demand_arrays


def _pull_flows(g: _Graph, dist, pred, chosen, origin0, dests0, demands, out):
    """Accumulate one origin's all-or-nothing flows along the tree."""
    if np.any(np.isinf(dist[dests0])):
        bad = int(dests0[np.argmax(np.isinf(dist[dests0]))]) + 1
        raise DataError(f"no path from zone {origin0 + 1} to zone {bad}")
    node_flow = np.zeros(g.n_nodes)
    node_flow[dests0] = demands
    for v in np.argsort(dist)[::-1]:
        f = node_flow[v]
        if f <= 0.0 or v == origin0:
            continue
        u = pred[v]
        if u == _UNREACHABLE:
            continue  # unreachable node without demand
        link = chosen[g.pair_of[u, v]]
        out[link] += f
        node_flow[u] += f


def shortest_path_tree(net: Network, times: np.ndarray, origin: int):
    """One-to-all shortest paths at fixed link times.

    Returns (distances, predecessor nodes, predecessor links), all indexed by
    node id - 1; entries are -9999 / inf where no path exists.  An
    unreachable destination zone raises an error naming the pair.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0):
        raise ValueError("all link times must be strictly positive")
    g = _graph(net)
    dist, pred, chosen = g.run_dijkstra(times, np.array([origin - 1]))
    dist, pred = dist[0], pred[0]
    for zone in net.zone_nodes():
        if zone != origin and np.isinf(dist[zone - 1]):
            raise DataError(f"no path from zone {origin} to zone {zone}")
    pred_link = np.full(g.n_nodes, _UNREACHABLE, dtype=np.int64)
    reachable = np.flatnonzero(pred != _UNREACHABLE)
    for v in reachable:
        pred_link[v] = chosen[g.pair_of[pred[v], v]]
    return dist, pred, pred_link


def all_or_nothing(net: Network, times: np.ndarray, od: ODMatrix) -> np.ndarray:
    """Load every O-D demand entirely onto its current shortest path."""
    times = np.asarray(times, dtype=float)
    if np.any(times <= 0):
        raise ValueError("all link times must be strictly positive")
    g = _graph(net)
    flows = np.zeros(len(net.links))
    origins, dests, demands = _demand_arrays(od)
    if not origins:
        return flows
    origins0 = np.array([o - 1 for o in origins], dtype=np.int64)
    dist, pred, chosen = g.run_dijkstra(times, origins0)
    for i, o0 in enumerate(origins0):
        _pull_flows(g, dist[i], pred[i], chosen, o0, dests[i], demands[i], flows)
    return flows


def beckmann_objective(net: Network, flows: np.ndarray) -> float:
    """Sum over links of the BPR antiderivative at the given flows."""
    flows = np.asarray(flows, dtype=float)
    if np.any(flows < 0):
        raise ValueError("flows must be non-negative")
    g = _graph(net)
    ratio = flows / g.capacity
    return float(
        np.sum(g.fft * flows * (1.0 + g.alpha * ratio**g.beta / (g.beta + 1.0)))
    )


def _line_search(g: _Graph, x, d, tol: float) -> float:
    """Bisection on the directional derivative of the Beckmann potential."""

    def slope(lam: float) -> float:
        return float(np.dot(g.times_at(x + lam * d), d))

    if slope(0.0) >= 0.0:
        return 0.0
    if slope(1.0) <= 0.0:
        return 1.0
    lo, hi = 0.0, 1.0
    for _ in range(50):
        if hi - lo < tol:
            break
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def solve_user_equilibrium(
    net: Network,
    od: ODMatrix,
    cfg: AssignmentConfig = AssignmentConfig(),
    full_output: bool = False,
):
    """Frank-Wolfe user equilibrium.

    Returns a :class:`FlowSolution`; with ``full_output=True`` returns
    ``(solution, trace)`` where the trace carries per-iteration Beckmann
    values, relative gaps, and the recent all-or-nothing trees.
    """
    g = _graph(net)
    origins, dests, demands = _demand_arrays(od)
    origins0 = np.array([o - 1 for o in origins], dtype=np.int64)

    def aon(times: np.ndarray):
        flows = np.zeros(len(net.links))
        if not origins:
            return flows, np.zeros((0, g.n_nodes), dtype=np.int64)
        dist, pred, chosen = g.run_dijkstra(times, origins0)
        for i, o0 in enumerate(origins0):
            _pull_flows(g, dist[i], pred[i], chosen, o0, dests[i], demands[i], flows)
        return flows, pred

    trace = SolveTrace([], [], [], origins)
    recent: deque = deque(maxlen=5)
    x, _ = aon(g.times_at(np.zeros(len(net.links))))
    gap = np.inf
    iterations = 0
    for k in range(1, cfg.max_iterations + 1):
        iterations = k
        t = g.times_at(x)
        y, pred = aon(t)
        xt = float(np.dot(x, t))
        yt = float(np.dot(y, t))
        gap = (xt - yt) / xt if xt > 0 else 0.0
        trace.beckmann.append(beckmann_objective(net, x))
        trace.relative_gap.append(gap)
        if not (np.isfinite(xt) and np.isfinite(yt) and np.isfinite(gap)):
            raise NumericError(f"non-finite totals at iteration {k}")
        if gap <= cfg.gap_tolerance:
            break
        lam = _line_search(g, x, y - x, cfg.line_search_tolerance)
        if lam > 0.0:
            recent.append((lam, pred))
        x = x + lam * (y - x)
    trace.recent_aon = list(recent)

    t = g.times_at(x)
    solution = FlowSolution(
        link_flows=x,
        link_times=t,
        total_system_travel_time=float(np.dot(x, t)),
        relative_gap=gap,
        iterations=iterations,
    )
    if full_output:
        return solution, trace
    return solution


def noisy_arc_times(
    net: Network,
    od: ODMatrix,
    cfg: AssignmentConfig,
    noise_sigma: float,
    seed: int,
    replications: int = 1,
) -> np.ndarray:
    """Equilibrium arc times perturbed by multiplicative Gaussian noise.

    Each time is scaled by an independent (1 + eps) factor with
    eps ~ Normal(0, noise_sigma^2), then clamped from below at the free-flow
    time.  Deterministic for a fixed seed.  With ``replications`` > 1 the
    mean over independent draws is returned (one simulator call per draw is
    the default convention).
    """
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    g = _graph(net)
    times = solve_user_equilibrium(net, od, cfg).link_times
    rng = np.random.default_rng(seed)
    draws = np.empty((replications, len(times)))
    for r in range(replications):
        factors = 1.0 + rng.normal(0.0, noise_sigma, size=len(times))
        draws[r] = np.maximum(times * factors, g.fft)
    return draws.mean(axis=0)


def path_links(net: Network, pred_link: np.ndarray, origin: int, dest: int):
    """Link ids along the tree path origin -> dest (empty if unreachable)."""
    g = _graph(net)
    links: list[int] = []
    v = dest - 1
    while v != origin - 1:
        li = pred_link[v]
        if li == _UNREACHABLE:
            return []
        links.append(int(li))
        v = g.from_idx[li]
    links.reverse()
    return links
