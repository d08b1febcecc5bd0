"""Surrogate-based calibration of unknown O-D demand entries.

The first ``unknown_pair_count`` entries of the demand matrix (lexicographic
pair order) are treated as unknowns in [0, 7000]; the rest stay at their known
values.  The "true" arc times come from one noiseless equilibrium run on the
full matrix, and a candidate's objective is the mean relative discrepancy of
its noisy simulated arc times against those true times.

Two search modes share the loop: "full-space" runs Bayesian optimization
directly on the affinely scaled unknowns, "latent" first trains the
shared-encoder metamodel on everything evaluated so far and searches the
(-1, 1)^d latent box, decoding proposals back through the (clipped) decoder.

Simulator evaluations inside one batch are independent pure functions of
(theta, seed) and may run concurrently; surrogate fitting and proposal stay
single-threaded.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .assignment import AssignmentConfig, noisy_arc_times, solve_user_equilibrium
from .errors import ConfigError
from .gp import GaussianProcessSurrogate, propose_batch
from .network import Network, ODMatrix
from .neural import AutoencoderRegressor

MODES = ("latent", "full-space")


def latin_hypercube_design(lower, upper, n: int, seed: int) -> np.ndarray:
    """n points stratified per axis: one draw in each of the n equal strata
    of every dimension, stratum order shuffled independently per dimension."""
    if n < 2:
        raise ValueError("a Latin hypercube design needs n >= 2")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    d = len(lower)
    rng = np.random.default_rng(seed)
    unit = (rng.permuted(np.tile(np.arange(n), (d, 1)), axis=1).T + rng.random((n, d))) / n
    return lower + unit * (upper - lower)


@dataclass(frozen=True)
class CalibrationConfig:
    unknown_pair_count: int = 20
    lower_bound: float = 0.0
    upper_bound: float = 7000.0
    initial_design_size: int = 40
    batch_size: int = 8
    iteration_budget: int = 120
    retrain_interval: int = 1  # batches between metamodel refits
    noise_sigma: float = 0.05
    replications: int = 1
    seed: int = 0
    latent_dim: int = 5
    metamodel_epochs: int = 100
    metamodel_penalty_weight: float = 1.0
    metamodel_l2: float = 1e-4
    n_jobs: int = 1
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)

    def __post_init__(self):
        if self.iteration_budget < self.initial_design_size:
            raise ConfigError("iteration_budget must be >= initial_design_size")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.initial_design_size < 2:
            raise ConfigError("initial_design_size must be >= 2")


@dataclass
class EvaluationRecord:
    theta: np.ndarray
    latent: np.ndarray | None
    arc_times: np.ndarray
    objective: float


@dataclass
class CalibrationState:
    evaluated: list[EvaluationRecord]
    best_objective: float
    best_theta: np.ndarray
    trace: list[tuple[int, int, float]]  # (iteration, evaluations, best so far)
    mode: str
    true_theta: np.ndarray
    true_times: np.ndarray

    def thetas(self) -> np.ndarray:
        return np.array([r.theta for r in self.evaluated])

    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.evaluated])


class DemandSimulator:
    """Simulator handle: merge candidate unknowns into the known demand and
    return one seeded draw of noisy equilibrium arc times."""

    def __init__(self, net: Network, base_od: ODMatrix, unknown_pairs,
                 assignment: AssignmentConfig, noise_sigma: float,
                 replications: int = 1):
        self.net = net
        self.base_od = base_od
        self.unknown_pairs = tuple(unknown_pairs)
        self.assignment = assignment
        self.noise_sigma = noise_sigma
        self.replications = replications

    def merged_od(self, theta: np.ndarray) -> ODMatrix:
        if len(theta) != len(self.unknown_pairs):
            raise ValueError("candidate length does not match unknown pair count")
        return self.base_od.with_updates(dict(zip(self.unknown_pairs, map(float, theta))))

    def arc_times(self, theta: np.ndarray, seed: int) -> np.ndarray:
        return noisy_arc_times(
            self.net, self.merged_od(theta), self.assignment,
            self.noise_sigma, seed, self.replications,
        )


def calibration_objective(sim: DemandSimulator, theta: np.ndarray,
                          true_times: np.ndarray, seed: int) -> float:
    """Mean over links of |simulated - true| / true arc time."""
    times = sim.arc_times(theta, seed)
    return float(np.mean(np.abs(times - true_times) / true_times))


def _evaluation_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _evaluate_candidates(sim, thetas, true_times, master_seed, first_index, n_jobs):
    """Evaluate a batch; results are collected in candidate order, so the
    concurrent path aggregates exactly like the sequential one."""

    def one(i_theta):
        i, theta = i_theta
        times = sim.arc_times(theta, _evaluation_seed(master_seed, first_index + i))
        return times, float(np.mean(np.abs(times - true_times) / true_times))

    tasks = list(enumerate(thetas))
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(one, tasks))
    return [one(t) for t in tasks]


def _scale_to_unit(theta, lower, upper):
    return 2.0 * (theta - lower) / (upper - lower) - 1.0


def _unscale_from_unit(z, lower, upper):
    return lower + (np.clip(z, -1.0, 1.0) + 1.0) * (upper - lower) / 2.0


def _standardize(values: np.ndarray) -> np.ndarray:
    std = values.std()
    if std < 1e-12:
        std = 1.0
    return (values - values.mean()) / std


def _spread_decoded(metamodel, picks: np.ndarray, candidates: np.ndarray,
                    rng: np.random.Generator, tol: float = 1.0):
    """Re-perturb latent picks whose decoded candidates collapse together.

    A saturated encoder can map distinct latent points onto one decoded
    candidate; evaluating copies wastes budget, so collapsed picks are moved
    (with growing radius) until their decoded images separate.
    """
    picks = picks.copy()
    candidates = candidates.copy()
    for i in range(1, len(candidates)):
        radius = 0.05
        for _ in range(60):
            dists = np.linalg.norm(candidates[:i] - candidates[i], axis=1)
            if np.min(dists) >= tol:
                break
            picks[i] = np.clip(
                picks[i] + rng.uniform(-radius, radius, size=picks.shape[1]), -1.0, 1.0
            )
            candidates[i] = metamodel.inverse_transform(picks[i][None, :])[0]
            radius = min(radius * 1.5, 1.0)
    return picks, candidates


def _merge_close_points(Z: np.ndarray, values: np.ndarray, tol: float = 1e-8):
    """Collapse working-space points closer than tol, averaging their values.

    Distinct candidates may encode (or clip) to the same coordinates; the GP
    treats such repeats as replicated noisy observations of one point.
    """
    kept: list[int] = []
    groups: list[list[int]] = []
    for i, z in enumerate(Z):
        for g, j in enumerate(kept):
            if np.linalg.norm(z - Z[j]) < tol:
                groups[g].append(i)
                break
        else:
            kept.append(i)
            groups.append([i])
    if len(kept) == len(Z):
        return Z, values
    merged = np.array([values[g].mean() for g in groups])
    return Z[kept], merged


def run_calibration(cfg: CalibrationConfig, net: Network, base_od: ODMatrix,
                    mode: str = "latent") -> CalibrationState:
    """Full calibration loop; returns the complete evaluation trace.

    Ground truth is built internally: the unknowns' true values are the
    demand matrix's first ``unknown_pair_count`` entries, and true times come
    from one noiseless equilibrium run on the full matrix.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    pairs = base_od.pairs()
    if len(pairs) < cfg.unknown_pair_count:
        raise ConfigError("demand matrix has fewer pairs than unknown_pair_count")
    unknown_pairs = pairs[: cfg.unknown_pair_count]
    true_theta = np.array([base_od[p] for p in unknown_pairs])
    true_times = solve_user_equilibrium(net, base_od, cfg.assignment).link_times

    sim = DemandSimulator(net, base_od, unknown_pairs, cfg.assignment,
                          cfg.noise_sigma, cfg.replications)
    d = cfg.unknown_pair_count
    lower = np.full(d, cfg.lower_bound)
    upper = np.full(d, cfg.upper_bound)

    state = CalibrationState(
        evaluated=[], best_objective=np.inf, best_theta=true_theta * np.nan,
        trace=[], mode=mode, true_theta=true_theta, true_times=true_times,
    )

    def record(thetas, results):
        for theta, (times, objective) in zip(thetas, results):
            state.evaluated.append(
                EvaluationRecord(np.asarray(theta, dtype=float), None, times, objective)
            )
            if objective < state.best_objective:  # earliest evaluation wins ties
                state.best_objective = objective
                state.best_theta = np.asarray(theta, dtype=float)

    design = latin_hypercube_design(lower, upper, cfg.initial_design_size, cfg.seed)
    results = _evaluate_candidates(sim, design, true_times, cfg.seed, 0, cfg.n_jobs)
    record(design, results)
    state.trace.append((0, len(state.evaluated), state.best_objective))

    metamodel: AutoencoderRegressor | None = None
    batch_index = 0
    while len(state.evaluated) < cfg.iteration_budget:
        q = min(cfg.batch_size, cfg.iteration_budget - len(state.evaluated))
        thetas = state.thetas()
        values = _standardize(state.objectives())

        if mode == "latent":
            if metamodel is None or batch_index % cfg.retrain_interval == 0:
                metamodel = AutoencoderRegressor(
                    latent_dim=cfg.latent_dim,
                    epochs=cfg.metamodel_epochs,
                    penalty_weight=cfg.metamodel_penalty_weight,
                    l2_penalty=cfg.metamodel_l2,
                    seed=cfg.seed,
                    bounds=(cfg.lower_bound, cfg.upper_bound),
                )
                metamodel.fit(thetas, np.array([r.arc_times for r in state.evaluated]))
            Z = metamodel.transform(thetas)
            box_dim = cfg.latent_dim
        else:
            Z = _scale_to_unit(thetas, lower, upper)
            box_dim = d

        Z, values = _merge_close_points(Z, values)
        gp = GaussianProcessSurrogate().fit(Z, values)
        picks = propose_batch(
            gp, q, -np.ones(box_dim), np.ones(box_dim),
            seed=_evaluation_seed(cfg.seed, 1_000_000 + batch_index),
        )
        if mode == "latent":
            candidates = metamodel.inverse_transform(picks)
            picks, candidates = _spread_decoded(
                metamodel, picks, candidates,
                np.random.default_rng(_evaluation_seed(cfg.seed, 2_000_000 + batch_index)),
            )
        else:
            candidates = _unscale_from_unit(picks, lower, upper)
        candidates = np.clip(candidates, lower, upper)

        results = _evaluate_candidates(
            sim, candidates, true_times, cfg.seed, len(state.evaluated), cfg.n_jobs
        )
        start = len(state.evaluated)
        record(candidates, results)
        if mode == "latent":
            for rec, z in zip(state.evaluated[start:], picks):
                rec.latent = np.asarray(z, dtype=float)
        batch_index += 1
        state.trace.append((batch_index, len(state.evaluated), state.best_objective))
    return state
