"""Demand-scheduling environment and deep Q-learning agent.

The environment is a 3-node network: demand from node 1 to node 2 arrives
over 24 periods, and each period the agent may delay up to 2 units to the
next period and reroute up to 2 units to node 3 (a farther alternative).
Infeasible requests are clipped, never rejected, and delaying is forbidden in
the last period so no demand outlives the horizon.  The reward is the
negative total system travel time of the period, computed in closed form on
the two links (equivalent to an equilibrium solve on this star network; a
config switch runs the full solver instead for fidelity checks).

The agent is a standard DQN: MLP Q-network over normalized state features,
epsilon-greedy exploration, uniform experience replay, a periodically frozen
target network, and one SGD step per environment step on the squared TD
error.  Training is single-threaded and deterministic per seed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError
from .network import Link, Network, ODMatrix
from . import assignment
from .neural import Gradients, MLPNetwork, _forward_cached, backprop, forward, init_mlp, sgd_step

N_ACTIONS = 9  # {0,1,2} delay x {0,1,2} reroute


def _default_direct_link() -> Link:
    return Link(id=1, from_node=1, to_node=2, capacity=2.0, free_flow_time=1.0,
                vdf_alpha=0.15, vdf_beta=4.0)


def _default_alternate_link() -> Link:
    return Link(id=2, from_node=1, to_node=3, capacity=4.0, free_flow_time=2.0,
                vdf_alpha=0.15, vdf_beta=4.0)


@dataclass(frozen=True)
class SchedulingEnvConfig:
    periods: int = 24
    max_demand: int = 4  # random profiles draw uniform integers 0..max_demand
    direct_link: Link = field(default_factory=_default_direct_link)
    alternate_link: Link = field(default_factory=_default_alternate_link)
    use_equilibrium_solver: bool = False
    demand_normalizer: float = 4.0
    carried_normalizer: float = 2.0
    residual_normalizer: float = 4.0


@dataclass(frozen=True)
class ScheduleState:
    t: int  # period index, 1-based
    current_demand: float
    carried_demand: float
    residual_rate: float


@dataclass(frozen=True)
class ScheduleAction:
    delay: int
    reroute: int

    def __post_init__(self):
        if self.delay not in (0, 1, 2) or self.reroute not in (0, 1, 2):
            raise ValueError("delay and reroute must be in {0, 1, 2}")

    @property
    def index(self) -> int:
        return 3 * self.delay + self.reroute

    @classmethod
    def from_index(cls, index: int) -> "ScheduleAction":
        if not 0 <= index < N_ACTIONS:
            raise ValueError(f"action index {index} outside 0..{N_ACTIONS - 1}")
        return cls(index // 3, index % 3)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray  # feature-vector form
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool


class SchedulingEnv:
    """Holds one demand profile; states are immutable snapshots."""

    def __init__(self, demand_profile, config: SchedulingEnvConfig = SchedulingEnvConfig()):
        profile = [float(v) for v in demand_profile]
        if len(profile) != config.periods:
            raise ConfigError(
                f"profile length {len(profile)} != {config.periods} periods"
            )
        if any(v < 0 for v in profile):
            raise ConfigError("demands must be non-negative")
        self.profile = tuple(profile)
        self.config = config

    def _residual_rate(self, t: int) -> float:
        # demand still to arrive after the next period, per remaining period;
        # the denominator 24-(t+1) is treated as 1 once it reaches zero
        remaining = sum(self.profile[t + 1 :])
        periods_left = self.config.periods - (t + 1)
        return remaining / max(periods_left, 1)

    def reset(self) -> ScheduleState:
        return ScheduleState(1, self.profile[0], 0.0, self._residual_rate(1))

    def _period_cost(self, arc12_flow: float, arc13_flow: float) -> float:
        cfg = self.config
        if cfg.use_equilibrium_solver:
            net = Network(nodes=(1, 2, 3), zones=3,
                          links=(cfg.direct_link, cfg.alternate_link))
            demand = {}
            if arc12_flow > 0:
                demand[(1, 2)] = arc12_flow
            if arc13_flow > 0:
                demand[(1, 3)] = arc13_flow
            sol = assignment.solve_user_equilibrium(net, ODMatrix(demand, 3))
            return sol.total_system_travel_time
        return arc12_flow * assignment.link_travel_time(cfg.direct_link, arc12_flow) + (
            arc13_flow * assignment.link_travel_time(cfg.alternate_link, arc13_flow)
        )

    def effective_flows(self, state: ScheduleState, action: ScheduleAction):
        """Clipped (delayed, arc 1-2, arc 1-3) amounts for this state/action."""
        available = state.current_demand + state.carried_demand
        effective_delay = min(float(action.delay), available)
        if state.t == self.config.periods:
            effective_delay = 0.0  # nothing may outlive the horizon
        effective_reroute = min(float(action.reroute), available - effective_delay)
        arc12_flow = available - effective_delay - effective_reroute
        return effective_delay, arc12_flow, effective_reroute

    def step(self, state: ScheduleState, action: ScheduleAction):
        """Returns (next_state, reward, terminal); infeasible actions clip."""
        cfg = self.config
        effective_delay, arc12_flow, arc13_flow = self.effective_flows(state, action)
        reward = -self._period_cost(arc12_flow, arc13_flow)

        terminal = state.t >= cfg.periods
        if terminal:
            next_state = ScheduleState(cfg.periods, 0.0, 0.0, 0.0)
        else:
            next_state = ScheduleState(
                state.t + 1,
                self.profile[state.t],
                float(effective_delay),
                self._residual_rate(state.t + 1),
            )
        return next_state, reward, terminal


def state_features(state: ScheduleState,
                   config: SchedulingEnvConfig = SchedulingEnvConfig()) -> np.ndarray:
    return np.array(
        [
            state.current_demand / config.demand_normalizer,
            state.carried_demand / config.carried_normalizer,
            state.residual_rate / config.residual_normalizer,
        ]
    )


def epsilon_greedy(qnet: MLPNetwork, features: np.ndarray, epsilon: float,
                   rng: np.random.Generator) -> ScheduleAction:
    """Uniform action with probability epsilon, else greedy with lowest-index
    tie-break.  No random draw is consumed when epsilon == 0."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be within [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return ScheduleAction.from_index(int(rng.integers(N_ACTIONS)))
    q = forward(qnet, features)
    return ScheduleAction.from_index(int(np.argmax(q)))


class ReplayBuffer:
    """Ring buffer; oldest transition evicted first at capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._storage: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._storage)

    def push(self, transition: Transition) -> None:
        if len(self._storage) < self.capacity:
            self._storage.append(transition)
        else:
            self._storage[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, k: int, rng: np.random.Generator) -> list[Transition]:
        """Uniform sample with replacement; requires at least k stored."""
        if len(self._storage) < k:
            raise ValueError(f"buffer holds {len(self._storage)} < {k} transitions")
        idx = rng.integers(len(self._storage), size=k)
        return [self._storage[i] for i in idx]


@dataclass(frozen=True)
class DQNConfig:
    gamma: float = 0.95
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 1500
    target_update_interval: int = 100
    batch_size: int = 64
    buffer_capacity: int = 10_000
    learning_rate: float = 6e-3
    train_steps_per_transition: int = 4
    episodes: int = 100
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must be in [0, 1)")
        if min(self.target_update_interval, self.batch_size, self.buffer_capacity,
               self.epsilon_decay_steps) < 1 or self.learning_rate <= 0:
            raise ConfigError("DQNConfig fields must be positive")

    def epsilon_at(self, step: int) -> float:
        frac = min(step / self.epsilon_decay_steps, 1.0)
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)


def dqn_target(transition: Transition, target_net: MLPNetwork, gamma: float) -> float:
    """r for terminal transitions, else r + gamma * max_a' Q_target(s', a')."""
    if transition.terminal:
        return transition.reward
    return transition.reward + gamma * float(np.max(forward(target_net, transition.next_state)))


def td_loss_and_grads(qnet: MLPNetwork, features: np.ndarray, actions: np.ndarray,
                      targets: np.ndarray):
    """Mean squared TD error and its gradient through the taken actions only."""
    cache = _forward_cached(qnet, features)
    q_all = cache[-1]
    rows = np.arange(len(actions))
    residual = q_all[rows, actions] - targets
    loss = float(np.mean(residual**2))
    grad_out = np.zeros_like(q_all)
    grad_out[rows, actions] = 2.0 * residual / len(actions)
    grads, _ = backprop(qnet, cache, grad_out)
    return loss, grads


def dqn_train_step(qnet: MLPNetwork, target_net: MLPNetwork,
                   batch: list[Transition], cfg: DQNConfig) -> float:
    """One SGD step on the batch; targets are held fixed. Returns pre-step loss."""
    if not batch:
        raise ValueError("batch must be nonempty")
    features = np.array([tr.state for tr in batch])
    actions = np.array([tr.action for tr in batch])
    targets = np.array([dqn_target(tr, target_net, cfg.gamma) for tr in batch])
    loss, grads = td_loss_and_grads(qnet, features, actions, targets)
    if not np.isfinite(loss):
        raise NumericError(f"non-finite TD loss {loss}")
    sgd_step(qnet, grads, cfg.learning_rate)
    return loss


def random_profile(rng: np.random.Generator,
                   config: SchedulingEnvConfig = SchedulingEnvConfig()) -> np.ndarray:
    return rng.integers(0, config.max_demand + 1, size=config.periods)


def train_dqn(env_config: SchedulingEnvConfig, cfg: DQNConfig):
    """Train on freshly sampled random demand profiles.

    Returns (trained Q-network, per-episode return list).  Deterministic for
    a fixed seed: one generator drives profiles, exploration, and sampling.
    """
    rng = np.random.default_rng(cfg.seed)
    qnet = init_mlp([3, *cfg.hidden, N_ACTIONS], rng)
    # zero output layer: the untrained net ties everywhere, so its greedy
    # policy is the do-nothing action and Q-values grow from a neutral start
    qnet.weights[-1][:] = 0.0
    target_net = qnet.copy()
    buffer = ReplayBuffer(cfg.buffer_capacity)
    returns: list[float] = []
    step_count = 0
    for _ in range(cfg.episodes):
        env = SchedulingEnv(random_profile(rng, env_config), env_config)
        state = env.reset()
        total = 0.0
        for _ in range(env_config.periods):
            feats = state_features(state, env_config)
            action = epsilon_greedy(qnet, feats, cfg.epsilon_at(step_count), rng)
            next_state, reward, terminal = env.step(state, action)
            buffer.push(
                Transition(feats, action.index, reward,
                           state_features(next_state, env_config), terminal)
            )
            if len(buffer) >= cfg.batch_size:
                for _ in range(cfg.train_steps_per_transition):
                    dqn_train_step(qnet, target_net, buffer.sample(cfg.batch_size, rng), cfg)
            step_count += 1
            if step_count % cfg.target_update_interval == 0:
                target_net = qnet.copy()
            total += reward
            state = next_state
            if terminal:
                break
        returns.append(total)
    return qnet, returns


@dataclass
class PeriodRow:
    hour: int
    original_demand: float
    arc12_demand: float
    arc13_demand: float
    original_time: float
    adjusted_time: float


@dataclass
class ScheduleReport:
    rows: list[PeriodRow]
    original_total_time: float
    adjusted_total_time: float

    @property
    def improvement_total(self) -> float:
        """1 - adjusted/original over summed vehicle-minutes."""
        if self.original_total_time == 0.0:
            return 0.0
        return 1.0 - self.adjusted_total_time / self.original_total_time

    @property
    def improvement_period_mean(self) -> float:
        """Mean per-period improvement over periods with nonzero original time."""
        ratios = [
            1.0 - row.adjusted_time / row.original_time
            for row in self.rows
            if row.original_time > 0.0
        ]
        return float(np.mean(ratios)) if ratios else 0.0


def evaluate_policy(qnet: MLPNetwork, demand_profile,
                    env_config: SchedulingEnvConfig = SchedulingEnvConfig()) -> ScheduleReport:
    """Greedy rollout with per-period comparison against the no-action baseline."""
    env = SchedulingEnv(demand_profile, env_config)
    rng = np.random.default_rng(0)  # never consumed at epsilon == 0
    state = env.reset()
    rows: list[PeriodRow] = []
    for hour in range(1, env_config.periods + 1):
        action = epsilon_greedy(qnet, state_features(state, env_config), 0.0, rng)
        _, arc12, arc13 = env.effective_flows(state, action)
        next_state, reward, terminal = env.step(state, action)
        original = env.profile[hour - 1]
        rows.append(
            PeriodRow(
                hour=hour,
                original_demand=original,
                arc12_demand=arc12,
                arc13_demand=arc13,
                original_time=env._period_cost(original, 0.0),
                adjusted_time=-reward,
            )
        )
        state = next_state
        if terminal:
            break
    return ScheduleReport(
        rows=rows,
        original_total_time=sum(r.original_time for r in rows),
        adjusted_total_time=sum(r.adjusted_time for r in rows),
    )


TABLE_I_PROFILE = (4, 2, 3, 1, 1, 3, 0, 0, 1, 1, 1, 2, 2, 4, 2, 1, 3, 2, 0, 2, 3, 2, 1, 2)
