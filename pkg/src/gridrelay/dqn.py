"""Independent dueling double Q-learner with proportional prioritized replay.

Each agent owns its own online/target network pair and its own replay
buffer; nothing is shared between agents except the linear exploration
schedule, which is a pure function of the episode index and therefore
identical for every agent at the same episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .env import Observation
from .nets import (
    NetworkSpec,
    NetworkState,
    backward,
    batch_observations,
    forward,
    init_network,
    optimize_step,
)


@dataclass(frozen=True)
class DqnConfig:
    gamma: float = 0.99
    lr: float = 1e-4
    batch: int = 32
    buffer_capacity: int = 50_000
    target_sync_period: int = 1_000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_fraction: float = 0.8
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_epsilon: float = 1e-3
    huber_delta: float = 1.0

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.per_alpha < 0.0:
            raise ValueError(f"per_alpha must be >= 0, got {self.per_alpha}")
        if not 0.0 < self.per_beta_start <= 1.0:
            raise ValueError(f"per_beta_start must be in (0, 1], got {self.per_beta_start}")
        if self.eps_end > self.eps_start:
            raise ValueError("eps_end must be <= eps_start")
        if self.batch < 1 or self.buffer_capacity < self.batch:
            raise ValueError("need buffer_capacity >= batch >= 1")


@dataclass
class Transition:
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminal: bool

    def __post_init__(self):
        if not 0 <= self.action < 5:
            raise ValueError(f"action must be in [0, 5), got {self.action}")
        if not math.isfinite(self.reward):
            raise ValueError(f"reward must be finite, got {self.reward}")


def epsilon_at(episode: int, total_episodes: int, cfg: DqnConfig) -> float:
    """Shared linear exploration schedule, flat after the decay horizon."""
    horizon = cfg.eps_decay_fraction * total_episodes
    if horizon <= 0:
        return cfg.eps_end
    frac = min(1.0, episode / horizon)
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def beta_at(episode: int, total_episodes: int, cfg: DqnConfig) -> float:
    """Importance-sampling exponent annealed linearly to 1 over training."""
    if total_episodes <= 1:
        return 1.0
    frac = min(1.0, episode / (total_episodes - 1))
    return cfg.per_beta_start + (1.0 - cfg.per_beta_start) * frac


def dueling_aggregate(v, adv):
    """Q(a) = V + A(a) - mean(A); accepts a single vector or a batch."""
    adv = np.asarray(adv, dtype=float)
    v = np.asarray(v, dtype=float)
    if adv.ndim == 1:
        return v + adv - adv.mean()
    return v[:, None] + adv - adv.mean(axis=1, keepdims=True)


def huber(delta, d: float = 1.0):
    delta = np.asarray(delta, dtype=float)
    a = np.abs(delta)
    return np.where(a <= d, 0.5 * delta * delta, d * (a - 0.5 * d))


class SumTree:
    """Flat-array binary sum tree over ``capacity`` leaves."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.tree = np.zeros(2 * capacity - 1)

    def update(self, leaf: int, value: float) -> None:
        idx = leaf + self.capacity - 1
        change = value - self.tree[idx]
        self.tree[idx] = value
        while idx != 0:
            idx = (idx - 1) // 2
            self.tree[idx] += change

    def leaf_values(self) -> np.ndarray:
        return self.tree[self.capacity - 1 :]

    @property
    def total(self) -> float:
        return float(self.tree[0])

    def locate(self, mass: float) -> int:
        """Leaf index whose cumulative interval contains ``mass``."""
        idx = 0
        last = len(self.tree) - 1
        while True:
            left = 2 * idx + 1
            if left > last:
                return idx - (self.capacity - 1)
            if mass <= self.tree[left]:
                idx = left
            else:
                mass -= self.tree[left]
                idx = left + 1


class PrioritizedBuffer:
    """Ring buffer with proportional prioritized sampling.

    Raw priorities are |TD error| + epsilon; the tree stores their
    ``alpha`` power so that a tree descent samples P(i) = p_i^a / sum p^a.
    New transitions enter at the running maximum raw priority (1.0 while
    nothing larger has been seen).
    """

    def __init__(self, capacity: int, alpha: float, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.alpha = alpha
        self.rng = rng
        self.tree = SumTree(capacity)
        self.data: list[Transition] = []
        self.pos = 0
        self.max_priority = 1.0

    def __len__(self) -> int:
        return len(self.data)

    def store(self, transition: Transition) -> None:
        if len(self.data) < self.capacity:
            self.data.append(transition)
        else:
            self.data[self.pos] = transition
        self.tree.update(self.pos, self.max_priority**self.alpha)
        self.pos = (self.pos + 1) % self.capacity

    def update_priorities(self, indices, priorities) -> None:
        """Set raw priorities (> 0) for the given leaves."""
        for i, p in zip(indices, priorities):
            p = float(p)
            if p <= 0.0:
                raise ValueError(f"priority must be positive, got {p}")
            self.tree.update(int(i), p**self.alpha)
            if p > self.max_priority:
                self.max_priority = p

    def sample(self, batch: int, beta: float):
        """Stratified proportional sample -> (transitions, indices, weights)."""
        n = len(self.data)
        if n < batch:
            raise ValueError(f"buffer holds {n} transitions, need {batch}")
        total = self.tree.total
        seg = total / batch
        indices = np.empty(batch, dtype=np.int64)
        for k in range(batch):
            mass = (k + self.rng.random()) * seg
            leaf = self.tree.locate(min(mass, total * (1.0 - 1e-12)))
            indices[k] = min(leaf, n - 1)
        probs = self.tree.leaf_values()[indices] / total
        weights = (n * probs) ** (-beta)
        weights /= weights.max()
        return [self.data[i] for i in indices], indices, weights


def q_values(state: NetworkState, spec: NetworkSpec, images, scalars) -> np.ndarray:
    v, adv, _ = forward(state, spec, images, scalars)
    return dueling_aggregate(v, adv)


def act(
    state: NetworkState,
    spec: NetworkSpec,
    obs: Observation,
    eps: float,
    rng: np.random.Generator,
) -> int:
    """Epsilon-greedy over the dueling Q-values, ties to the lowest index."""
    if rng.random() < eps:
        return int(rng.integers(0, spec.n_actions))
    q = q_values(state, spec, obs.image[None], obs.scalars[None])[0]
    return int(np.argmax(q))


def td_targets(
    transitions: list[Transition],
    online: NetworkState,
    target: NetworkState,
    spec: NetworkSpec,
    gamma: float,
) -> np.ndarray:
    """Double-estimator bootstrap targets, y = r on terminal transitions."""
    images, scalars = batch_observations([t.next_obs for t in transitions])
    rewards = np.array([t.reward for t in transitions])
    live = np.array([0.0 if t.terminal else 1.0 for t in transitions])
    a_star = np.argmax(q_values(online, spec, images, scalars), axis=1)
    q_t = q_values(target, spec, images, scalars)
    return rewards + gamma * live * q_t[np.arange(len(transitions)), a_star]


class DqnLearner:
    """One independent learner: online/target nets, private buffer, counters.

    ``on_update(delta_norm, theta_norm)`` fires after every optimizer step
    so a caller can track convergence.
    """

    def __init__(
        self,
        cfg: DqnConfig,
        total_episodes: int,
        init_rng: np.random.Generator,
        action_rng: np.random.Generator,
        sampler_rng: np.random.Generator,
        spec: NetworkSpec | None = None,
        on_update=None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.total_episodes = total_episodes
        self.spec = spec if spec is not None else NetworkSpec(head="dueling")
        self.online = init_network(self.spec, init_rng)
        self.target = self.online.clone()
        self.buffer = PrioritizedBuffer(cfg.buffer_capacity, cfg.per_alpha, sampler_rng)
        self.action_rng = action_rng
        self.on_update = on_update
        self.learn_steps = 0
        self.eps = cfg.eps_start
        self.beta = cfg.per_beta_start
        self._losses: list[float] = []

    def begin_episode(self, episode: int) -> None:
        self.eps = epsilon_at(episode, self.total_episodes, self.cfg)
        self.beta = beta_at(episode, self.total_episodes, self.cfg)
        self._losses = []

    def act(self, obs: Observation) -> int:
        return act(self.online, self.spec, obs, self.eps, self.action_rng)

    def observe(self, obs, action, reward, next_obs, done) -> None:
        self.buffer.store(Transition(obs, action, float(reward), next_obs, done))
        if len(self.buffer) >= self.cfg.batch:
            self._losses.append(self.learn_step())

    def learn_step(self) -> float:
        """One prioritized batch update; returns the weighted Huber loss."""
        cfg = self.cfg
        transitions, indices, weights = self.buffer.sample(cfg.batch, self.beta)
        y = td_targets(transitions, self.online, self.target, self.spec, cfg.gamma)

        images, scalars = batch_observations([t.obs for t in transitions])
        actions = np.array([t.action for t in transitions])
        v, adv, cache = forward(self.online, self.spec, images, scalars)
        q = dueling_aggregate(v, adv)
        rows = np.arange(cfg.batch)
        delta = y - q[rows, actions]
        loss = float(np.mean(weights * huber(delta, cfg.huber_delta)))
        if not math.isfinite(loss):
            raise ValueError("non-finite DQN loss")

        # d loss / d Q[rows, actions]; Huber' = clip(delta, -d, d)
        dq = np.zeros_like(q)
        dq[rows, actions] = (
            -weights * np.clip(delta, -cfg.huber_delta, cfg.huber_delta) / cfg.batch
        )
        g_v = dq.sum(axis=1)
        g_adv = dq - dq.mean(axis=1, keepdims=True)
        grads = backward(self.online, self.spec, cache, g_v, g_adv)
        delta_norm = optimize_step(self.online, grads, cfg.lr)
        if self.on_update is not None:
            self.on_update(delta_norm, self.online.theta_norm())

        self.buffer.update_priorities(indices, np.abs(delta) + cfg.per_epsilon)
        self.learn_steps += 1
        if self.learn_steps % cfg.target_sync_period == 0:
            self.target.copy_params_from(self.online)
        return loss

    def end_episode(self) -> dict:
        mean_loss = float(np.mean(self._losses)) if self._losses else 0.0
        return {
            "exploration": self.eps,
            "mean_loss": mean_loss,
            "buffer_fill": len(self.buffer),
        }
