"""Independent advantage actor-critic learner with entropy-driven exploration.

The actor and critic share the convolutional trunk (one network, two
heads). Rollouts of up to ``n_step`` transitions are flushed on terminal
or when full; returns bootstrap from the critic's value of the state
after the rollout. Exploration comes entirely from the stochastic
policy: there is no external exploration rate in this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

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
class A2cConfig:
    gamma: float = 0.99
    n_step: int = 5
    lr: float = 7e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    clip_norm: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.n_step < 1:
            raise ValueError(f"n_step must be >= 1, got {self.n_step}")
        if self.entropy_coef < 0.0:
            raise ValueError(f"entropy_coef must be >= 0, got {self.entropy_coef}")
        if self.value_coef <= 0.0:
            raise ValueError(f"value_coef must be > 0, got {self.value_coef}")


class RolloutBuffer:
    """At most ``n_step`` transitions awaiting one actor-critic update."""

    def __init__(self, n_step: int):
        self.n_step = n_step
        self.obs: list[Observation] = []
        self.actions: list[int] = []
        self.rewards: list[float] = []
        self.terminals: list[bool] = []

    def __len__(self) -> int:
        return len(self.obs)

    @property
    def full(self) -> bool:
        return len(self.obs) >= self.n_step

    def append(self, obs, action, reward, terminal) -> None:
        if self.full:
            raise RuntimeError("rollout already full; flush before appending")
        self.obs.append(obs)
        self.actions.append(int(action))
        self.rewards.append(float(reward))
        self.terminals.append(bool(terminal))

    def clear(self) -> None:
        self.obs.clear()
        self.actions.clear()
        self.rewards.clear()
        self.terminals.clear()


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs: np.ndarray) -> np.ndarray | float:
    """Natural-log entropy; zero-probability terms contribute nothing."""
    p = np.asarray(probs, dtype=float)
    # p * log(p + 1e-300) is exactly p*log(p) for representable p > 0
    # and exactly 0 at p == 0
    h = -(p * np.log(p + 1e-300)).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def policy(state: NetworkState, spec: NetworkSpec, obs: Observation):
    """Action distribution and value for one observation."""
    logits, value, _ = forward(state, spec, obs.image[None], obs.scalars[None])
    return softmax(logits[0]), float(value[0])


def sample_action(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF sample using a single uniform draw."""
    u = rng.random()
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, u, side="right"), len(probs) - 1))


def act(
    state: NetworkState,
    spec: NetworkSpec,
    obs: Observation,
    rng: np.random.Generator,
) -> tuple[int, float, float]:
    """Sample from the policy -> (action, log-probability, value)."""
    probs, value = policy(state, spec, obs)
    action = sample_action(probs, rng)
    return action, float(np.log(probs[action])), value


def n_step_returns(
    rewards: list[float],
    terminals: list[bool],
    bootstrap_value: float,
    gamma: float,
) -> np.ndarray:
    """Discounted returns bootstrapped past the rollout, cut at terminals."""
    if not rewards:
        raise ValueError("empty rollout")
    returns = np.empty(len(rewards))
    acc = 0.0 if terminals[-1] else float(bootstrap_value)
    for k in range(len(rewards) - 1, -1, -1):
        if terminals[k]:
            acc = 0.0
        acc = rewards[k] + gamma * acc
        returns[k] = acc
    return returns


def _output_grads(probs, actions, advantages, returns, values, cfg: A2cConfig):
    """Loss gradients w.r.t. (logits, value); advantages enter as constants."""
    t = probs.shape[0]
    rows = np.arange(t)
    d_logits = probs * advantages[:, None]
    d_logits[rows, actions] -= advantages
    d_logits /= t
    if cfg.entropy_coef > 0.0:
        logp = np.log(np.where(probs > 0.0, probs, 1.0))
        h = entropy(probs)
        d_logits += (cfg.entropy_coef / t) * probs * (logp + h[:, None])
    d_value = -2.0 * cfg.value_coef * (returns - values) / t
    return d_logits, d_value


def learn_step(
    state: NetworkState,
    spec: NetworkSpec,
    rollout: RolloutBuffer,
    bootstrap_obs: Observation,
    cfg: A2cConfig,
) -> tuple[float, float, float, float]:
    """One actor-critic update.

    Returns (actor loss, critic loss, mean entropy, update-step norm).
    """
    if len(rollout) == 0:
        raise ValueError("empty rollout")
    images, scalars = batch_observations(rollout.obs)
    logits, values, cache = forward(state, spec, images, scalars)

    bootstrap_value = 0.0
    if not rollout.terminals[-1]:
        _, bv, _ = forward(
            state, spec, bootstrap_obs.image[None], bootstrap_obs.scalars[None]
        )
        bootstrap_value = float(bv[0])
    returns = n_step_returns(rollout.rewards, rollout.terminals, bootstrap_value, cfg.gamma)

    probs = softmax(logits)
    actions = np.asarray(rollout.actions)
    advantages = returns - values
    rows = np.arange(len(rollout))
    actor_loss = float(np.mean(-np.log(probs[rows, actions]) * advantages))
    critic_loss = float(np.mean((returns - values) ** 2))
    mean_entropy = float(np.mean(entropy(probs)))
    total = actor_loss + cfg.value_coef * critic_loss - cfg.entropy_coef * mean_entropy
    if not math.isfinite(total):
        raise ValueError("non-finite A2C loss")

    d_logits, d_value = _output_grads(probs, actions, advantages, returns, values, cfg)
    grads = backward(state, spec, cache, d_logits, d_value)
    delta_norm = optimize_step(state, grads, cfg.lr, cfg.clip_norm)
    return actor_loss, critic_loss, mean_entropy, delta_norm


class A2cLearner:
    """One independent actor-critic agent driving its own rollout buffer."""

    def __init__(
        self,
        cfg: A2cConfig,
        init_rng: np.random.Generator,
        action_rng: np.random.Generator,
        spec: NetworkSpec | None = None,
        on_update=None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.spec = spec if spec is not None else NetworkSpec(head="actor_critic")
        self.state = init_network(self.spec, init_rng)
        self.action_rng = action_rng
        self.rollout = RolloutBuffer(cfg.n_step)
        self.on_update = on_update
        self._entropies: list[float] = []
        self._actor_losses: list[float] = []
        self._critic_losses: list[float] = []

    def begin_episode(self, episode: int) -> None:
        self.rollout.clear()
        self._entropies = []
        self._actor_losses = []
        self._critic_losses = []

    def act(self, obs: Observation) -> int:
        probs, _ = policy(self.state, self.spec, obs)
        self._entropies.append(entropy(probs))
        return sample_action(probs, self.action_rng)

    def observe(self, obs, action, reward, next_obs, done) -> None:
        self.rollout.append(obs, action, reward, done)
        if done or self.rollout.full:
            self._flush(next_obs)

    def _flush(self, bootstrap_obs: Observation) -> None:
        actor, critic, _, delta_norm = learn_step(
            self.state, self.spec, self.rollout, bootstrap_obs, self.cfg
        )
        if self.on_update is not None:
            self.on_update(delta_norm, self.state.theta_norm())
        self._actor_losses.append(actor)
        self._critic_losses.append(critic)
        self.rollout.clear()

    def end_episode(self) -> dict:
        return {
            "exploration": float(np.mean(self._entropies)) if self._entropies else 0.0,
            "mean_actor_loss": float(np.mean(self._actor_losses)) if self._actor_losses else 0.0,
            "mean_critic_loss": float(np.mean(self._critic_losses)) if self._critic_losses else 0.0,
        }
