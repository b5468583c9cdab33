"""Seeded training orchestration: episode loop, sweeps, logs, convergence.

One run = (environment config, algorithm, master seed). All randomness is
derived from the master seed by hashing stable labels, so every output
file is a pure function of the config. Sweep points are fully isolated
and may execute in parallel processes; each writes its own directory.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .a2c import A2cConfig, A2cLearner
from .dqn import DqnConfig, DqnLearner
from .env import ConfigError, EnvConfig, GridEnv

ALGOS = ("dddqn", "a2c")

EPISODES_CSV_HEADER = ["episode", "agent_id", "reward", "task1", "task2", "exploration", "steps"]

INCOMPLETE_MARKER = "INCOMPLETE"
FAILED_MARKER = "FAILED.txt"


class NonFiniteLossError(RuntimeError):
    """A learner produced a non-finite loss; the run is unusable."""


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig
    algo: str = "a2c"
    dqn: DqnConfig = field(default_factory=DqnConfig)
    a2c: A2cConfig = field(default_factory=A2cConfig)
    train_episodes: int = 1000
    master_seed: int = 0
    out_dir: Path = Path("runs")
    sweep_agents: tuple[int, ...] = ()
    sweep_bottlenecks: tuple[int | None, ...] = ()
    sweep_seeds: tuple[int, ...] = ()
    record_frames_episodes: tuple[int, ...] = ()

    def validate(self) -> None:
        self.env.validate()
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        if self.train_episodes < 1:
            raise ConfigError(f"train_episodes must be >= 1, got {self.train_episodes}")
        if len(set(self.sweep_seeds)) != len(self.sweep_seeds):
            raise ConfigError("sweep seeds must be distinct")

    def sweep_axes(self) -> tuple[tuple[int, ...], tuple[int | None, ...], tuple[int, ...]]:
        """Sweep axes, falling back to the base config where unset."""
        agents = self.sweep_agents or (self.env.n_agents,)
        bnecks = self.sweep_bottlenecks if self.sweep_bottlenecks != () else (self.env.bottleneck,)
        seeds = self.sweep_seeds or (self.master_seed,)
        return agents, bnecks, seeds


# ----------------------------------------------------------------------
# deterministic stream derivation
# ----------------------------------------------------------------------

def derive_rng(master_seed: int, label: str, index: int | None = None) -> np.random.Generator:
    """Independent generator for (master_seed, label, index).

    SHA-256 of the canonical tuple string keeps streams stable across
    platforms and process boundaries (unlike the builtin hash).
    """
    tag = f"{master_seed}:{label}:{'' if index is None else index}"
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


@dataclass
class RunRngs:
    env: np.random.Generator
    init: list[np.random.Generator]
    action: list[np.random.Generator]
    sampler: list[np.random.Generator]


def derive_run_rngs(master_seed: int, n_agents: int) -> RunRngs:
    return RunRngs(
        env=derive_rng(master_seed, "env"),
        init=[derive_rng(master_seed, "init", i) for i in range(n_agents)],
        action=[derive_rng(master_seed, "action", i) for i in range(n_agents)],
        sampler=[derive_rng(master_seed, "sampler", i) for i in range(n_agents)],
    )


def env_seed(master_seed: int) -> int:
    digest = hashlib.sha256(f"{master_seed}:env-seed:".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


# ----------------------------------------------------------------------
# convergence tracking
# ----------------------------------------------------------------------

@dataclass
class ConvergenceTracker:
    """Moving average of relative update norms |dtheta| / |theta|.

    Converged once the mean over the last ``window`` updates first drops
    below ``threshold``; the episode passed in at that update is kept.
    """

    window: int = 200
    threshold: float = 1e-4
    ratios: deque = field(default_factory=lambda: deque())
    ratio_sum: float = 0.0
    converged_at: int | None = None

    def __post_init__(self):
        self.ratios = deque(maxlen=self.window)


def track_convergence(
    tracker: ConvergenceTracker, delta_norm: float, theta_norm: float, episode: int
) -> ConvergenceTracker:
    if theta_norm <= 0.0:
        raise ValueError("theta_norm must be positive")
    ratio = delta_norm / theta_norm
    if len(tracker.ratios) == tracker.window:
        tracker.ratio_sum -= tracker.ratios[0]
    tracker.ratios.append(ratio)
    tracker.ratio_sum += ratio
    if (
        tracker.converged_at is None
        and len(tracker.ratios) == tracker.window
        and tracker.ratio_sum / tracker.window < tracker.threshold
    ):
        tracker.converged_at = episode
    return tracker


# ----------------------------------------------------------------------
# episode loop
# ----------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    rewards: list[float]
    task1: list[int]
    task2: list[int]
    exploration: list[float]
    steps: int

    @property
    def population_reward(self) -> float:
        return float(sum(self.rewards))


def run_episode(
    env: GridEnv,
    learners: list,
    episode: int,
    frame_sink: list | None = None,
) -> EpisodeRecord:
    """One joint episode; every learner sees only its own transitions."""
    n = env.config.n_agents
    if len(learners) != n:
        raise ValueError(f"need {n} learners, got {len(learners)}")
    obs = env.reset()
    for learner in learners:
        learner.begin_episode(episode)
    if frame_sink is not None:
        frame_sink.append(env.render_frame())

    rewards = [0.0] * n
    task1 = [0] * n
    task2 = [0] * n
    steps = 0
    while True:
        actions = [learners[i].act(obs[i]) for i in range(n)]
        next_obs, result = env.step(actions)
        steps += 1
        for ev in result.events:
            if ev.kind == "task_completed":
                if ev.task == 1:
                    task1[ev.agent] += 1
                else:
                    task2[ev.agent] += 1
        for i in range(n):
            rewards[i] += result.rewards[i]
            learners[i].observe(obs[i], actions[i], result.rewards[i], next_obs[i], result.done)
        if frame_sink is not None:
            frame_sink.append(env.render_frame())
        obs = next_obs
        if result.done:
            break

    exploration = [learner.end_episode()["exploration"] for learner in learners]
    return EpisodeRecord(
        episode=episode,
        rewards=rewards,
        task1=task1,
        task2=task2,
        exploration=exploration,
        steps=steps,
    )


def make_learners(
    algo: str,
    n_agents: int,
    dqn_cfg: DqnConfig,
    a2c_cfg: A2cConfig,
    train_episodes: int,
    rngs: RunRngs,
    on_update=None,
) -> list:
    """Independent learners, one per agent, wired to their own streams."""
    learners = []
    for i in range(n_agents):
        hook = (lambda d, t, i=i: on_update(i, d, t)) if on_update is not None else None
        if algo == "dddqn":
            learners.append(
                DqnLearner(
                    dqn_cfg,
                    total_episodes=train_episodes,
                    init_rng=rngs.init[i],
                    action_rng=rngs.action[i],
                    sampler_rng=rngs.sampler[i],
                    on_update=hook,
                )
            )
        elif algo == "a2c":
            learners.append(
                A2cLearner(
                    a2c_cfg,
                    init_rng=rngs.init[i],
                    action_rng=rngs.action[i],
                    on_update=hook,
                )
            )
        else:
            raise ConfigError(f"unknown algo {algo!r}")
    return learners


# ----------------------------------------------------------------------
# single run
# ----------------------------------------------------------------------

def _atomic_write(path: Path, data: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(data, encoding="utf-8", newline="")
    os.replace(tmp, path)


def _config_echo(env_cfg: EnvConfig, algo: str, algo_cfg, train_episodes, master_seed) -> dict:
    env_d = dataclasses.asdict(env_cfg)
    env_d["bottleneck"] = "unlimited" if env_cfg.bottleneck is None else env_cfg.bottleneck
    return {
        "env": env_d,
        "algo": algo,
        "algo_config": dataclasses.asdict(algo_cfg),
        "train_episodes": train_episodes,
        "master_seed": master_seed,
    }


def run_single(
    env_cfg: EnvConfig,
    algo: str,
    dqn_cfg: DqnConfig,
    a2c_cfg: A2cConfig,
    train_episodes: int,
    master_seed: int,
    run_dir: Path,
    record_frames_episodes: tuple[int, ...] = (),
    progress=None,
) -> dict:
    """Train one population and write episodes.csv / summary.json / frames.

    The run directory holds an INCOMPLETE marker while training; outputs
    are written atomically at the end, then the marker is removed.
    """
    from .metrics import jain_fairness, specialization  # cycle-free late import

    env_cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    marker = run_dir / INCOMPLETE_MARKER
    marker.write_text("run in progress\n", encoding="utf-8")

    rngs = derive_run_rngs(master_seed, env_cfg.n_agents)
    env = GridEnv(env_cfg, seed=env_seed(master_seed))
    trackers = [ConvergenceTracker() for _ in range(env_cfg.n_agents)]
    episode_box = {"episode": 0}

    def on_update(agent_id: int, delta_norm: float, theta_norm: float) -> None:
        track_convergence(trackers[agent_id], delta_norm, theta_norm, episode_box["episode"])

    learners = make_learners(
        algo, env_cfg.n_agents, dqn_cfg, a2c_cfg, train_episodes, rngs, on_update
    )

    records: list[EpisodeRecord] = []
    frames: list[dict] = []
    record_set = set(record_frames_episodes)
    try:
        for episode in range(train_episodes):
            episode_box["episode"] = episode
            sink = frames if episode in record_set else None
            records.append(run_episode(env, learners, episode, frame_sink=sink))
            if progress is not None:
                progress(episode, records[-1])
    except ValueError as exc:
        if "non-finite" in str(exc):
            (run_dir / FAILED_MARKER).write_text(
                f"aborted at episode {episode_box['episode']}: {exc}\n", encoding="utf-8"
            )
            raise NonFiniteLossError(str(exc)) from exc
        raise

    # episodes.csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EPISODES_CSV_HEADER)
    for rec in records:
        for i in range(env_cfg.n_agents):
            writer.writerow(
                [
                    rec.episode,
                    i,
                    repr(rec.rewards[i]),
                    rec.task1[i],
                    rec.task2[i],
                    repr(rec.exploration[i]),
                    rec.steps,
                ]
            )
    _atomic_write(run_dir / "episodes.csv", buf.getvalue())

    if frames:
        lines = [
            json.dumps(
                {
                    "meta": {
                        "width": env_cfg.width,
                        "height": env_cfg.height,
                        "bottleneck": "unlimited"
                        if env_cfg.bottleneck is None
                        else env_cfg.bottleneck,
                    }
                }
            )
        ]
        lines += [json.dumps(f) for f in frames]
        _atomic_write(run_dir / "frames.jsonl", "\n".join(lines) + "\n")

    # summary.json
    agents_summary = []
    totals = []
    for i in range(env_cfg.n_agents):
        t1 = sum(r.task1[i] for r in records)
        t2 = sum(r.task2[i] for r in records)
        reward = sum(r.rewards[i] for r in records)
        totals.append(reward)
        agents_summary.append(
            {
                "agent_id": i,
                "task1": t1,
                "task2": t2,
                "reward": reward,
                "specialization": specialization(t1, t2),
                "converged_at": trackers[i].converged_at,
            }
        )
    mean_spec = float(np.mean([a["specialization"] for a in agents_summary]))
    clamped = [max(0.0, x) for x in totals]
    fairness = jain_fairness(clamped) if any(x > 0 for x in clamped) else None
    algo_cfg = dqn_cfg if algo == "dddqn" else a2c_cfg
    summary = {
        "config": _config_echo(env_cfg, algo, algo_cfg, train_episodes, master_seed),
        "exploration_metric": "epsilon" if algo == "dddqn" else "policy_entropy",
        "specialization_zero_rule": "agents with no completed tasks score 0",
        "agents": agents_summary,
        "population": {
            "total_reward": float(sum(totals)),
            "mean_specialization": mean_spec,
            "fairness": fairness,
        },
    }
    _atomic_write(run_dir / "summary.json", json.dumps(summary, indent=2) + "\n")
    marker.unlink()
    return summary


# ----------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------

def _run_name(n_agents: int, bottleneck: int | None, seed: int) -> str:
    b = "unlimited" if bottleneck is None else bottleneck
    return f"agents{n_agents}_bneck{b}_seed{seed}"


def _sweep_points(cfg: ExperimentConfig):
    agents_axis, bneck_axis, seed_axis = cfg.sweep_axes()
    for n_agents in agents_axis:
        for bneck in bneck_axis:
            for seed in seed_axis:
                yield n_agents, bneck, seed


def _run_sweep_point(args) -> tuple[str, str | None]:
    cfg, n_agents, bneck, seed = args
    env_cfg = replace(cfg.env, n_agents=n_agents, bottleneck=bneck)
    run_dir = Path(cfg.out_dir) / _run_name(n_agents, bneck, seed)
    try:
        run_single(
            env_cfg,
            cfg.algo,
            cfg.dqn,
            cfg.a2c,
            cfg.train_episodes,
            master_seed=seed,
            run_dir=run_dir,
            record_frames_episodes=cfg.record_frames_episodes,
        )
    except NonFiniteLossError as exc:
        return str(run_dir), str(exc)
    return str(run_dir), None


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> list[tuple[str, str | None]]:
    """Run the full sweep; returns (run_dir, error-or-None) per point.

    A non-finite loss kills only its own run (the directory keeps a
    FAILED marker); other sweep points continue.
    """
    cfg.validate()
    jobs = [(cfg, n, b, s) for n, b, s in _sweep_points(cfg)]
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp

        with mp.get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            return pool.map(_run_sweep_point, jobs)
    return [_run_sweep_point(job) for job in jobs]


# ----------------------------------------------------------------------
# config files: dotted key = value lines
# ----------------------------------------------------------------------

_TOP_KEYS = {"algo", "train_episodes", "master_seed", "out_dir", "record_frames_episodes"}
_SWEEP_KEYS = {"sweep.agents", "sweep.bottlenecks", "sweep.seeds"}


def _parse_scalar(text: str):
    text = text.strip()
    if text == "unlimited":
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        text = text[1:-1]
        if not text.strip():
            return []
        return [_parse_scalar(part) for part in text.split(",")]
    if "," in text:
        return [_parse_scalar(part) for part in text.split(",")]
    return _parse_scalar(text)


def _coerce_field(section: str, cls, key: str, value, line_no: int):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"line {line_no}: unknown key {section}.{key}")
    if isinstance(value, list):
        raise ConfigError(f"line {line_no}: {section}.{key} does not take a list")
    ftype = fields[key].type
    if "bool" in ftype:
        if not isinstance(value, bool):
            raise ConfigError(f"line {line_no}: {section}.{key} expects true/false")
        return value
    if "float" in ftype and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if "int" in ftype:
        if value is None and "None" in ftype:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"line {line_no}: {section}.{key} expects an integer")
        return value
    return value


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a ``section.key = value`` config file; unknown keys error."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    env_kw: dict = {}
    dqn_kw: dict = {}
    a2c_kw: dict = {}
    top: dict = {}
    sweep: dict = {}
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value_text = line.partition("=")
        key = key.strip()
        value = _parse_value(value_text)
        if key.startswith("env."):
            env_kw[key[4:]] = _coerce_field("env", EnvConfig, key[4:], value, line_no)
        elif key.startswith("dqn."):
            dqn_kw[key[4:]] = _coerce_field("dqn", DqnConfig, key[4:], value, line_no)
        elif key.startswith("a2c."):
            a2c_kw[key[4:]] = _coerce_field("a2c", A2cConfig, key[4:], value, line_no)
        elif key in _SWEEP_KEYS:
            items = value if isinstance(value, list) else [value]
            sweep[key] = tuple(items)
        elif key in _TOP_KEYS:
            if key == "record_frames_episodes":
                items = value if isinstance(value, list) else [value]
                top[key] = tuple(int(v) for v in items)
            elif key == "out_dir":
                top[key] = Path(str(value))
            else:
                top[key] = value
        else:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")

    if "n_agents" not in env_kw:
        raise ConfigError("missing required key env.n_agents")
    try:
        env_cfg = EnvConfig(**env_kw)
        cfg = ExperimentConfig(
            env=env_cfg,
            dqn=DqnConfig(**dqn_kw),
            a2c=A2cConfig(**a2c_kw),
            sweep_agents=tuple(sweep.get("sweep.agents", ())),
            sweep_bottlenecks=tuple(sweep.get("sweep.bottlenecks", ())),
            sweep_seeds=tuple(sweep.get("sweep.seeds", ())),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.validate()
    cfg.dqn.validate()
    cfg.a2c.validate()
    return cfg
