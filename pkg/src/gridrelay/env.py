"""Multitask grid-world engine with a two-stage resource relay.

The grid is a walled rectangle whose interior is split into three vertical
bands (area 1, area 2, area 3, left to right). Type-1 resources spawn in
area 1 and must be carried to area 2 (task 1); a successful drop there
turns the resource into a type-2 resource bound for area 3 (task 2), where
it is consumed. Task rewards decay linearly with the time elapsed since
the resource was (re)assigned. An optional bottleneck caps how many
resources may sit on the ground in area 2 at once, throttling task 1.

Agents see a 7x7 window of channel planes centered on their own cell plus
a small vector of self-features; they act with five discrete actions.
All randomness flows through one generator seeded at construction, so an
environment is a deterministic function of (config, seed, actions).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import IntEnum

import numpy as np

WALL, AREA1, AREA2, AREA3 = 0, 1, 2, 3

# channel-plane encoding of area identity; walls and out-of-bounds read 0
AREA_CODES = (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)

GROUND, CARRIED, CONSUMED = "ground", "carried", "consumed"

N_ACTIONS = 5
OBS_CHANNELS = 5
OBS_SCALARS = 8


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


class Action(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    MOVE_FORWARD = 2
    TAKE = 3
    DROP = 4


class Orientation(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


# (dx, dy) per orientation; y grows downward
DELTAS = ((0, -1), (1, 0), (0, 1), (-1, 0))
ORIENTATION_CHARS = "NESW"


@dataclass(frozen=True)
class EnvConfig:
    """World geometry, spawning, reward shaping and decay parameters.

    ``bottleneck`` is the maximum number of resources allowed on the
    ground in area 2 at once; ``None`` means unlimited.
    """

    n_agents: int
    width: int = 8
    height: int = 8
    n_resources: int = 4
    bottleneck: int | None = None
    max_steps: int = 500
    obs_radius: int = 3
    decay_v0: float = 1.0
    decay_rate: float = 0.001
    decay_min: float = 0.1
    r_step: float = -0.01
    r_useless: float = -0.05
    # pickup shaping must stay near the take/drop-cycling break-even
    # (-2*r_step): far above it, farming the pickup bonus beats doing
    # tasks; at zero, the useless-action penalty suppresses Take/Drop
    # before the sparse task rewards are ever found
    r_pickup: float = 0.025

    def validate(self) -> None:
        if self.width < 6:
            raise ConfigError(f"width must be >= 6, got {self.width}")
        if self.height < 3:
            raise ConfigError(f"height must be >= 3, got {self.height}")
        if self.n_agents < 1:
            raise ConfigError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.n_resources < 1:
            raise ConfigError(f"n_resources must be >= 1, got {self.n_resources}")
        if self.obs_radius != 3:
            raise ConfigError(f"obs_radius is fixed at 3 (7x7 window), got {self.obs_radius}")
        if self.bottleneck is not None and self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1 or unlimited, got {self.bottleneck}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.decay_min > self.decay_v0:
            raise ConfigError(
                f"decay_min must be <= decay_v0, got {self.decay_min} > {self.decay_v0}"
            )


@dataclass
class Agent:
    id: int
    x: int
    y: int
    orientation: int
    cargo: int | None = None


@dataclass
class Resource:
    """One resource and its task assignment.

    ``state`` is ``ground`` (at x, y), ``carried`` (by ``carrier``) or
    ``consumed`` (gone for good). ``value_initial``/``assign_step`` anchor
    the linear value decay; both reset when task 1 converts the resource.
    """

    id: int
    rtype: int
    state: str
    x: int | None
    y: int | None
    carrier: int | None
    value_initial: float
    assign_step: int
    target_area: int


@dataclass(frozen=True)
class Event:
    """Reward-bearing outcome of one agent's action within a step."""

    kind: str  # "task_completed" | "pickup" | "useless_action"
    agent: int
    reward: float
    task: int | None = None


@dataclass
class StepResult:
    rewards: list[float]
    events: list[Event]
    done: bool


@dataclass
class Observation:
    """7x7x5 channel window plus 8 self-features.

    Channels: wall (out-of-bounds included), area code, type-1 resource
    presence, type-2 resource presence, other-agent presence. Scalars:
    orientation one-hot (4), cargo one-hot none/type-1/type-2 (3),
    carried value normalized by the initial decay value (1).
    """

    image: np.ndarray
    scalars: np.ndarray


def build_area_map(width: int, height: int) -> np.ndarray:
    """Wall border around three vertical bands, leftover columns going left."""
    area = np.full((height, width), WALL, dtype=np.int8)
    inner_w = width - 2
    base, rem = divmod(inner_w, 3)
    widths = [base + (1 if i < rem else 0) for i in range(3)]
    x = 1
    for label, w in zip((AREA1, AREA2, AREA3), widths):
        area[1 : height - 1, x : x + w] = label
        x += w
    return area


def resource_value(resource: Resource, now: int, config: EnvConfig) -> float:
    """Linearly decayed reward value of a live resource at step ``now``."""
    if resource.state == CONSUMED:
        raise ValueError(f"resource {resource.id} is consumed and has no value")
    decayed = resource.value_initial - config.decay_rate * (now - resource.assign_step)
    return max(config.decay_min, decayed)


class GridEnv:
    """Deterministic multitask grid world driven by a single seeded RNG.

    Single-threaded: one handle must not be stepped concurrently, but
    independent handles are fully isolated.
    """

    def __init__(self, config: EnvConfig, seed: int):
        config.validate()
        self.config = config
        self.area = build_area_map(config.width, config.height)
        self.rng = np.random.default_rng(seed)

        ys, xs = np.nonzero(self.area != WALL)
        self._free_cells = np.stack([xs, ys], axis=1)
        a1_ys, a1_xs = np.nonzero(self.area == AREA1)
        self._area1_cells = np.stack([a1_xs, a1_ys], axis=1)

        r = config.obs_radius
        ph, pw = config.height + 2 * r, config.width + 2 * r
        self._wall_pad = np.ones((ph, pw))
        self._wall_pad[r:-r, r:-r] = (self.area == WALL).astype(float)
        self._area_pad = np.zeros((ph, pw))
        self._area_pad[r:-r, r:-r] = np.asarray(AREA_CODES)[self.area]
        self._r1_pad = np.zeros((ph, pw))
        self._r2_pad = np.zeros((ph, pw))
        self._agents_pad = np.zeros((ph, pw))

        self.agents: list[Agent] = []
        self.resources: list[Resource] = []
        self.step_count = 0
        self._consumed = 0
        self._area2_ground = 0
        # agent id / resource id per cell, -1 when empty
        self._agent_grid = np.full((config.height, config.width), -1, dtype=np.int32)
        self._ground_grid = np.full((config.height, config.width), -1, dtype=np.int32)
        self._done = True
        self._started = False
        self._dynamic_stale = True

    # ------------------------------------------------------------------
    # episode control
    # ------------------------------------------------------------------

    def reset(self) -> list[Observation]:
        """Spawn agents on distinct free cells and type-1 resources in area 1."""
        cfg = self.config
        if cfg.n_resources > len(self._area1_cells):
            raise ValueError(
                f"n_resources={cfg.n_resources} exceeds the {len(self._area1_cells)} "
                "free cells of area 1"
            )
        if cfg.n_agents > len(self._free_cells):
            raise ValueError(
                f"n_agents={cfg.n_agents} exceeds the {len(self._free_cells)} non-wall cells"
            )

        self._agent_grid.fill(-1)
        self._ground_grid.fill(-1)

        picks = self.rng.choice(len(self._free_cells), size=cfg.n_agents, replace=False)
        orients = self.rng.integers(0, 4, size=cfg.n_agents)
        self.agents = []
        for i, (k, o) in enumerate(zip(picks, orients)):
            x, y = (int(v) for v in self._free_cells[k])
            self.agents.append(Agent(id=i, x=x, y=y, orientation=int(o)))
            self._agent_grid[y, x] = i

        picks = self.rng.choice(len(self._area1_cells), size=cfg.n_resources, replace=False)
        self.resources = []
        for i, k in enumerate(picks):
            x, y = (int(v) for v in self._area1_cells[k])
            self.resources.append(
                Resource(
                    id=i,
                    rtype=1,
                    state=GROUND,
                    x=x,
                    y=y,
                    carrier=None,
                    value_initial=cfg.decay_v0,
                    assign_step=0,
                    target_area=AREA2,
                )
            )
            self._ground_grid[y, x] = i

        self.step_count = 0
        self._consumed = 0
        self._area2_ground = 0
        self._done = False
        self._started = True
        self._dynamic_stale = True
        return [self.observe(i) for i in range(cfg.n_agents)]

    @property
    def done(self) -> bool:
        return self._done

    def step(self, actions: list[int]) -> tuple[list[Observation], StepResult]:
        """Resolve one joint action in a freshly shuffled agent order."""
        cfg = self.config
        if not self._started or self._done:
            raise RuntimeError("episode is done (or not started); call reset() first")
        if len(actions) != cfg.n_agents:
            raise ValueError(f"expected {cfg.n_agents} actions, got {len(actions)}")

        rewards = [cfg.r_step] * cfg.n_agents
        events: list[Event] = []
        order = self.rng.permutation(cfg.n_agents)
        for i in order:
            i = int(i)
            ev = self._apply(i, int(actions[i]))
            if ev is not None:
                rewards[i] += ev.reward
                events.append(ev)

        self.step_count += 1
        self._done = (
            self.step_count >= cfg.max_steps or self._consumed == cfg.n_resources
        )
        self._dynamic_stale = True
        obs = [self.observe(i) for i in range(cfg.n_agents)]
        return obs, StepResult(rewards=rewards, events=events, done=self._done)

    # ------------------------------------------------------------------
    # action semantics
    # ------------------------------------------------------------------

    def _apply(self, i: int, action: int) -> Event | None:
        cfg = self.config
        agent = self.agents[i]
        if action == Action.TURN_LEFT:
            agent.orientation = (agent.orientation - 1) % 4
            return None
        if action == Action.TURN_RIGHT:
            agent.orientation = (agent.orientation + 1) % 4
            return None
        if action == Action.MOVE_FORWARD:
            dx, dy = DELTAS[agent.orientation]
            nx, ny = agent.x + dx, agent.y + dy
            if self.area[ny, nx] == WALL or self._agent_grid[ny, nx] != -1:
                return Event("useless_action", i, cfg.r_useless)
            self._agent_grid[agent.y, agent.x] = -1
            self._agent_grid[ny, nx] = i
            agent.x, agent.y = nx, ny
            return None
        if action == Action.TAKE:
            rid = int(self._ground_grid[agent.y, agent.x])
            if agent.cargo is not None or rid == -1:
                return Event("useless_action", i, cfg.r_useless)
            res = self.resources[rid]
            self._ground_grid[agent.y, agent.x] = -1
            if self.area[agent.y, agent.x] == AREA2:
                self._area2_ground -= 1
            res.state = CARRIED
            res.carrier = i
            res.x = res.y = None
            agent.cargo = rid
            return Event("pickup", i, cfg.r_pickup)
        if action == Action.DROP:
            if agent.cargo is None:
                return Event("useless_action", i, cfg.r_useless)
            cell_area = int(self.area[agent.y, agent.x])
            if self._ground_grid[agent.y, agent.x] != -1:
                return Event("useless_action", i, cfg.r_useless)
            if (
                cell_area == AREA2
                and cfg.bottleneck is not None
                and self._area2_ground >= cfg.bottleneck
            ):
                return Event("useless_action", i, cfg.r_useless)
            res = self.resources[agent.cargo]
            agent.cargo = None
            res.carrier = None
            if cell_area == res.target_area:
                value = resource_value(res, self.step_count, cfg)
                task = 1 if res.rtype == 1 else 2
                if res.rtype == 1:
                    # task 1: resource re-enters play as the next task's input
                    res.rtype = 2
                    res.target_area = AREA3
                    res.value_initial = cfg.decay_v0
                    res.assign_step = self.step_count
                    self._place(res, agent.x, agent.y)
                else:
                    res.state = CONSUMED
                    res.x = res.y = None
                    self._consumed += 1
                return Event("task_completed", i, value, task=task)
            self._place(res, agent.x, agent.y)
            return None
        raise ValueError(f"unknown action {action}")

    def _place(self, res: Resource, x: int, y: int) -> None:
        res.state = GROUND
        res.x, res.y = x, y
        self._ground_grid[y, x] = res.id
        if self.area[y, x] == AREA2:
            self._area2_ground += 1

    # ------------------------------------------------------------------
    # observation
    # ------------------------------------------------------------------

    def _refresh_dynamic(self) -> None:
        r = self.config.obs_radius
        core = slice(r, -r)
        self._r1_pad[core, core] = 0.0
        self._r2_pad[core, core] = 0.0
        self._agents_pad[core, core] = 0.0
        for res in self.resources:
            if res.state == GROUND:
                pad = self._r1_pad if res.rtype == 1 else self._r2_pad
                pad[res.y + r, res.x + r] = 1.0
        for ag in self.agents:
            self._agents_pad[ag.y + r, ag.x + r] = 1.0
        self._dynamic_stale = False

    def observe(self, agent_id: int) -> Observation:
        """Axis-aligned 7x7 window centered on the agent plus self-features."""
        cfg = self.config
        if not 0 <= agent_id < cfg.n_agents:
            raise ValueError(f"agent id {agent_id} out of range")
        if self._dynamic_stale:
            self._refresh_dynamic()
        agent = self.agents[agent_id]
        r = cfg.obs_radius
        w = 2 * r + 1
        ys, xs = slice(agent.y, agent.y + w), slice(agent.x, agent.x + w)
        image = np.empty((w, w, OBS_CHANNELS))
        image[:, :, 0] = self._wall_pad[ys, xs]
        image[:, :, 1] = self._area_pad[ys, xs]
        image[:, :, 2] = self._r1_pad[ys, xs]
        image[:, :, 3] = self._r2_pad[ys, xs]
        image[:, :, 4] = self._agents_pad[ys, xs]
        image[r, r, 4] = 0.0  # the observer is not "another agent"

        scalars = np.zeros(OBS_SCALARS)
        scalars[agent.orientation] = 1.0
        if agent.cargo is None:
            scalars[4] = 1.0
        else:
            res = self.resources[agent.cargo]
            scalars[4 + res.rtype] = 1.0
            scalars[7] = resource_value(res, self.step_count, cfg) / cfg.decay_v0
        return Observation(image=image, scalars=scalars)

    # ------------------------------------------------------------------
    # frames
    # ------------------------------------------------------------------

    def render_frame(self) -> dict:
        """Full world state as a JSON-ready record (one frame of a replay)."""
        agents = [
            {
                "id": a.id,
                "x": a.x,
                "y": a.y,
                "dir": ORIENTATION_CHARS[a.orientation],
                "cargo": a.cargo,
            }
            for a in self.agents
        ]
        resources = []
        for res in self.resources:
            if res.state == CONSUMED:
                entry = {
                    "id": res.id,
                    "type": res.rtype,
                    "state": CONSUMED,
                    "x": None,
                    "y": None,
                    "value": None,
                }
            else:
                x, y = res.x, res.y
                if res.state == CARRIED:
                    holder = self.agents[res.carrier]
                    x, y = holder.x, holder.y
                entry = {
                    "id": res.id,
                    "type": res.rtype,
                    "state": res.state,
                    "x": x,
                    "y": y,
                    "value": resource_value(res, self.step_count, self.config),
                }
            resources.append(entry)
        return {
            "step": self.step_count,
            "agents": agents,
            "resources": resources,
            "area2_count": self._area2_ground,
        }
