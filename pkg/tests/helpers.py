"""Shared test utilities: scripted policies and invariant checkers."""

from __future__ import annotations

from collections import deque

import numpy as np

from gridrelay.env import (
    AREA2,
    AREA3,
    CARRIED,
    CONSUMED,
    GROUND,
    WALL,
    Action,
    DELTAS,
    GridEnv,
)


class ScriptedLearner:
    """Replays a fixed per-episode action sequence; learns nothing."""

    def __init__(self, actions_by_episode):
        self.actions_by_episode = actions_by_episode
        self._queue: deque = deque()

    def begin_episode(self, episode: int) -> None:
        self._queue = deque(self.actions_by_episode[episode])

    def act(self, obs) -> int:
        return self._queue.popleft()

    def observe(self, obs, action, reward, next_obs, done) -> None:
        pass

    def end_episode(self) -> dict:
        return {"exploration": 0.0}


class ConstantLearner(ScriptedLearner):
    """Always emits the same action."""

    def __init__(self, action: int):
        self.action = int(action)

    def begin_episode(self, episode: int) -> None:
        pass

    def act(self, obs) -> int:
        return self.action


class GreedyHauler:
    """Cheating controller with full state access.

    Plans with BFS on the walkable grid: walk to the nearest ground
    resource, take it, walk into its target area, drop. Useful as an
    independent check that the task chain is completable under the
    engine's own movement rules.
    """

    def __init__(self, env: GridEnv, agent_id: int = 0):
        self.env = env
        self.agent_id = agent_id

    def begin_episode(self, episode: int) -> None:
        pass

    def observe(self, obs, action, reward, next_obs, done) -> None:
        pass

    def end_episode(self) -> dict:
        return {"exploration": 0.0}

    def act(self, obs) -> int:
        env = self.env
        me = env.agents[self.agent_id]
        if me.cargo is None:
            targets = {
                (r.x, r.y) for r in env.resources if r.state == GROUND
            }
            if not targets:
                return int(Action.TURN_LEFT)
            if (me.x, me.y) in targets:
                return int(Action.TAKE)
            return self._step_toward(me, targets)
        res = env.resources[me.cargo]
        cell_area = int(env.area[me.y, me.x])
        if cell_area == res.target_area and env._ground_grid[me.y, me.x] == -1:
            return int(Action.DROP)
        targets = {
            (x, y)
            for y in range(env.config.height)
            for x in range(env.config.width)
            if env.area[y, x] == res.target_area and env._ground_grid[y, x] == -1
        }
        return self._step_toward(me, targets)

    def _step_toward(self, me, targets) -> int:
        first = self._bfs_first_step(me, targets)
        if first is None:
            return int(Action.TURN_LEFT)
        want = DELTAS.index(first)
        if want == me.orientation:
            return int(Action.MOVE_FORWARD)
        if (me.orientation - 1) % 4 == want:
            return int(Action.TURN_LEFT)
        return int(Action.TURN_RIGHT)

    def _bfs_first_step(self, me, targets):
        env = self.env
        start = (me.x, me.y)
        if start in targets:
            return None
        blocked = {
            (a.x, a.y) for a in env.agents if a.id != self.agent_id
        }
        prev = {start: None}
        queue = deque([start])
        goal = None
        while queue:
            cell = queue.popleft()
            if cell in targets:
                goal = cell
                break
            for dx, dy in DELTAS:
                nxt = (cell[0] + dx, cell[1] + dy)
                if nxt in prev or nxt in blocked:
                    continue
                if env.area[nxt[1], nxt[0]] == WALL:
                    continue
                prev[nxt] = cell
                queue.append(nxt)
        if goal is None:
            return None
        cell = goal
        while prev[cell] != start:
            cell = prev[cell]
        return (cell[0] - start[0], cell[1] - start[1])


def check_step_invariants(env: GridEnv, result, config) -> None:
    """Spec invariants that must hold after every step; raises on violation."""
    states = [r.state for r in env.resources]
    assert states.count(GROUND) + states.count(CARRIED) + states.count(CONSUMED) == (
        config.n_resources
    ), "resource conservation violated"

    ground_in_a2 = sum(
        1
        for r in env.resources
        if r.state == GROUND and env.area[r.y, r.x] == AREA2
    )
    if config.bottleneck is not None:
        assert ground_in_a2 <= config.bottleneck, "bottleneck exceeded"
    assert ground_in_a2 == env._area2_ground, "area2 counter out of sync"

    agent_cells = [(a.x, a.y) for a in env.agents]
    assert len(set(agent_cells)) == len(agent_cells), "two agents share a cell"
    ground_cells = [(r.x, r.y) for r in env.resources if r.state == GROUND]
    assert len(set(ground_cells)) == len(ground_cells), "two ground resources share a cell"

    per_agent = [config.r_step] * config.n_agents
    for ev in result.events:
        per_agent[ev.agent] += ev.reward
    for got, want in zip(result.rewards, per_agent):
        assert got == want, "reward decomposition violated"
