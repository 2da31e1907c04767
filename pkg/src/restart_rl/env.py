"""Deterministic, fully snapshottable gridworld environments.

Every environment exposes an initial-state distribution through ``reset``,
can capture its complete Markov state with ``snapshot`` and can be put back
into any captured state with ``restore``. The in-episode clock lives in the
environment itself so that timeouts are reported separately from terminal
states.
"""

from __future__ import annotations

import enum
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .framing import FramingError, frame, unframe


class MalformedSnapshot(ValueError):
    """The snapshot payload is corrupt or belongs to a different environment."""


class EpisodeOver(RuntimeError):
    """``step`` was called after the episode terminated or timed out."""


@dataclass(frozen=True)
class StateSnapshot:
    """Complete environment state plus the in-episode time step ``t``."""

    payload: bytes
    t: int

    def to_bytes(self) -> bytes:
        return frame(struct.pack("<I", self.t) + self.payload)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "StateSnapshot":
        try:
            body = unframe(buf)
        except FramingError as exc:
            raise MalformedSnapshot(str(exc)) from exc
        if len(body) < 4:
            raise MalformedSnapshot("snapshot body too short")
        (t,) = struct.unpack_from("<I", body, 0)
        return cls(payload=body[4:], t=t)


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    terminal: bool
    timeout: bool = False
    info: dict[str, Any] = field(default_factory=dict)


class TimeMode(str, enum.Enum):
    FIXED = "fixed"
    REMAINING = "remaining"


@dataclass(frozen=True)
class TimeLimitConfig:
    """Time limits for environment starts and augmented starts.

    ``FIXED`` gives every augmented start its own clock starting at 0 with
    limit ``T_aug``. ``REMAINING`` keeps the snapshot's clock so that only
    ``T_env - t`` steps remain.
    """

    T_env: int
    mode: TimeMode = TimeMode.REMAINING
    T_aug: int | None = None

    def __post_init__(self) -> None:
        if self.T_env < 1:
            raise ValueError(f"T_env must be positive, got {self.T_env}")
        if self.mode == TimeMode.FIXED:
            if self.T_aug is None or not 1 <= self.T_aug <= self.T_env:
                raise ValueError(f"fixed mode needs 1 <= T_aug <= T_env, got T_aug={self.T_aug}")

    def aug_limit(self, t: int) -> int:
        """Number of steps permitted from an augmented start at time ``t``."""
        if self.mode == TimeMode.FIXED:
            return int(self.T_aug)
        if not 0 <= t <= self.T_env - 1:
            raise ValueError(f"augmented start needs 0 <= t <= T_env - 1, got t={t}")
        return self.T_env - t


class RestartableEnv:
    """Base class handling clocks, snapshots and restores.

    Subclasses describe their dynamics through a small set of hooks operating
    on an immutable tuple of ints (the Markov state).
    """

    name = "base"
    n_actions: int
    obs_dim: int

    def __init__(self, time_limit: TimeLimitConfig):
        self.time_limit = time_limit
        self._state: tuple[int, ...] | None = None
        self.t = 0
        self.limit = time_limit.T_env
        self.done = True
        self.restore_count = 0
        self._fingerprint = zlib.crc32(repr((self.name, self._params())).encode()) & 0xFFFFFFFF

    # hooks --------------------------------------------------------------
    def _params(self) -> tuple:
        raise NotImplementedError

    def _sample_initial(self, rng: np.random.Generator) -> tuple[int, ...]:
        raise NotImplementedError

    def _transition(self, state: tuple[int, ...], action: int) -> tuple[tuple[int, ...], float, bool]:
        raise NotImplementedError

    def _observe(self, state: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def _is_success(self, state: tuple[int, ...], terminal: bool) -> bool:
        return False

    # public API ---------------------------------------------------------
    @property
    def state(self) -> tuple[int, ...]:
        if self._state is None:
            raise RuntimeError("environment not initialised; call reset() first")
        return self._state

    @property
    def remaining(self) -> int:
        return self.limit - self.t

    def reset(self, rng: np.random.Generator) -> tuple[np.ndarray, StateSnapshot]:
        self._state = tuple(int(v) for v in self._sample_initial(rng))
        self.t = 0
        self.limit = self.time_limit.T_env
        self.done = False
        return self._observe(self._state), self.snapshot()

    def snapshot(self) -> StateSnapshot:
        body = struct.pack(f"<I{len(self.state)}i", self._fingerprint, *self.state)
        return StateSnapshot(payload=frame(body), t=self.t)

    def decode(self, snap: StateSnapshot) -> tuple[int, ...]:
        try:
            body = unframe(snap.payload)
        except FramingError as exc:
            raise MalformedSnapshot(str(exc)) from exc
        if len(body) < 4 or (len(body) - 4) % 4:
            raise MalformedSnapshot("payload has wrong size")
        (fp,) = struct.unpack_from("<I", body, 0)
        if fp != self._fingerprint:
            raise MalformedSnapshot("snapshot was taken on a different environment")
        n = (len(body) - 4) // 4
        return struct.unpack_from(f"<{n}i", body, 4)

    def restore(self, snap: StateSnapshot, T_aug: int | None = None) -> np.ndarray:
        """Put the environment into ``snap`` as an augmented initial state.

        The clock follows the configured time mode unless ``T_aug`` is given
        explicitly, in which case the episode is allowed exactly ``T_aug``
        further steps.
        """
        state = self.decode(snap)
        if T_aug is None:
            T_aug = self.time_limit.aug_limit(snap.t)
        if T_aug < 1:
            raise ValueError(f"T_aug must be positive, got {T_aug}")
        if self.time_limit.mode == TimeMode.REMAINING:
            self.t, self.limit = snap.t, snap.t + T_aug
        else:
            self.t, self.limit = 0, T_aug
        self._state = state
        self.done = False
        self.restore_count += 1
        return self._observe(state)

    def step(self, action: int) -> StepOutcome:
        if self.done:
            raise EpisodeOver("episode has ended; reset() or restore() first")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} out of range [0, {self.n_actions})")
        state, reward, terminal = self._transition(self.state, int(action))
        self._state = state
        self.t += 1
        timeout = (not terminal) and self.t >= self.limit
        self.done = terminal or timeout
        info = {}
        if self.done:
            info["success"] = self._is_success(state, terminal)
        return StepOutcome(self._observe(state), float(reward), terminal, timeout, info)

    def observe(self) -> np.ndarray:
        return self._observe(self.state)


def _one_hot(index: int, size: int, out: np.ndarray, offset: int) -> None:
    out[offset + index] = 1.0


class DenseCorridor(RestartableEnv):
    """1-D corridor; +1 for each move right, -1 for each move left.

    Actions: 0 = left, 1 = right, 2 = stay. Bumping into either end leaves the
    agent in place with zero reward. There are no terminal states.
    """

    name = "dense-corridor"
    n_actions = 3

    def __init__(self, length: int = 200, T_env: int = 1000, time_limit: TimeLimitConfig | None = None):
        self.length = int(length)
        self.obs_dim = 2
        super().__init__(time_limit or TimeLimitConfig(T_env))

    def _params(self) -> tuple:
        return (self.length,)

    def _sample_initial(self, rng):
        return (0,)

    def _transition(self, state, action):
        (x,) = state
        move = (-1, 1, 0)[action]
        nx = min(max(x + move, 0), self.length - 1)
        return (nx,), float(nx - x), False

    def _observe(self, state):
        x = state[0] / (self.length - 1)
        return np.array([2.0 * x - 1.0, x * x], dtype=np.float64)


_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1), (0, 0))


def generate_maze(n: int, seed: int) -> np.ndarray:
    """Perfect maze on an ``n x n`` grid (True marks a wall).

    Passages live on even coordinates and are carved by a depth-first search
    seeded with ``seed``; the result is fully determined by ``(n, seed)``.
    """
    rng = np.random.default_rng(seed)
    walls = np.ones((n, n), dtype=bool)
    cells = (n + 1) // 2
    seen = np.zeros((cells, cells), dtype=bool)
    stack = [(0, 0)]
    seen[0, 0] = True
    walls[0, 0] = False
    while stack:
        r, c = stack[-1]
        options = [
            (r + dr, c + dc)
            for dr, dc in _MOVES[:4]
            if 0 <= r + dr < cells and 0 <= c + dc < cells and not seen[r + dr, c + dc]
        ]
        if not options:
            stack.pop()
            continue
        nr, nc = options[rng.integers(len(options))]
        seen[nr, nc] = True
        walls[2 * nr, 2 * nc] = False
        walls[r + nr, c + nc] = False
        stack.append((nr, nc))
    return walls


def bfs_distances(walls: np.ndarray, source: tuple[int, int], moves: Sequence[tuple[int, int]] = _MOVES[:4]) -> np.ndarray:
    """Shortest-path step counts from ``source``; -1 for unreachable cells."""
    h, w = walls.shape
    dist = np.full((h, w), -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        r, c = queue.popleft()
        for dr, dc in moves:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and not walls[nr, nc] and dist[nr, nc] < 0:
                dist[nr, nc] = dist[r, c] + 1
                queue.append((nr, nc))
    return dist


class DeepMaze(RestartableEnv):
    """Sparse-reward maze: reward 1 and termination on reaching the goal.

    Actions: 0 = up, 1 = right, 2 = down, 3 = left. Moves into walls or out
    of the grid leave the agent in place. ``action_penalty`` is charged on
    every step. The goal is the first cell (row-major) at shortest-path
    distance ``goal_distance`` from the start; ``None`` picks the farthest
    cell of the maze.
    """

    name = "deep-maze"
    n_actions = 4

    def __init__(
        self,
        size: int = 30,
        T_env: int = 100,
        action_penalty: float = 0.0,
        maze_seed: int = 0,
        goal_distance: int | None = 26,
        extra_openings: int = 0,
        time_limit: TimeLimitConfig | None = None,
    ):
        self.size = int(size)
        self.action_penalty = float(action_penalty)
        self.maze_seed = int(maze_seed)
        self.extra_openings = int(extra_openings)
        self.walls = generate_maze(self.size, self.maze_seed)
        if self.extra_openings:
            self._open_walls(self.extra_openings)
        self.start = (0, 0)
        dist = bfs_distances(self.walls, self.start)
        if goal_distance is None:
            goal = np.unravel_index(int(np.argmax(dist)), dist.shape)
        else:
            # deterministic choice: the first cell (row-major) at that distance
            hits = np.argwhere(dist == goal_distance)
            if len(hits) == 0:
                raise ValueError(f"no cell at distance {goal_distance} (max {dist.max()})")
            goal = tuple(hits[0])
        self.goal = (int(goal[0]), int(goal[1]))
        self.goal_distance = int(dist[self.goal])
        self.obs_dim = 2 * self.size
        super().__init__(time_limit or TimeLimitConfig(T_env))

    def _open_walls(self, count: int) -> None:
        rng = np.random.default_rng(self.maze_seed + 7919)
        candidates = [
            (r, c)
            for r in range(self.size)
            for c in range(self.size)
            if self.walls[r, c] and (r % 2) != (c % 2)
        ]
        for k in rng.permutation(len(candidates))[:count]:
            self.walls[candidates[k]] = False

    def _params(self) -> tuple:
        return (self.size, self.maze_seed, self.extra_openings, self.goal)

    def _sample_initial(self, rng):
        return self.start

    def _transition(self, state, action):
        r, c = state
        dr, dc = _MOVES[action]
        nr, nc = r + dr, c + dc
        if not (0 <= nr < self.size and 0 <= nc < self.size) or self.walls[nr, nc]:
            nr, nc = r, c
        at_goal = (nr, nc) == self.goal
        reward = (1.0 if at_goal else 0.0) - self.action_penalty
        return (nr, nc), reward, at_goal

    def _observe(self, state):
        obs = np.zeros(self.obs_dim)
        obs[state[0]] = 1.0
        obs[self.size + state[1]] = 1.0
        return obs

    def _is_success(self, state, terminal):
        return terminal

    def optimal_actions(self) -> dict[tuple[int, int], int]:
        """Greedy shortest-path action for every reachable cell."""
        dist = bfs_distances(self.walls, self.goal)
        policy = {}
        for r, c in np.argwhere(dist > 0):
            for a, (dr, dc) in enumerate(_MOVES[:4]):
                nr, nc = r + dr, c + dc
                if 0 <= nr < self.size and 0 <= nc < self.size and dist[nr, nc] == dist[r, c] - 1:
                    policy[(int(r), int(c))] = a
                    break
        return policy

    def render(self) -> str:
        rows = []
        for r in range(self.size):
            line = []
            for c in range(self.size):
                if (r, c) == self.start:
                    line.append("S")
                elif (r, c) == self.goal:
                    line.append("G")
                else:
                    line.append("#" if self.walls[r, c] else ".")
            rows.append("".join(line))
        return "\n".join(rows)


class MultiGoalGrid(RestartableEnv):
    """Open grid with a goal cell drawn uniformly at every reset.

    The goal is part of the state and of the observation. Reward is -1 after
    every step that does not end on the goal and 0 otherwise; there are no
    terminal states. Actions: up, right, down, left, stay.
    """

    name = "multigoal-grid"
    n_actions = 5

    def __init__(self, size: int = 10, T_env: int = 50, time_limit: TimeLimitConfig | None = None):
        self.size = int(size)
        self.start = (0, 0)
        self.goals = [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) != self.start]
        self.obs_dim = 4 * self.size
        super().__init__(time_limit or TimeLimitConfig(T_env))

    @property
    def n_goals(self) -> int:
        return len(self.goals)

    def _params(self) -> tuple:
        return (self.size,)

    def _sample_initial(self, rng):
        gr, gc = self.goals[int(rng.integers(len(self.goals)))]
        return (*self.start, gr, gc)

    def _transition(self, state, action):
        r, c, gr, gc = state
        dr, dc = _MOVES[action]
        nr = min(max(r + dr, 0), self.size - 1)
        nc = min(max(c + dc, 0), self.size - 1)
        reward = 0.0 if (nr, nc) == (gr, gc) else -1.0
        return (nr, nc, gr, gc), reward, False

    def _observe(self, state):
        obs = np.zeros(self.obs_dim)
        for k, v in enumerate(state):
            obs[k * self.size + v] = 1.0
        return obs

    def _is_success(self, state, terminal):
        return state[:2] == state[2:]

    def optimal_return(self, goal: tuple[int, int]) -> float:
        """Best achievable undiscounted return for ``goal`` (BFS over the open grid)."""
        dist = bfs_distances(np.zeros((self.size, self.size), dtype=bool), self.start)
        d = int(dist[goal])
        steps = min(d, self.time_limit.T_env)
        return -float(max(steps - 1, 0)) if d <= self.time_limit.T_env else -float(self.time_limit.T_env)


ENVIRONMENTS = {
    DenseCorridor.name: DenseCorridor,
    DeepMaze.name: DeepMaze,
    MultiGoalGrid.name: MultiGoalGrid,
}


def make_env(name: str, time_limit: TimeLimitConfig | None = None, **params: Any) -> RestartableEnv:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(time_limit=time_limit, **params)
