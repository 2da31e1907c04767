"""Restart memories: where augmented initial states come from.

Three variants share one sampling surface (``sample(rng) -> RestartSample``):

* :class:`UniformMemory` - ring buffer of recent states, sampled uniformly.
* :class:`PrioritisedMemory` - sum tree over states weighted by ``(|td| + eps)**alpha``.
* :class:`EpisodicMemory` - best episodes grouped into categories (a parent
  episode plus its sub-episodes), sampled by return and then uniformly
  over the states of the chosen episode.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .env import StateSnapshot
from .framing import FramingError, frame, unframe

DEFAULT_EPS = 1e-3


class EmptyMemory(LookupError):
    pass


class NonFiniteDelta(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class OrphanSubEpisode(LookupError):
    """The category a sub-episode belongs to was evicted while it ran."""


@dataclass(frozen=True)
class UniformOrigin:
    index: int


@dataclass(frozen=True)
class PrioritisedOrigin:
    index: int


@dataclass(frozen=True)
class EpisodicOrigin:
    category_id: int
    episode_index: int
    state_index: int
    # (snapshot, reward) pairs linking the parent's initial state to the sampled state
    prefix: tuple = ()

    @property
    def prefix_return(self) -> float:
        return float(sum(r for _, r in self.prefix))


Origin = Union[UniformOrigin, PrioritisedOrigin, EpisodicOrigin]


@dataclass(frozen=True)
class RestartSample:
    snapshot: StateSnapshot
    T_aug: int
    origin: Origin

    def __post_init__(self) -> None:
        if self.T_aug < 1:
            raise ValueError(f"T_aug must be >= 1, got {self.T_aug}")


def _draw(weights: np.ndarray, rng: np.random.Generator) -> int:
    """Index drawn with probability proportional to ``weights``."""
    cdf = np.cumsum(weights)
    u = rng.random() * cdf[-1]
    return min(int(np.searchsorted(cdf, u, side="right")), len(weights) - 1)


class RestartMemory:
    """Common bookkeeping: read/write counters and framed (de)serialisation."""

    def __init__(self) -> None:
        self.reads = 0
        self.writes = 0

    def __len__(self) -> int:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator) -> RestartSample:
        raise NotImplementedError

    def to_bytes(self) -> bytes:
        return frame(pickle.dumps(self, protocol=pickle.HIGHEST_PROTOCOL))

    @staticmethod
    def from_bytes(buf: bytes) -> "RestartMemory":
        try:
            return pickle.loads(unframe(buf))
        except FramingError as exc:
            raise ValueError(f"corrupt memory checkpoint: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @staticmethod
    def load(path: str | Path) -> "RestartMemory":
        return RestartMemory.from_bytes(Path(path).read_bytes())


class UniformMemory(RestartMemory):
    def __init__(self, capacity: int = 20000, T_aug: int = 10):
        super().__init__()
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.T_aug = int(T_aug)
        self._items: list[StateSnapshot] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def push(self, snapshot: StateSnapshot) -> None:
        self.writes += 1
        if len(self._items) < self.capacity:
            self._items.append(snapshot)
        else:
            self._items[self._cursor] = snapshot
        self._cursor = (self._cursor + 1) % self.capacity

    def __getitem__(self, index: int) -> StateSnapshot:
        return self._items[index]

    def sample(self, rng: np.random.Generator) -> RestartSample:
        if not self._items:
            raise EmptyMemory("uniform memory is empty")
        self.reads += 1
        i = int(rng.integers(len(self._items)))
        return RestartSample(self._items[i], self.T_aug, UniformOrigin(i))


class SumTree:
    """Binary tree of partial sums over ``capacity`` leaves (heap layout).

    Internal node ``i`` has children ``2i+1`` and ``2i+2``. The leaf row is
    padded to a power of two so every leaf sits at the same depth and leaf
    ``k`` owns the ``k``-th cumulative interval. Parents are recomputed as
    ``left + right`` on every write, so each internal node is exactly the
    sum of its children.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._width = 1 << (self.capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self._width - 1)

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def __getitem__(self, leaf: int) -> float:
        return float(self.nodes[self._width - 1 + leaf])

    def leaves(self) -> np.ndarray:
        return self.nodes[self._width - 1:self._width - 1 + self.capacity]

    def set(self, leaf: int, value: float) -> None:
        if not 0 <= leaf < self.capacity:
            raise IndexOutOfRange(f"leaf {leaf} outside [0, {self.capacity})")
        i = self._width - 1 + leaf
        self.nodes[i] = value
        while i:
            i = (i - 1) // 2
            self.nodes[i] = self.nodes[2 * i + 1] + self.nodes[2 * i + 2]

    def find(self, value: float) -> int:
        """Leaf whose cumulative interval contains ``value`` (0 <= value < total)."""
        i = 0
        last = len(self.nodes)
        while 2 * i + 1 < last:
            left = 2 * i + 1
            if value < self.nodes[left]:
                i = left
            else:
                value -= self.nodes[left]
                i = left + 1
        return min(i - (self._width - 1), self.capacity - 1)

    def check(self, atol: float = 1e-9) -> bool:
        n = self._width - 1
        if n == 0:
            return True
        kids = self.nodes[1::2][:n] + self.nodes[2::2][:n]
        return bool(np.all(np.abs(self.nodes[:n] - kids) <= atol))


class PrioritisedMemory(RestartMemory):
    """States weighted by TD-error magnitude; sampled through a sum tree.

    The stored leaf weight is already raised to ``alpha``, so sampling is a
    single descent.
    """

    def __init__(self, capacity: int = 20000, alpha: float = 0.4, eps: float = DEFAULT_EPS, T_aug: int = 10):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.T_aug = int(T_aug)
        self.tree = SumTree(self.capacity)
        self._items: list[StateSnapshot | None] = [None] * self.capacity
        self._priorities = np.zeros(self.capacity)
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    def priority(self, delta: float) -> float:
        if not math.isfinite(delta):
            raise NonFiniteDelta(f"TD error must be finite, got {delta}")
        return abs(delta) + self.eps

    def push(self, snapshot: StateSnapshot, delta: float) -> int:
        p = self.priority(delta)
        index = self._cursor
        self._items[index] = snapshot
        self._priorities[index] = p
        self.tree.set(index, p ** self.alpha)
        self._cursor = (self._cursor + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.writes += 1
        return index

    def update(self, index: int, delta: float) -> None:
        if not 0 <= index < self._size:
            raise IndexOutOfRange(f"index {index} outside [0, {self._size})")
        p = self.priority(delta)
        self._priorities[index] = p
        self.tree.set(index, p ** self.alpha)

    def probabilities(self) -> np.ndarray:
        w = self.tree.leaves()[: self._size]
        return w / w.sum()

    def __getitem__(self, index: int) -> StateSnapshot:
        if not 0 <= index < self._size:
            raise IndexOutOfRange(f"index {index} outside [0, {self._size})")
        return self._items[index]

    def sample(self, rng: np.random.Generator) -> RestartSample:
        if self._size == 0:
            raise EmptyMemory("prioritised memory is empty")
        self.reads += 1
        total = self.tree.total
        while True:
            leaf = self.tree.find(rng.random() * total)
            # float round-off can route past the filled region; redraw
            if leaf < self._size and self.tree[leaf] > 0:
                break
        return RestartSample(self._items[leaf], self.T_aug, PrioritisedOrigin(leaf))


def category_probabilities(returns: Sequence[float], alpha: float = 1.0, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Sampling distribution over return-ranked items with a negative-return offset.

    priority_i = G_i - min(0, min_j G_j) + eps; probability proportional to priority**alpha.
    """
    g = np.asarray(returns, dtype=np.float64)
    offset = min(0.0, float(g.min()))
    w = (g - offset + eps) ** alpha
    return w / w.sum()


@dataclass
class EpisodeRecord:
    """A parent episode: (pre-action snapshot, reward) pairs from an environment start."""

    steps: list
    G: float
    seq: int = 0

    @property
    def initial(self) -> StateSnapshot:
        return self.steps[0][0]

    @property
    def pool(self) -> list:
        return self.steps

    @property
    def ret(self) -> float:
        return self.G


@dataclass
class SubEpisodeRecord:
    parent_index: int
    start_t: int
    prefix_return: float
    steps: list
    augmented_return: float
    prefix: tuple = ()
    seq: int = 0

    @property
    def pool(self) -> list:
        return list(self.prefix) + list(self.steps)

    @property
    def ret(self) -> float:
        return self.augmented_return


@dataclass
class EpisodeCategory:
    id: int
    parent: EpisodeRecord
    sub_episodes: list = field(default_factory=list)
    G_bar: float = 0.0

    def recompute(self) -> float:
        self.G_bar = max([self.parent.G] + [s.augmented_return for s in self.sub_episodes])
        return self.G_bar

    def episodes(self) -> list:
        return [self.parent, *self.sub_episodes]


class EpisodicMemory(RestartMemory):
    """Best-return episodes stored as categories of a parent and its sub-episodes.

    ``offer`` takes a finished episode as a list of ``(snapshot, reward)``
    pairs, where each snapshot is the state *before* the action that earned
    the reward. Parent episodes carry no origin; sub-episodes carry the
    :class:`EpisodicOrigin` of the restart they began from.
    """

    def __init__(
        self,
        parent_capacity: int = 100,
        sub_capacity: int = 10,
        T_env: int = 50,
        alpha: float = 1.0,
        eps: float = DEFAULT_EPS,
    ):
        super().__init__()
        if parent_capacity < 1 or sub_capacity < 0:
            raise ValueError("capacities must be positive")
        self.parent_capacity = int(parent_capacity)
        self.sub_capacity = int(sub_capacity)
        self.T_env = int(T_env)
        self.alpha = float(alpha)
        self.eps = float(eps)
        self.categories: list[EpisodeCategory] = []
        self._next_id = 0
        self._seq = 0

    def __len__(self) -> int:
        return len(self.categories)

    def category(self, category_id: int) -> EpisodeCategory | None:
        for cat in self.categories:
            if cat.id == category_id:
                return cat
        return None

    def min_G_bar(self) -> float:
        return min(c.G_bar for c in self.categories)

    def offer(self, steps: Sequence[tuple[StateSnapshot, float]], origin: EpisodicOrigin | None = None) -> bool:
        if not steps:
            return False
        self._seq += 1
        steps = list(steps)
        if origin is None:
            return self._offer_parent(steps)
        return self._offer_sub(steps, origin)

    def _offer_parent(self, steps: list) -> bool:
        G = float(sum(r for _, r in steps))
        if len(self.categories) >= self.parent_capacity:
            floor = self.min_G_bar()
            if not G > floor:
                return False
            # ties at the minimum: evict the oldest category
            victim = next(c for c in self.categories if c.G_bar == floor)
            self.categories.remove(victim)
        cat = EpisodeCategory(self._next_id, EpisodeRecord(steps, G, self._seq))
        cat.recompute()
        self._next_id += 1
        self.categories.append(cat)
        self.writes += 1
        return True

    def _offer_sub(self, steps: list, origin: EpisodicOrigin) -> bool:
        cat = self.category(origin.category_id)
        if cat is None:
            raise OrphanSubEpisode(f"category {origin.category_id} no longer in memory")
        if self.sub_capacity == 0:
            return False
        prefix = tuple(origin.prefix)
        prefix_return = origin.prefix_return
        aug = prefix_return + float(sum(r for _, r in steps))
        record = SubEpisodeRecord(
            parent_index=cat.id,
            start_t=steps[0][0].t,
            prefix_return=prefix_return,
            steps=steps,
            augmented_return=aug,
            prefix=prefix,
            seq=self._seq,
        )
        if len(cat.sub_episodes) >= self.sub_capacity:
            floor = min(s.augmented_return for s in cat.sub_episodes)
            if not aug > floor:
                return False
            victim = next(s for s in cat.sub_episodes if s.augmented_return == floor)
            cat.sub_episodes.remove(victim)
        cat.sub_episodes.append(record)
        cat.recompute()
        self.writes += 1
        return True

    def category_probabilities(self) -> np.ndarray:
        return category_probabilities([c.G_bar for c in self.categories], self.alpha, self.eps)

    def sample(self, rng: np.random.Generator, T_env: int | None = None) -> RestartSample:
        if not self.categories:
            raise EmptyMemory("episodic memory is empty")
        T_env = self.T_env if T_env is None else int(T_env)
        self.reads += 1
        ci = _draw(self.category_probabilities(), rng)
        cat = self.categories[ci]
        episodes = cat.episodes()
        ei = _draw(category_probabilities([e.ret for e in episodes], self.alpha, self.eps), rng)
        pool = episodes[ei].pool
        eligible = [k for k, (snap, _) in enumerate(pool) if snap.t <= T_env - 1]
        if not eligible:
            raise EmptyMemory("selected episode has no state with t <= T_env - 1")
        k = eligible[int(rng.integers(len(eligible)))]
        snap = pool[k][0]
        origin = EpisodicOrigin(cat.id, ei, k, tuple(pool[:k]))
        return RestartSample(snap, T_env - snap.t, origin)

    def check(self) -> bool:
        """Recompute every maintained quantity and compare."""
        if len(self.categories) > self.parent_capacity:
            return False
        for cat in self.categories:
            if len(cat.sub_episodes) > self.sub_capacity:
                return False
            expect = max([cat.parent.G] + [s.prefix_return + sum(r for _, r in s.steps) for s in cat.sub_episodes])
            if expect != cat.G_bar:
                return False
        return True


def make_memory(variant: str, **kwargs) -> RestartMemory | None:
    if variant == "none":
        return None
    if variant == "uniform":
        return UniformMemory(**kwargs)
    if variant == "prioritised":
        return PrioritisedMemory(**kwargs)
    if variant == "episodic":
        return EpisodicMemory(**kwargs)
    raise ValueError(f"unknown memory variant {variant!r}")
