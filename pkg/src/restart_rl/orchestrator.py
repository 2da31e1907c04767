"""Training loop mixing environment starts with restarts from memory."""

from __future__ import annotations

import enum
import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .agent import PPOAgent, RolloutBatch, compute_gae, td_errors
from .env import RestartableEnv
from .memory import (
    EpisodicMemory,
    EpisodicOrigin,
    OrphanSubEpisode,
    PrioritisedMemory,
    RestartMemory,
    UniformMemory,
)

log = logging.getLogger(__name__)


class Start(enum.Enum):
    FROM_P1 = "p1"
    FROM_MEMORY = "memory"


@dataclass
class RatioController:
    """Keeps the share of transitions from augmented starts near ``target_ratio``."""

    target_ratio: float = 0.1
    augmented_steps: int = 0
    total_steps: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.target_ratio < 1.0:
            raise ValueError(f"target_ratio must be in [0, 1), got {self.target_ratio}")

    def choose(self, memory_nonempty: bool) -> Start:
        if memory_nonempty and self.augmented_steps / max(self.total_steps, 1) < self.target_ratio:
            return Start.FROM_MEMORY
        return Start.FROM_P1

    def record(self, augmented: bool, n: int = 1) -> None:
        self.total_steps += n
        if augmented:
            self.augmented_steps += n

    @property
    def fraction(self) -> float:
        return self.augmented_steps / max(self.total_steps, 1)


def choose_start(controller: RatioController, memory: RestartMemory | None) -> Start:
    return controller.choose(memory is not None and len(memory) > 0)


class Policy(Protocol):
    def act(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float, float]: ...


class Collector:
    """Owns the in-progress episode across iterations for one training run."""

    def __init__(
        self,
        env: RestartableEnv,
        agent: PPOAgent,
        memory: RestartMemory | None,
        controller: RatioController,
        reset_rng: np.random.Generator,
        memory_rng: np.random.Generator,
    ):
        self.env = env
        self.agent = agent
        self.memory = memory
        self.controller = controller
        self.reset_rng = reset_rng
        self.memory_rng = memory_rng
        self.obs: np.ndarray | None = None
        self.augmented = False
        self.origin: EpisodicOrigin | None = None
        self.episode: list = []
        self.positive_reward_seen = False
        self.orphans = 0

    def _start_episode(self) -> None:
        self.episode = []
        self.origin = None
        if choose_start(self.controller, self.memory) is Start.FROM_MEMORY:
            sample = self.memory.sample(self.memory_rng)
            self.obs = self.env.restore(sample.snapshot, sample.T_aug)
            self.augmented = True
            if isinstance(sample.origin, EpisodicOrigin):
                self.origin = sample.origin
        else:
            self.obs, _ = self.env.reset(self.reset_rng)
            self.augmented = False

    def _finish_episode(self) -> None:
        if isinstance(self.memory, EpisodicMemory):
            try:
                self.memory.offer(self.episode, self.origin)
            except OrphanSubEpisode as exc:
                self.orphans += 1
                log.debug("discarding sub-episode: %s", exc)
        self.episode = []
        self.obs = None

    def collect(self, n_steps: int, act_rng: np.random.Generator) -> RolloutBatch:
        env, agent = self.env, self.agent
        need_snaps = self.memory is not None
        episodic = isinstance(self.memory, EpisodicMemory)
        obs_buf = np.empty((n_steps, env.obs_dim))
        actions = np.empty(n_steps, dtype=np.int64)
        rewards = np.empty(n_steps)
        log_probs = np.empty(n_steps)
        values = np.empty(n_steps)
        terminals = np.zeros(n_steps, dtype=bool)
        timeouts = np.zeros(n_steps, dtype=bool)
        ends = np.zeros(n_steps, dtype=bool)
        augmented = np.zeros(n_steps, dtype=bool)
        snaps: list = []
        bootstrap: dict[int, float] = {}
        for i in range(n_steps):
            if self.obs is None:
                self._start_episode()
            snap = env.snapshot() if need_snaps else None
            a, logp, v = agent.act(self.obs, act_rng)
            out = env.step(a)
            obs_buf[i] = self.obs
            actions[i], rewards[i], log_probs[i], values[i] = a, out.reward, logp, v
            augmented[i] = self.augmented
            self.controller.record(self.augmented)
            if out.reward > 0:
                self.positive_reward_seen = True
            if need_snaps:
                snaps.append(snap)
            if episodic:
                self.episode.append((snap, out.reward))
            if out.terminal or out.timeout:
                ends[i] = True
                terminals[i] = out.terminal
                timeouts[i] = out.timeout
                if out.timeout:
                    bootstrap[i] = agent.value(out.observation)
                self._finish_episode()
            else:
                self.obs = out.observation
        if not ends[-1]:
            # iteration boundary splits the episode: bootstrap the fragment
            ends[-1] = True
            bootstrap[n_steps - 1] = agent.value(self.obs)
        batch = RolloutBatch(
            obs_buf, actions, rewards, log_probs, values, terminals, timeouts, ends, augmented,
            bootstrap=bootstrap, snapshots=snaps if need_snaps else None,
        )
        self._feed(batch)
        return batch

    def _feed(self, batch: RolloutBatch) -> None:
        if isinstance(self.memory, UniformMemory):
            for snap in batch.snapshots:
                self.memory.push(snap)
        elif isinstance(self.memory, PrioritisedMemory):
            deltas = td_errors(batch, self.agent.config.gamma)
            for snap, d in zip(batch.snapshots, deltas):
                self.memory.push(snap, float(d))


def collect_iteration(collector: Collector, n_steps: int, act_rng: np.random.Generator) -> RolloutBatch:
    return collector.collect(n_steps, act_rng)


class Metric(str, enum.Enum):
    MEAN_RETURN = "mean_return"
    SUCCESS_RATE = "success_rate"


@dataclass(frozen=True)
class EvalProtocol:
    episodes: int = 10
    period: int = 10000
    metric: Metric = Metric.MEAN_RETURN


def evaluate(env: RestartableEnv, policy: Policy, protocol: EvalProtocol, rng: np.random.Generator) -> float:
    """Average metric over episodes started from the environment's own distribution."""
    scores = []
    for _ in range(protocol.episodes):
        obs, _ = env.reset(rng)
        ret = 0.0
        while True:
            a, _, _ = policy.act(obs, rng)
            out = env.step(a)
            ret += out.reward
            obs = out.observation
            if out.terminal or out.timeout:
                break
        if protocol.metric == Metric.SUCCESS_RATE:
            scores.append(1.0 if out.info.get("success") else 0.0)
        else:
            scores.append(ret)
    return float(np.mean(scores))


@dataclass(frozen=True)
class EvalRow:
    env_steps: int
    metric: float
    aug_fraction: float
    memory_size: int


@dataclass
class RunRecord:
    seed: int
    rows: list[EvalRow]
    wall_clock: float
    config_digest: str
    param_digest: str = ""
    eval_audit: list[dict] = field(default_factory=list)
    discarded: bool = False

    def curve(self) -> list[tuple[int, float, float]]:
        return [(r.env_steps, r.metric, r.aug_fraction) for r in self.rows]


@dataclass
class TrainSetup:
    """Everything ``train`` needs; built from an experiment config."""

    make_env: Callable[[], RestartableEnv]
    make_memory: Callable[[], RestartMemory | None]
    ppo: object
    ratio: float
    total_steps: int
    protocol: EvalProtocol
    config_digest: str = ""
    gate_steps: int | None = None


def _audit(memory, env, eval_env, agent) -> dict:
    return {
        "memory_reads": memory.reads if memory is not None else 0,
        "memory_writes": memory.writes if memory is not None else 0,
        "train_env_restores": env.restore_count,
        "eval_env_restores": eval_env.restore_count,
        "param_writes": agent.param_writes,
    }


def train(setup: TrainSetup, seed: int, progress: Callable[[EvalRow], None] | None = None) -> RunRecord:
    started = time.perf_counter()
    agent_ss, reset_ss, act_ss, mem_ss, eval_ss = np.random.SeedSequence(seed).spawn(5)
    env = setup.make_env()
    eval_env = setup.make_env()
    agent = PPOAgent(env.obs_dim, env.n_actions, setup.ppo, seed=int(agent_ss.generate_state(1)[0]))
    # a zero ratio never reads memory, so the run is plain PPO and keeps no memory at all
    memory = setup.make_memory() if setup.ratio > 0 else None
    controller = RatioController(setup.ratio)
    collector = Collector(env, agent, memory, controller, np.random.default_rng(reset_ss), np.random.default_rng(mem_ss))
    act_rng = np.random.default_rng(act_ss)
    eval_rng = np.random.default_rng(eval_ss)

    rows: list[EvalRow] = []
    audits: list[dict] = []

    def run_eval(steps: int) -> None:
        before = _audit(memory, env, eval_env, agent)
        snapshot_params = agent.net.params.copy()
        value = evaluate(eval_env, agent, setup.protocol, eval_rng)
        after = _audit(memory, env, eval_env, agent)
        delta = {k: after[k] - before[k] for k in after}
        delta["param_changes"] = int(np.count_nonzero(agent.net.params != snapshot_params))
        audits.append(delta)
        row = EvalRow(steps, value, controller.fraction, len(memory) if memory is not None else 0)
        rows.append(row)
        if progress is not None:
            progress(row)

    steps = 0
    run_eval(0)
    next_eval = setup.protocol.period
    discarded = False
    while steps < setup.total_steps:
        n = min(setup.ppo.steps_per_iteration, setup.total_steps - steps)
        batch = collector.collect(n, act_rng)
        compute_gae(batch, setup.ppo.gamma, setup.ppo.lam)
        agent.update(batch)
        steps += n
        if setup.gate_steps is not None and steps >= setup.gate_steps and not collector.positive_reward_seen:
            discarded = True
            break
        if steps >= next_eval or steps >= setup.total_steps:
            run_eval(steps)
            while next_eval <= steps:
                next_eval += setup.protocol.period

    return RunRecord(
        seed=seed,
        rows=rows,
        wall_clock=time.perf_counter() - started,
        config_digest=setup.config_digest,
        param_digest=hashlib.sha256(agent.net.params.tobytes()).hexdigest(),
        eval_audit=audits,
        discarded=discarded,
    )
