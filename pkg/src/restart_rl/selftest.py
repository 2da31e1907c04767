"""Fast invariant suite behind ``restart-rl selftest``."""

from __future__ import annotations

import time
from typing import Callable

import numpy as np

from .agent import PPOAgent, PpoConfig, RolloutBatch, compute_gae
from .env import DenseCorridor, MultiGoalGrid, StateSnapshot, TimeLimitConfig, TimeMode
from .memory import EpisodicMemory, PrioritisedMemory
from .orchestrator import EvalProtocol, TrainSetup, train


def _snap(i: int, t: int = 0) -> StateSnapshot:
    return StateSnapshot(payload=i.to_bytes(4, "little"), t=t)


def check_sumtree_statistics(rng: np.random.Generator, inject_fault: bool = False) -> str | None:
    draws = 100_000
    for alpha in (0.0, 0.4, 1.0):
        mem = PrioritisedMemory(capacity=2, alpha=alpha, eps=1e-12, T_aug=10)
        mem.push(_snap(0), 1.0)
        mem.push(_snap(1), 3.0)
        expect = np.array([1.0, 3.0 ** alpha]) / (1.0 + 3.0 ** alpha)
        counts = np.zeros(2)
        for _ in range(draws):
            counts[mem.sample(rng).origin.index] += 1
        sigma = np.sqrt(draws * expect * (1 - expect))
        if np.any(np.abs(counts - draws * expect) > 3 * sigma):
            return f"alpha={alpha}: counts {counts} vs expected {draws * expect}"
    return None


def check_sumtree_consistency(rng: np.random.Generator, inject_fault: bool = False) -> str | None:
    mem = PrioritisedMemory(capacity=257, alpha=0.4)
    for _ in range(10_000):
        if len(mem) and rng.random() < 0.5:
            mem.update(int(rng.integers(len(mem))), float(rng.normal() * 5))
        else:
            mem.push(_snap(0), float(rng.normal() * 5))
    if inject_fault:
        mem.tree.nodes[1] += 0.5
    if not mem.tree.check(1e-9):
        return "internal node differs from the sum of its children"
    brute = float(np.sum(mem.tree.leaves()))
    if abs(mem.tree.total - brute) > 1e-9:
        return f"root {mem.tree.total} != brute-force sum {brute}"
    return None


def check_gradients(rng: np.random.Generator, inject_fault: bool = False) -> str | None:
    agent = PPOAgent(5, 3, PpoConfig(hidden=(4, 4), ent_coef=0.05), seed=int(rng.integers(1 << 31)))
    n = 8
    obs = rng.normal(size=(n, 5))
    actions = rng.integers(3, size=n)
    old = agent.net.log_probs(obs)[np.arange(n), actions] + rng.normal(scale=0.3, size=n)
    adv = rng.normal(size=n)
    ret = rng.normal(size=n)
    _, grad, _ = agent.loss_and_grad(obs, actions, old, adv, ret)
    params = agent.net.params
    h = 1e-5
    worst = 0.0
    for i in range(len(params)):
        keep = params[i]
        params[i] = keep + h
        up, _, _ = agent.loss_and_grad(obs, actions, old, adv, ret)
        params[i] = keep - h
        down, _, _ = agent.loss_and_grad(obs, actions, old, adv, ret)
        params[i] = keep
        num = (up - down) / (2 * h)
        worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-6))
    return None if worst <= 1e-4 else f"max relative error {worst:.2e}"


def check_time_law(rng: np.random.Generator, inject_fault: bool = False) -> str | None:
    T_env = 50
    for _ in range(20):
        mem = EpisodicMemory(parent_capacity=5, sub_capacity=3, T_env=T_env)
        for _ in range(15):
            length = int(rng.integers(1, T_env + 1))
            mem.offer([(_snap(0, t), float(rng.normal())) for t in range(length)])
        for _ in range(500):
            s = mem.sample(rng)
            if s.snapshot.t + s.T_aug != T_env:
                return f"t={s.snapshot.t} T_aug={s.T_aug}"
    return None


def check_gae(rng: np.random.Generator, inject_fault: bool = False) -> str | None:
    gamma, lam = 0.99, 0.95
    for _ in range(100):
        n = int(rng.integers(1, 12))
        terminal = bool(rng.random() < 0.5)
        batch = RolloutBatch(
            obs=np.zeros((n, 1)), actions=np.zeros(n, dtype=int), rewards=rng.normal(size=n),
            log_probs=np.zeros(n), values=rng.normal(size=n),
            terminals=np.eye(1, n, n - 1, dtype=bool)[0] & terminal,
            timeouts=np.eye(1, n, n - 1, dtype=bool)[0] & (not terminal),
            ends=np.eye(1, n, n - 1, dtype=bool)[0], augmented=np.zeros(n, dtype=bool),
            bootstrap={} if terminal else {n - 1: float(rng.normal())},
        )
        compute_gae(batch, gamma, lam)
        nxt = np.append(batch.values[1:], 0.0 if terminal else batch.bootstrap[n - 1])
        delta = batch.rewards + gamma * nxt - batch.values
        for t in range(n):
            expect = sum((gamma * lam) ** l * delta[t + l] for l in range(n - t))
            if abs(expect - batch.advantages[t]) > 1e-10:
                return f"advantage mismatch at t={t}"
    return None


def check_baseline_recovery(rng: np.random.Generator, inject_fault: bool = False) -> str | None:
    ppo = PpoConfig(hidden=(16, 16), steps_per_iteration=256, epochs=2)
    fixed = TimeLimitConfig(60, TimeMode.FIXED, 10)
    remaining = TimeLimitConfig(30, TimeMode.REMAINING)
    seed = int(rng.integers(1 << 31))

    def setup(make_env, make_memory) -> TrainSetup:
        return TrainSetup(make_env, make_memory, ppo, 0.0, 1024, EvalProtocol(2, 512))

    pairs = [
        (lambda: DenseCorridor(20, time_limit=fixed), lambda: PrioritisedMemory(100)),
        (lambda: MultiGoalGrid(5, time_limit=remaining), lambda: EpisodicMemory(5, 2, 30)),
    ]
    for make_env, make_memory in pairs:
        base = train(setup(make_env, lambda: None), seed)
        other = train(setup(make_env, make_memory), seed)
        if base.curve() != other.curve() or base.param_digest != other.param_digest:
            return "ratio-0 run diverged from plain PPO"
    return None


CHECKS: dict[str, Callable[[np.random.Generator, bool], str | None]] = {
    "sum-tree statistics": check_sumtree_statistics,
    "sum-tree consistency": check_sumtree_consistency,
    "gradient check": check_gradients,
    "T_aug = T_env - t": check_time_law,
    "GAE oracle": check_gae,
    "baseline recovery": check_baseline_recovery,
}


def selftest(inject_fault: str | None = None, seed: int = 0, echo: Callable[[str], None] = print) -> bool:
    rng = np.random.default_rng(seed)
    ok = True
    for name, check in CHECKS.items():
        started = time.perf_counter()
        fault = inject_fault == "sumtree" and name == "sum-tree consistency"
        problem = check(rng, fault)
        status = "PASS" if problem is None else "FAIL"
        ok &= problem is None
        detail = "" if problem is None else f"  ({problem})"
        echo(f"{status}  {name}  [{time.perf_counter() - started:.2f}s]{detail}")
    return ok
