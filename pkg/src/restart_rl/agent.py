"""Compact numpy PPO: tanh MLPs with hand-written backprop, GAE and Adam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .framing import frame, unframe


class NonFiniteActivation(FloatingPointError):
    pass


class NonFiniteGradient(FloatingPointError):
    def __init__(self, message: str, minibatch: np.ndarray | None = None):
        super().__init__(message)
        self.minibatch = minibatch


class MissingBootstrap(KeyError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    lr: float = 3e-4
    ent_coef: float = 0.0
    vf_coef: float = 0.5
    steps_per_iteration: int = 2048
    max_grad_norm: float | None = 0.5
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        checks = {
            "gamma": 0 < self.gamma <= 1,
            "lam": 0 <= self.lam <= 1,
            "clip": self.clip > 0,
            "epochs": self.epochs >= 1,
            "minibatch_size": self.minibatch_size >= 1,
            "lr": self.lr >= 0,
            "ent_coef": self.ent_coef >= 0,
            "vf_coef": self.vf_coef >= 0,
            "steps_per_iteration": self.steps_per_iteration >= 1,
            "max_grad_norm": self.max_grad_norm is None or self.max_grad_norm > 0,
            "hidden": len(self.hidden) >= 1 and all(h >= 1 for h in self.hidden),
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid PPO config field(s): {', '.join(bad)}")


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MLP:
    """Fully connected tanh network whose parameters are views into a flat vector.

    Weights use the row-vector convention ``h = x @ W + b``.
    """

    def __init__(self, sizes: list[int], params: np.ndarray):
        self.sizes = list(sizes)
        self.params = params
        self.W: list[np.ndarray] = []
        self.b: list[np.ndarray] = []
        offset = 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            self.W.append(params[offset: offset + n_in * n_out].reshape(n_in, n_out))
            offset += n_in * n_out
            self.b.append(params[offset: offset + n_out])
            offset += n_out

    @staticmethod
    def n_params(sizes: list[int]) -> int:
        return sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))

    def init(self, rng: np.random.Generator, out_gain: float) -> None:
        last = len(self.W) - 1
        for k, W in enumerate(self.W):
            W[...] = _orthogonal(rng, *W.shape, out_gain if k == last else math.sqrt(2))
            self.b[k][...] = 0.0

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        last = len(self.W) - 1
        for k, (W, b) in enumerate(zip(self.W, self.b)):
            h = h @ W + b
            if k < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        last = len(self.W) - 1
        for k in range(last):
            x = np.tanh(x @ self.W[k] + self.b[k])
        return x @ self.W[last] + self.b[last]

    def backward(self, acts: list[np.ndarray], dout: np.ndarray, grad: np.ndarray) -> None:
        """Accumulate d(loss)/d(params) into ``grad`` (same layout as ``params``)."""
        views = MLP(self.sizes, grad)
        gW, gb = views.W, views.b
        d = dout
        for k in range(len(self.W) - 1, -1, -1):
            gW[k] += acts[k].T @ d
            gb[k] += d.sum(axis=0)
            if k:
                d = (d @ self.W[k].T) * (1.0 - acts[k] ** 2)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-5):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self._buf = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        m, v, buf = self.m, self.v, self._buf
        m *= self.beta1
        m += (1 - self.beta1) * grad
        np.multiply(grad, grad, out=buf)
        buf *= 1 - self.beta2
        v *= self.beta2
        v += buf
        # bias-corrected m_hat / (sqrt(v_hat) + eps), computed in place
        np.sqrt(v, out=buf)
        buf *= 1.0 / math.sqrt(1 - self.beta2 ** self.t)
        buf += self.eps
        np.divide(m, buf, out=buf)
        buf *= self.lr / (1 - self.beta1 ** self.t)
        params -= buf


class PolicyValueNet:
    """Categorical policy pi(a|s, theta) and state-value v(s|w).

    Both networks share one flat parameter vector ``params``; ``theta`` and
    ``w`` are views into it.
    """

    def __init__(self, obs_dim: int, n_actions: int, hidden: tuple[int, ...] = (64, 64), seed: int | np.random.Generator = 0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, tuple(hidden)
        p_sizes = [obs_dim, *hidden, n_actions]
        v_sizes = [obs_dim, *hidden, 1]
        n_p = MLP.n_params(p_sizes)
        self.params = np.zeros(n_p + MLP.n_params(v_sizes))
        self.theta = self.params[:n_p]
        self.w = self.params[n_p:]
        self.policy = MLP(p_sizes, self.theta)
        self.value = MLP(v_sizes, self.w)
        self.policy.init(rng, out_gain=0.01)
        self.value.init(rng, out_gain=1.0)

    def log_probs(self, obs: np.ndarray) -> np.ndarray:
        logits, _ = self.policy.forward(np.atleast_2d(obs))
        return log_softmax(logits)

    def values(self, obs: np.ndarray) -> np.ndarray:
        v, _ = self.value.forward(np.atleast_2d(obs))
        return v[:, 0]

    def to_bytes(self) -> bytes:
        header = np.array([self.obs_dim, self.n_actions, len(self.hidden), *self.hidden], dtype="<i8")
        return frame(header.tobytes() + self.params.astype("<f8").tobytes())

    def load_bytes(self, buf: bytes) -> None:
        body = unframe(buf)
        n_head = 3 + len(self.hidden)
        header = np.frombuffer(body[: 8 * n_head], dtype="<i8")
        if tuple(header) != (self.obs_dim, self.n_actions, len(self.hidden), *self.hidden):
            raise ValueError("checkpoint architecture does not match this network")
        self.params[...] = np.frombuffer(body[8 * n_head:], dtype="<f8")


@dataclass
class RolloutBatch:
    """Transitions in collection order, cut into segments.

    A segment ends at a terminal state, at a timeout, or where the iteration
    boundary split an episode. Non-terminal segment ends need a bootstrap
    value in ``bootstrap`` (keyed by the index of the segment's last step).
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    terminals: np.ndarray
    timeouts: np.ndarray
    ends: np.ndarray
    augmented: np.ndarray
    bootstrap: dict[int, float] = field(default_factory=dict)
    snapshots: list | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    deltas: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)

    def next_values(self) -> np.ndarray:
        nxt = np.empty(len(self))
        nxt[:-1] = self.values[1:]
        for i in np.flatnonzero(self.ends):
            if self.terminals[i]:
                nxt[i] = 0.0
            else:
                try:
                    nxt[i] = self.bootstrap[int(i)]
                except KeyError:
                    raise MissingBootstrap(f"segment ending at step {i} has no bootstrap value") from None
        return nxt


def gae(rewards, values, next_values, ends, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Return (advantages, td_errors); the recursion restarts at every segment end."""
    deltas = rewards + gamma * next_values - values
    adv = np.empty_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        if ends[t]:
            running = 0.0
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv, deltas


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    adv, deltas = gae(batch.rewards, batch.values, batch.next_values(), batch.ends, gamma, lam)
    batch.advantages = adv
    batch.returns = adv + batch.values
    batch.deltas = deltas
    return batch


def td_errors(batch: RolloutBatch, gamma: float) -> np.ndarray:
    return batch.rewards + gamma * batch.next_values() - batch.values


@dataclass
class LossReport:
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


class PPOAgent:
    def __init__(self, obs_dim: int, n_actions: int, config: PpoConfig = PpoConfig(), seed: int = 0):
        self.config = config
        ss = np.random.SeedSequence(seed)
        init_ss, mb_ss = ss.spawn(2)
        self.net = PolicyValueNet(obs_dim, n_actions, config.hidden, np.random.default_rng(init_ss))
        self.optimizer = Adam(len(self.net.params), config.lr)
        self.rng = np.random.default_rng(mb_ss)
        self.param_writes = 0

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> tuple[int, float, float]:
        net = self.net
        logits = net.policy(obs)
        v = net.value(obs)
        z = logits - logits.max()
        p = np.exp(z)
        s = p.sum()
        if not (np.isfinite(s) and np.isfinite(v[0])):
            raise NonFiniteActivation("policy/value forward pass produced non-finite values")
        cdf = np.cumsum(p)
        a = min(int(np.searchsorted(cdf, rng.random() * s, side="right")), len(p) - 1)
        return a, float(z[a] - math.log(s)), float(v[0])

    def value(self, obs: np.ndarray) -> float:
        return float(self.net.value(obs)[0])

    def loss_and_grad(self, obs, actions, old_log_probs, advantages, returns) -> tuple[float, np.ndarray, dict]:
        """Total PPO loss on a minibatch and its gradient w.r.t. ``net.params``."""
        cfg = self.config
        net = self.net
        n = len(actions)
        rows = np.arange(n)
        logits, p_acts = net.policy.forward(obs)
        logp = log_softmax(logits)
        probs = np.exp(logp)
        logp_a = logp[rows, actions]
        ratio = np.exp(logp_a - old_log_probs)
        clipped = np.clip(ratio, 1 - cfg.clip, 1 + cfg.clip)
        surr1 = ratio * advantages
        surr2 = clipped * advantages
        policy_loss = -np.mean(np.minimum(surr1, surr2))
        entropy_rows = -(probs * logp).sum(axis=1)
        entropy = entropy_rows.mean()
        v, v_acts = net.value.forward(obs)
        v = v[:, 0]
        value_loss = np.mean((v - returns) ** 2)
        total = policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy

        # d total / d logit
        active = surr1 <= surr2
        d_logp_a = -(ratio * advantages * active) / n
        onehot = np.zeros_like(probs)
        onehot[rows, actions] = 1.0
        d_logits = d_logp_a[:, None] * (onehot - probs)
        d_logits += (cfg.ent_coef / n) * probs * (logp + entropy_rows[:, None])
        d_v = (2.0 * cfg.vf_coef / n) * (v - returns)

        grad = np.zeros_like(net.params)
        net.policy.backward(p_acts, d_logits, grad[: len(net.theta)])
        net.value.backward(v_acts, d_v[:, None], grad[len(net.theta):])
        stats = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "clip_fraction": float(np.mean(np.abs(ratio - 1) > cfg.clip)),
            "approx_kl": float(np.mean(old_log_probs - logp_a)),
        }
        return float(total), grad, stats

    def update(self, batch: RolloutBatch) -> LossReport:
        if batch.advantages is None or batch.returns is None:
            raise ValueError("batch has no advantages; run compute_gae first")
        cfg = self.config
        adv = batch.advantages
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        n = len(batch)
        totals = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl")}
        count = 0
        for _ in range(cfg.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = order[start: start + cfg.minibatch_size]
                _, grad, stats = self.loss_and_grad(
                    batch.obs[idx], batch.actions[idx], batch.log_probs[idx], adv[idx], batch.returns[idx]
                )
                if not np.all(np.isfinite(grad)):
                    raise NonFiniteGradient(f"non-finite gradient in minibatch starting at {start}", idx)
                if cfg.max_grad_norm is not None:
                    norm = float(np.sqrt(grad @ grad))
                    if norm > cfg.max_grad_norm:
                        grad *= cfg.max_grad_norm / norm
                self.optimizer.step(self.net.params, grad)
                self.param_writes += 1
                for k in totals:
                    totals[k] += stats[k]
                count += 1
        return LossReport(**{k: v / count for k, v in totals.items()})
