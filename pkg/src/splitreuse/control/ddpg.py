"""DDPG threshold agent: actor/critic MLPs, replay buffer, decaying OU exploration."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from ..kernel import autodiff as ad
from ..kernel.optim import AdamW, ConstantSchedule
from ..kernel.rng import Rng
from ..kernel.tensor import DTYPE


@dataclass(frozen=True)
class DdpgConfig:
    hidden: tuple = (400, 300)
    sigma0: float = 0.002
    sigma_decay: float = 0.98
    ou_theta: float = 0.15
    ou_mu: float = 0.0
    replay_capacity: int = 50
    batch_size: int = 4
    gamma: float = 0.95
    tau: float = 0.01
    alpha: float = 2.0          # validation-loss weight
    beta: float = 1.0           # communication weight
    p_zero: float = 1.0
    p_full: float = 1.0
    zero_ratio: float = 0.01    # comm ratio below this triggers p_zero
    full_ratio: float = 0.99    # comm ratio above this triggers p_full
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    updates_per_epoch: int = 1
    init_action: float = 0.98

    def validate(self) -> "DdpgConfig":
        if self.replay_capacity < 1 or self.batch_size < 1:
            raise ConfigError("replay_capacity and batch_size must be >= 1")
        if not 0.0 < self.init_action < 1.0:
            raise ConfigError("init_action must be in (0, 1)")
        if self.sigma0 < 0 or not 0 < self.sigma_decay <= 1:
            raise ConfigError("bad OU noise schedule")
        return self


def clamp_action(a: float) -> float:
    return float(min(1.0, max(0.0, a)))


def ou_sigma(sigma0: float, decay: float, epoch: int) -> float:
    return sigma0 * decay ** epoch


def ou_noise_step(n: float, sigma: float, rng: Rng, theta_ou: float = 0.15, mu: float = 0.0) -> float:
    """One Euler step ``n + theta_ou (mu - n) + sigma N(0, 1)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    z = float(rng.gaussian(1)[0]) if sigma > 0 else 0.0
    return n + theta_ou * (mu - n) + sigma * z


def reward(loss_t: float, loss_0: float, comm_t: float, comm_0: float, zero_flag: bool, full_flag: bool,
           alpha: float, beta: float, p_zero: float = 1.0, p_full: float = 1.0) -> float:
    if loss_0 <= 0 or comm_0 <= 0:
        raise ConfigError("reward baselines must be positive")
    r = -alpha * loss_t / loss_0 - beta * comm_t / comm_0
    if zero_flag:
        r -= p_zero
    if full_flag:
        r -= p_full
    return r


class MLP:
    """ReLU MLP with optional sigmoid output; weights use fan-in uniform init, last layer +-3e-3."""

    def __init__(self, sizes, rng: Rng, out_sigmoid: bool = False, out_bias: float = 0.0):
        self.sizes = tuple(sizes)
        self.out_sigmoid = out_sigmoid
        self.params = []
        last = len(sizes) - 2
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = 3e-3 if i == last else 1.0 / math.sqrt(a)
            w = ((rng.child("w", i).uniform((a, b)) * 2 - 1) * lim).astype(DTYPE)
            bias = ((rng.child("b", i).uniform(b) * 2 - 1) * lim).astype(DTYPE)
            if i == last:
                bias += DTYPE(out_bias)
            self.params += [w, bias]

    def forward(self, x, params=None):
        """``x`` is a ``Var`` ``[n, in]``; ``params`` are the ``Var`` leaves to use (defaults: constants)."""
        ps = params if params is not None else [ad.leaf(p) for p in self.params]
        h = x
        n_layers = len(ps) // 2
        for i in range(n_layers):
            h = ad.add_bias(ad.linear(h, ps[2 * i]), ps[2 * i + 1])
            if i < n_layers - 1:
                h = ad.relu(h)
        return ad.sigmoid(h) if self.out_sigmoid else h

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(ad.leaf(np.asarray(x, dtype=DTYPE))).data

    def copy_from(self, other: "MLP") -> None:
        for p, q in zip(self.params, other.params):
            np.copyto(p, q)

    def soft_update(self, other: "MLP", tau: float) -> None:
        t = DTYPE(tau)
        for p, q in zip(self.params, other.params):
            p *= DTYPE(1.0) - t
            p += t * q


class ReplayBuffer:
    """Fixed-capacity FIFO of ``(state, action, reward, next_state, done)``; oldest evicted first."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.items: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.items)

    def push(self, state, action, r, next_state, done=False) -> None:
        self.items.append((np.asarray(state, dtype=DTYPE), float(action), float(r),
                           np.asarray(next_state, dtype=DTYPE), bool(done)))

    def sample(self, rng: Rng, n: int):
        idx = rng.integers(len(self.items), n)
        batch = [self.items[i] for i in idx]
        s = np.stack([b[0] for b in batch])
        a = np.asarray([[b[1]] for b in batch], dtype=DTYPE)
        r = np.asarray([[b[2]] for b in batch], dtype=DTYPE)
        s2 = np.stack([b[3] for b in batch])
        d = np.asarray([[float(b[4])] for b in batch], dtype=DTYPE)
        return s, a, r, s2, d


@dataclass
class UpdateResult:
    status: str                 # "ok" or "skipped"
    critic_loss: float | None = None
    actor_loss: float | None = None


@dataclass
class DdpgAgent:
    state_dim: int
    cfg: DdpgConfig = field(default_factory=DdpgConfig)
    seed: int = 0
    name: str = "agent"

    def __post_init__(self):
        self.cfg.validate()
        rng = Rng(self.seed, "ddpg", self.name)
        h = self.cfg.hidden
        logit = math.log(self.cfg.init_action / (1.0 - self.cfg.init_action))
        self.actor = MLP((self.state_dim, *h, 1), rng.child("actor"), out_sigmoid=True, out_bias=logit)
        self.critic = MLP((self.state_dim + 1, *h, 1), rng.child("critic"))
        self.actor_target = MLP((self.state_dim, *h, 1), rng.child("actor"), out_sigmoid=True, out_bias=logit)
        self.critic_target = MLP((self.state_dim + 1, *h, 1), rng.child("critic"))
        self.actor_opt = AdamW(ConstantSchedule(self.cfg.actor_lr), weight_decay=0.0, clip_norm=None)
        self.critic_opt = AdamW(ConstantSchedule(self.cfg.critic_lr), weight_decay=0.0, clip_norm=None)
        self.buffer = ReplayBuffer(self.cfg.replay_capacity)
        self.noise = 0.0
        self.epoch = 0
        self._noise_rng = rng.child("ou")
        self._sample_rng = rng.child("replay")

    @property
    def sigma(self) -> float:
        return ou_sigma(self.cfg.sigma0, self.cfg.sigma_decay, self.epoch)

    def act(self, state, explore: bool = True) -> float:
        s = np.asarray(state, dtype=DTYPE).reshape(1, -1)
        if s.shape[1] != self.state_dim:
            raise ShapeError(f"state has {s.shape[1]} features, agent expects {self.state_dim}")
        a = float(self.actor(s)[0, 0])
        if explore:
            self.noise = ou_noise_step(self.noise, self.sigma, self._noise_rng, self.cfg.ou_theta, self.cfg.ou_mu)
            a += self.noise
        return clamp_action(a)

    def end_epoch(self) -> None:
        """Advance the noise-decay clock by one epoch."""
        self.epoch += 1

    def remember(self, state, action, r, next_state, done=False) -> None:
        self.buffer.push(state, action, r, next_state, done)

    def _critic_vars(self):
        return [ad.leaf(p, requires_grad=True) for p in self.critic.params]

    def critic_targets(self, batch) -> np.ndarray:
        s, a, r, s2, d = batch
        a2 = self.actor_target(s2)
        q2 = self.critic_target(np.concatenate([s2, a2], axis=1))
        return r + DTYPE(self.cfg.gamma) * (DTYPE(1.0) - d) * q2

    def critic_loss(self, batch) -> float:
        s, a, *_ = batch
        q = self.critic(np.concatenate([s, a], axis=1))
        y = self.critic_targets(batch)
        return float(((q - y) ** 2).mean())

    def critic_step(self, batch) -> float:
        s, a, *_ = batch
        y = self.critic_targets(batch)
        pv = self._critic_vars()
        q = self.critic.forward(ad.leaf(np.concatenate([s, a], axis=1)), pv)
        loss = ad.mse(q, y)
        grads = ad.backward(loss, pv)
        self.critic_opt.step(self.critic.params, grads)
        return float(loss.data)

    def actor_step(self, batch) -> float:
        s = batch[0]
        pv = [ad.leaf(p, requires_grad=True) for p in self.actor.params]
        a = self.actor.forward(ad.leaf(s), pv)
        q = self.critic.forward(ad.concat(ad.leaf(s), a))
        loss = ad.scale(ad.mean_all(q), -1.0)
        grads = ad.backward(loss, pv)
        self.actor_opt.step(self.actor.params, grads)
        return float(loss.data)

    def update(self) -> UpdateResult:
        if len(self.buffer) < self.cfg.batch_size:
            return UpdateResult("skipped")
        closs = aloss = None
        for _ in range(self.cfg.updates_per_epoch):
            batch = self.buffer.sample(self._sample_rng, self.cfg.batch_size)
            closs = self.critic_step(batch)
            aloss = self.actor_step(batch)
            self.actor_target.soft_update(self.actor, self.cfg.tau)
            self.critic_target.soft_update(self.critic, self.cfg.tau)
        return UpdateResult("ok", closs, aloss)

    def tensors(self) -> dict:
        out = {}
        for tag, net in (("actor", self.actor), ("critic", self.critic),
                         ("actor_target", self.actor_target), ("critic_target", self.critic_target)):
            for i, p in enumerate(net.params):
                out[f"{self.name}.{tag}.{i}"] = p
        return out


def ddpg_act(agent: DdpgAgent, state, explore: bool = False) -> float:
    return agent.act(state, explore)


def ddpg_update(agent: DdpgAgent) -> UpdateResult:
    return agent.update()
