"""Per-interface threshold policies driven by epoch-level feedback."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .ddpg import DdpgAgent, DdpgConfig, reward
from .rules import BbcConfig, BbcController, FixedController

EMA_FACTOR = 0.9


@dataclass
class EpochFeedback:
    epoch: int                      # 1-based
    val_ppl: float
    comm_bytes: int                 # bytes on the gated interfaces this epoch
    similarities: dict              # interface -> per-client mean gate similarity (nan if none)


@dataclass
class ControllerState:
    interfaces: tuple
    num_clients: int
    total_epochs: int
    sim_ema: dict = field(default_factory=dict)
    ppl_history: list = field(default_factory=list)
    comm_ratio_history: list = field(default_factory=list)
    theta: dict = field(default_factory=dict)
    progress: float = 0.0
    comm0: float | None = None
    loss0: float | None = None

    def __post_init__(self):
        for name in self.interfaces:
            self.sim_ema.setdefault(name, np.ones(self.num_clients))

    def observe(self, fb: EpochFeedback) -> None:
        for name in self.interfaces:
            s = np.asarray(fb.similarities.get(name, np.full(self.num_clients, np.nan)), dtype=np.float64)
            ema = self.sim_ema[name]
            ok = np.isfinite(s)
            ema[ok] = EMA_FACTOR * ema[ok] + (1.0 - EMA_FACTOR) * s[ok]
        self.ppl_history.append(float(fb.val_ppl))
        if self.comm0 is None:
            self.comm0 = float(max(fb.comm_bytes, 1))
            self.loss0 = float(np.log(fb.val_ppl))
        self.comm_ratio_history.append(fb.comm_bytes / self.comm0)
        self.progress = fb.epoch / self.total_epochs

    def vector(self, name: str) -> np.ndarray:
        """``[sim EMA per client, PPL trend, comm trend, theta, progress]`` (K + 4 features)."""
        h, c = self.ppl_history, self.comm_ratio_history
        ppl_trend = (h[-1] - h[-2]) / h[-2] if len(h) >= 2 else 0.0
        comm_trend = c[-1] - c[-2] if len(c) >= 2 else 0.0
        return np.concatenate([self.sim_ema[name], [ppl_trend, comm_trend, self.theta[name], self.progress]])


class FixedPolicy:
    def __init__(self, interfaces, theta: float):
        self.ctl = FixedController(theta, allow_sentinel=True)
        self.theta = {name: self.ctl.theta for name in interfaces}

    def observe(self, fb: EpochFeedback) -> dict:
        return dict(self.theta)

    def tensors(self) -> dict:
        return {}


class BbcPolicy:
    """One bang-bang controller; all gated interfaces share its threshold."""

    def __init__(self, interfaces, cfg: BbcConfig, random_init_seed: int | None = None):
        self.ctl = BbcController(cfg, random_init_seed)
        self.interfaces = tuple(interfaces)
        self.theta = {name: self.ctl.theta for name in self.interfaces}

    def observe(self, fb: EpochFeedback) -> dict:
        th = self.ctl.update(fb.val_ppl)
        self.theta = {name: th for name in self.interfaces}
        return dict(self.theta)

    def tensors(self) -> dict:
        return {}


class DdpgPolicy:
    """One independent agent per gated interface; all share the reward."""

    def __init__(self, interfaces, cfg: DdpgConfig, num_clients: int, total_epochs: int, seed: int):
        self.cfg = cfg
        self.state = ControllerState(tuple(interfaces), num_clients, total_epochs)
        self.agents = {name: DdpgAgent(num_clients + 4, cfg, seed=seed, name=name) for name in interfaces}
        self.theta = {name: cfg.init_action for name in interfaces}
        self.state.theta = dict(self.theta)
        self._last = None           # (state vectors, actions) awaiting their reward
        self.rewards: list = []

    def observe(self, fb: EpochFeedback) -> dict:
        st = self.state
        st.observe(fb)
        vecs = {name: st.vector(name) for name in self.agents}
        if self._last is not None:
            ratio = st.comm_ratio_history[-1]
            r = reward(float(np.log(fb.val_ppl)), st.loss0, fb.comm_bytes, st.comm0,
                       ratio < self.cfg.zero_ratio, ratio > self.cfg.full_ratio,
                       self.cfg.alpha, self.cfg.beta, self.cfg.p_zero, self.cfg.p_full)
            self.rewards.append(r)
            prev_vecs, prev_act = self._last
            done = fb.epoch >= st.total_epochs
            for name, ag in self.agents.items():
                ag.remember(prev_vecs[name], prev_act[name], r, vecs[name], done)
                ag.update()
        actions = {}
        for name, ag in self.agents.items():
            actions[name] = ag.act(vecs[name], explore=True)
            ag.end_epoch()
        self._last = (vecs, actions)
        self.theta = actions
        st.theta = dict(actions)
        return dict(actions)

    def tensors(self) -> dict:
        out = {}
        for ag in self.agents.values():
            out.update(ag.tensors())
        return out


def make_policy(policy: str, interfaces, *, theta: float = 0.98, bbc: BbcConfig | None = None,
                ddpg: DdpgConfig | None = None, num_clients: int = 10, total_epochs: int = 20, seed: int = 0):
    if policy == "fixed":
        return FixedPolicy(interfaces, theta)
    if policy == "bbc":
        return BbcPolicy(interfaces, bbc or BbcConfig())
    if policy == "ddpg":
        return DdpgPolicy(interfaces, ddpg or DdpgConfig(), num_clients, total_epochs, seed)
    raise ConfigError(f"unknown policy {policy!r}")
