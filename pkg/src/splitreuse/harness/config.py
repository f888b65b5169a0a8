"""Run configuration and its flat ``key = value`` text format."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace

from ..control.ddpg import DdpgConfig
from ..control.rules import BbcConfig
from ..errors import ConfigError
from ..model.transformer import ModelConfig

TOPOLOGIES = ("standard", "bidirectional", "ushape")
POLICIES = ("fixed", "bbc", "ddpg")

GATED = {
    "standard": ("f2s",),
    "bidirectional": ("f2s", "s2f"),
    "ushape": ("f2s", "s2t", "t2s", "s2f"),
}


@dataclass(frozen=True)
class RunConfig:
    preset: str = "custom"
    topology: str = "standard"
    policy: str = "fixed"
    theta: float = 0.98
    gating: bool = True
    quantize_int8: bool = False
    epochs: int = 20
    clients: int = 10
    seed: int = 0
    # corpus
    samples: int = 1000
    val_size: int = 200
    test_size: int = 200
    vocab_size: int = 32
    seq_len: int = 16
    sharpness: float = 2.5
    domain_shift: float = 0.5
    # model
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 4
    lora_rank: int = 8
    lora_alpha: float = 4.0
    lora_dropout: float = 0.1
    frontend_layers: int = 1
    tail_layers: int = 1                 # used by the U-shape topology only
    # base pre-training
    pretrain_samples: int = 4000
    pretrain_steps: int = 300
    pretrain_batch: int = 32
    pretrain_lr: float = 3e-3
    # fine-tuning
    batch_size: int = 10
    lr: float = 1e-3
    warmup_frac: float = 0.5
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    agg_interval: int = 0                # 0 = once per epoch
    server_adapters: str = "shared"      # shared | per_client
    reuse_grad_mode: str = "through_current"   # through_current | freeze
    # gating
    rp_ratio: int = 4
    rp_min_dim: int = 16
    # bang-bang
    bbc_low: float = 0.98
    bbc_high: float = 0.995
    bbc_tolerance: float = 0.02
    bbc_window: int = 2
    bbc_consecutive: int = 2
    bbc_random_init: bool = False
    # DDPG (negative sigma/alpha/beta = topology default)
    ddpg_sigma0: float = -1.0
    ddpg_sigma_decay: float = 0.98
    ddpg_ou_theta: float = 0.15
    ddpg_alpha: float = -1.0
    ddpg_beta: float = -1.0
    ddpg_gamma: float = 0.95
    ddpg_tau: float = 0.01
    ddpg_replay: int = 50
    ddpg_batch: int = 4
    ddpg_actor_lr: float = 1e-4
    ddpg_critic_lr: float = 1e-3
    ddpg_updates_per_epoch: int = 1
    ddpg_init_action: float = 0.98
    ddpg_p_zero: float = 1.0
    ddpg_p_full: float = 1.0
    ddpg_zero_ratio: float = 0.01
    ddpg_full_ratio: float = 0.99
    # execution
    schedule: str = "sequential"         # sequential | concurrent
    transport: str = "inprocess"         # inprocess | socket
    up_bps: float = 30.6e6
    down_bps: float = 166.8e6
    record_wall_clock: bool = False

    # -- derived -------------------------------------------------------------------
    @property
    def gated_interfaces(self) -> tuple:
        return GATED[self.topology]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
            seq_len=self.seq_len, lora_rank=self.lora_rank, lora_alpha=self.lora_alpha,
            lora_dropout=self.lora_dropout, frontend_layers=self.frontend_layers,
            tail_layers=self.tail_layers if self.topology == "ushape" else 0)

    def resolved(self) -> "RunConfig":
        """Materialize topology-dependent defaults."""
        u = self.topology == "ushape"
        return replace(
            self,
            ddpg_sigma0=self.ddpg_sigma0 if self.ddpg_sigma0 >= 0 else (0.005 if u else 0.002),
            ddpg_alpha=self.ddpg_alpha if self.ddpg_alpha >= 0 else (1.5 if u else 2.0),
            ddpg_beta=self.ddpg_beta if self.ddpg_beta >= 0 else (2.0 if u else 1.0),
        )

    def bbc_config(self) -> BbcConfig:
        return BbcConfig(self.bbc_low, self.bbc_high, self.bbc_tolerance, self.bbc_window, self.bbc_consecutive)

    def ddpg_config(self) -> DdpgConfig:
        r = self.resolved()
        return DdpgConfig(
            sigma0=r.ddpg_sigma0, sigma_decay=r.ddpg_sigma_decay, ou_theta=r.ddpg_ou_theta,
            replay_capacity=r.ddpg_replay, batch_size=r.ddpg_batch, gamma=r.ddpg_gamma, tau=r.ddpg_tau,
            alpha=r.ddpg_alpha, beta=r.ddpg_beta, p_zero=r.ddpg_p_zero, p_full=r.ddpg_p_full,
            zero_ratio=r.ddpg_zero_ratio, full_ratio=r.ddpg_full_ratio, actor_lr=r.ddpg_actor_lr,
            critic_lr=r.ddpg_critic_lr, updates_per_epoch=r.ddpg_updates_per_epoch,
            init_action=r.ddpg_init_action)

    def validate(self) -> "RunConfig":
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"unknown topology {self.topology!r}")
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.server_adapters not in ("shared", "per_client"):
            raise ConfigError(f"unknown server_adapters mode {self.server_adapters!r}")
        if self.reuse_grad_mode not in ("through_current", "freeze"):
            raise ConfigError(f"unknown reuse_grad_mode {self.reuse_grad_mode!r}")
        if self.schedule not in ("sequential", "concurrent"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.transport not in ("inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if self.epochs < 1 or self.clients < 1 or self.batch_size < 1:
            raise ConfigError("epochs, clients and batch_size must be >= 1")
        if self.samples < self.clients * self.batch_size:
            raise ConfigError(f"samples={self.samples} gives clients fewer than one batch each")
        if self.agg_interval < 0:
            raise ConfigError("agg_interval must be >= 0")
        if self.batch_size > 65535:
            raise ConfigError("batch_size must fit the u16 wire field")
        self.model_config().validate()
        self.bbc_config().validate()
        self.ddpg_config().validate()
        return self

    def sha256(self) -> str:
        return hashlib.sha256(dumps(self.resolved()).encode()).hexdigest()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse(name: str, text: str):
    t = _TYPES[name]
    if t == "bool":
        low = text.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        return {"int": int, "float": float, "str": str}[t](text.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {t}") from None


def dumps(cfg: RunConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        text = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        lines.append(f"{k} = {text}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) on top of ``base``."""
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in _TYPES:
            raise ConfigError(f"line {n}: unknown key {k!r}")
        values[k] = _parse(k, v)
    return with_overrides(base or RunConfig(), values)


def with_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    clean = {}
    for k, v in overrides.items():
        if k not in _TYPES:
            raise ConfigError(f"unknown config key {k!r}")
        clean[k] = _parse(k, str(v)) if isinstance(v, str) and _TYPES[k] != "str" else v
    return replace(cfg, **clean)
