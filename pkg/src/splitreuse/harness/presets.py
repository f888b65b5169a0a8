"""Named experiment bundles: ``{baseline,fixed,bbc,ddpg}_{standard,bidirectional,ushape}[_q]``."""

from __future__ import annotations

from dataclasses import replace

from ..errors import ConfigError
from .config import TOPOLOGIES, RunConfig

POLICY_PRESETS = {
    "baseline": {"policy": "fixed", "theta": 1.01},
    "fixed": {"policy": "fixed", "theta": 0.98},
    "bbc": {"policy": "bbc"},
    "ddpg": {"policy": "ddpg"},
}


def preset_names() -> list:
    return [f"{p}_{t}{q}" for q in ("", "_q") for p in POLICY_PRESETS for t in TOPOLOGIES]


def preset_config(name: str, base: RunConfig | None = None) -> RunConfig:
    parts = name.split("_")
    quant = parts[-1] == "q"
    if quant:
        parts = parts[:-1]
    if len(parts) != 2 or parts[0] not in POLICY_PRESETS or parts[1] not in TOPOLOGIES:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(preset_names())}")
    kw = dict(POLICY_PRESETS[parts[0]], topology=parts[1], quantize_int8=quant, preset=name)
    return replace(base or RunConfig(), **kw)


def baseline_for(cfg: RunConfig) -> RunConfig:
    """Always-send, fp32 run of the same topology and every other setting unchanged."""
    return replace(cfg, policy="fixed", theta=1.01, quantize_int8=False, preset=f"baseline_{cfg.topology}",
                   schedule="sequential", transport="inprocess")
