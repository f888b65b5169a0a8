"""Fixed and bang-bang threshold policies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..errors import ConfigError
from ..kernel.rng import Rng


def fixed_next(theta0: float) -> float:
    if not -1.0 <= theta0 <= 1.0:
        raise ConfigError(f"fixed threshold {theta0} outside [-1, 1]")
    return float(theta0)


class FixedController:
    """Emits the same threshold every epoch.

    ``allow_sentinel`` admits thresholds outside [-1, 1]: above 1 forces every
    transmission, below -1 suppresses all of them after the first epoch.
    """

    def __init__(self, theta0: float, allow_sentinel: bool = False):
        self.theta = float(theta0) if allow_sentinel else fixed_next(theta0)

    def update(self, feedback=None) -> float:
        return self.theta


@dataclass(frozen=True)
class BbcConfig:
    low: float = 0.98
    high: float = 0.995
    tolerance: float = 0.02
    window: int = 2
    consecutive: int = 2

    def validate(self) -> "BbcConfig":
        if not -1.0 <= self.low < self.high <= 1.0:
            raise ConfigError(f"need -1 <= low < high <= 1, got ({self.low}, {self.high})")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")
        if self.window < 1 or self.consecutive < 1:
            raise ConfigError("window and consecutive must be >= 1")
        return self


def _rising(h: Sequence[float], n: int) -> bool:
    return len(h) > n and all(h[-k] > h[-k - 1] for k in range(1, n + 1))


def _falling(h: Sequence[float], n: int) -> bool:
    return len(h) > n and all(h[-k] < h[-k - 1] for k in range(1, n + 1))


def bbc_next(cfg: BbcConfig, ppl_history: Sequence[float], prev_theta: float | None = None) -> float:
    """Next threshold from the validation-PPL history (oldest first).

    high if the last epoch jumped by more than the tolerance or PPL rose over
    each of the last ``window`` epochs; low after ``consecutive`` strict
    decreases; otherwise hold.
    """
    prev = cfg.low if prev_theta is None else prev_theta
    h = list(ppl_history)
    if len(h) >= 2 and h[-1] > h[-2] * (1.0 + cfg.tolerance):
        return cfg.high
    if _rising(h, cfg.window):
        return cfg.high
    if _falling(h, cfg.consecutive):
        return cfg.low
    return prev


class BbcController:
    def __init__(self, cfg: BbcConfig, random_init_seed: int | None = None):
        self.cfg = cfg.validate()
        self.history: list = []
        if random_init_seed is None:
            self.theta = cfg.low
        else:
            self.theta = cfg.high if Rng(random_init_seed, "bbc-init").uniform(1)[0] >= 0.5 else cfg.low

    def update(self, ppl: float) -> float:
        self.history.append(float(ppl))
        self.theta = bbc_next(self.cfg, self.history, self.theta)
        return self.theta
