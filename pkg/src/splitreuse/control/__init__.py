"""Threshold policies: fixed, bang-bang, and DDPG."""

from .ddpg import (DdpgAgent, DdpgConfig, MLP, ReplayBuffer, UpdateResult, clamp_action, ddpg_act,
                   ddpg_update, ou_noise_step, ou_sigma, reward)
from .policy import (BbcPolicy, ControllerState, DdpgPolicy, EpochFeedback, FixedPolicy, make_policy)
from .rules import BbcConfig, BbcController, FixedController, bbc_next, fixed_next

__all__ = [
    "BbcConfig", "BbcController", "BbcPolicy", "ControllerState", "DdpgAgent", "DdpgConfig", "DdpgPolicy",
    "EpochFeedback", "FixedController", "FixedPolicy", "MLP", "ReplayBuffer", "UpdateResult", "bbc_next",
    "clamp_action", "ddpg_act", "ddpg_update", "fixed_next", "make_policy", "ou_noise_step", "ou_sigma", "reward",
]
