import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import SCRIPTED_OPTIMUM, scripted_threshold_env
from splitreuse.control import (BbcConfig, BbcController, ControllerState, DdpgAgent, DdpgConfig, EpochFeedback,
                                FixedController, ReplayBuffer, bbc_next, clamp_action, ddpg_act, ddpg_update,
                                fixed_next, make_policy, ou_noise_step, ou_sigma, reward)
from splitreuse.errors import ConfigError, ShapeError
from splitreuse.kernel.rng import Rng

# Small networks keep the property tests fast; the scripted run uses the full 400-300 shape.
SMALL = DdpgConfig(hidden=(16, 8))
# Exploration wide enough to discover an optimum 0.28 away from the start (see decisions ledger).
SCRIPTED = DdpgConfig(sigma0=0.1, init_action=0.5, updates_per_epoch=5, actor_lr=1e-3)


# ---- fixed ------------------------------------------------------------------------------

def test_fixed_emits_constant():
    c = FixedController(0.98)
    assert [c.update() for _ in range(50)] == [0.98] * 50
    assert fixed_next(-1.0) == -1.0
    for bad in (1.01, -1.5):
        with pytest.raises(ConfigError):
            fixed_next(bad)
    assert FixedController(1.01, allow_sentinel=True).update() == 1.01


# ---- bang-bang ------------------------------------------------------------------------------

LOW, HIGH = 0.98, 0.995
EXAMPLES = [([10.0, 10.3], None, HIGH), ([10.0, 9.5, 9.1], HIGH, LOW), ([10.0, 10.1, 10.15], LOW, HIGH)]

# (history, tolerance, window, previous theta, expected)
SCRIPTED_HISTORIES = [
    ([10.0], 0.02, 2, None, LOW),                   # single observation: initial theta holds
    ([10.0, 10.0], 0.02, 2, HIGH, HIGH),            # flat: hold
    ([8.0, 10.0], 0.25, 2, LOW, LOW),               # exactly at tolerance (8 * 1.25 == 10): hold
    ([8.0, np.nextafter(10.0, 11.0)], 0.25, 2, LOW, HIGH),  # one ulp above tolerance: switch
    ([10.0, 9.0], 0.02, 2, HIGH, HIGH),             # only one decrease: hold
    ([10.0, 9.0, 8.0], 0.02, 2, HIGH, LOW),         # two strict decreases: low
    ([10.0, 9.0, 9.0], 0.02, 2, HIGH, HIGH),        # non-strict second step: hold
    ([10.0, 10.1, 10.1], 0.02, 2, LOW, LOW),        # rise then flat is not a trend: hold
    ([10.0, 9.0, 9.1], 0.02, 2, LOW, LOW),          # small rebound inside tolerance: hold
    ([9.0, 10.0, 9.5, 9.4], 0.02, 2, HIGH, LOW),    # recovery after a spike
    ([10.0, 10.05], 0.02, 1, LOW, HIGH),            # window 1: any rise switches
    ([10.0, 9.0, 8.0, 9.0], 0.02, 2, LOW, HIGH),    # jump after a decline
]


@pytest.mark.parametrize("history,prev,expected", EXAMPLES)
def test_bbc_documented_examples(history, prev, expected):
    assert bbc_next(BbcConfig(), history, prev) == expected


@pytest.mark.parametrize("history,tol,window,prev,expected", SCRIPTED_HISTORIES)
def test_bbc_scripted_histories(history, tol, window, prev, expected):
    assert bbc_next(BbcConfig(tolerance=tol, window=window), history, prev) == expected


def test_bbc_config_validation_and_controller():
    with pytest.raises(ConfigError):
        BbcConfig(low=0.99, high=0.98).validate()
    with pytest.raises(ConfigError):
        BbcConfig(tolerance=-0.1).validate()
    c = BbcController(BbcConfig())
    assert c.theta == LOW
    assert [c.update(p) for p in (10.0, 10.5, 10.0, 9.0)] == [LOW, HIGH, HIGH, LOW]
    assert c.update(9.5) == HIGH
    assert BbcController(BbcConfig(), random_init_seed=3).theta in (LOW, HIGH)


@given(st.lists(st.floats(1.0, 100.0), min_size=1, max_size=12), st.sampled_from([LOW, HIGH]))
def test_bbc_emits_only_two_levels_and_is_pure(history, prev):
    cfg = BbcConfig()
    out = bbc_next(cfg, history, prev)
    assert out in (LOW, HIGH)
    assert out == bbc_next(cfg, list(history), prev)


# ---- reward ---------------------------------------------------------------------------------

def test_reward_examples():
    assert reward(0.5, 1.0, 0.2, 1.0, False, False, 2.0, 1.0) == pytest.approx(-1.2)
    assert reward(0.5, 1.0, 0.2, 1.0, True, False, 2.0, 1.0, p_zero=1.0) == pytest.approx(-2.2)
    assert reward(3.0, 3.0, 7.0, 7.0, False, False, 2.0, 1.0) == pytest.approx(-3.0)
    assert reward(1, 1, 1, 1, True, True, 2, 1) == pytest.approx(-5.0)
    for args in ((1, 0, 1, 1), (1, 1, 1, -1)):
        with pytest.raises(ConfigError):
            reward(*args, False, False, 2, 1)


@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 5))
def test_reward_strictly_decreasing_in_loss_and_comm(loss, comm, l0, c0, d):
    base = reward(loss, l0, comm, c0, False, False, 2.0, 1.0)
    assert reward(loss + d, l0, comm, c0, False, False, 2.0, 1.0) < base
    assert reward(loss, l0, comm + d, c0, False, False, 2.0, 1.0) < base


# ---- OU noise -------------------------------------------------------------------------------

def test_ou_sigma_decay_exact():
    assert ou_sigma(0.002, 0.98, 3) == 0.002 * 0.98 ** 3
    assert round(ou_sigma(0.002, 0.98, 3), 7) == 0.0018824
    assert ou_sigma(0.002, 0.98, 0) == 0.002


def test_ou_zero_sigma_stays_zero_and_seeded_streams_match():
    n, rng = 0.0, Rng(0)
    for _ in range(100):
        n = ou_noise_step(n, 0.0, rng)
    assert n == 0.0

    def stream(seed):
        r, n, out = Rng(seed, "ou"), 0.0, []
        for _ in range(50):
            n = ou_noise_step(n, 0.1, r)
            out.append(n)
        return out
    assert stream(1) == stream(1) and stream(1) != stream(2)
    with pytest.raises(ValueError):
        ou_noise_step(0.0, -1.0, Rng(0))


def test_ou_long_run_mean():
    """Empirical mean over 1e5 steps is near zero.

    The bound accounts for autocorrelation: the discrete process has lag-1
    correlation ``1 - theta``, which inflates the variance of the sample mean by
    ``(2 - theta) / theta`` relative to independent draws.
    """
    theta, sigma, n_steps = 0.15, 0.002, 100_000
    r, n, total = Rng(0, "ou-mean"), 0.0, 0.0
    for _ in range(n_steps):
        n = ou_noise_step(n, sigma, r, theta)
        total += n
    stationary_sd = sigma / math.sqrt(2 * theta - theta ** 2)
    bound = 3 * stationary_sd * math.sqrt((2 - theta) / theta) / math.sqrt(n_steps)
    assert abs(total / n_steps) <= bound


# ---- agent ----------------------------------------------------------------------------------

def test_clamp_and_action_range():
    assert clamp_action(1.2) == 1.0 and clamp_action(-0.3) == 0.0 and clamp_action(0.4) == 0.4
    ag = DdpgAgent(3, DdpgConfig(hidden=(8, 8), sigma0=50.0), seed=0)
    acts = [ag.act([0.1, 0.2, 0.3]) for _ in range(50)]
    assert all(0.0 <= a <= 1.0 for a in acts) and {0.0, 1.0} & set(acts)


@given(st.integers(0, 1000), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_action_always_in_unit_interval(seed, state):
    ag = DdpgAgent(3, DdpgConfig(hidden=(8, 4), sigma0=5.0), seed=seed)
    assert 0.0 <= ag.act(state, explore=True) <= 1.0


def test_act_determinism_and_shape_error():
    ag = DdpgAgent(5, SMALL, seed=1)
    s = [0.9, 0.8, 0.0, 0.0, 0.5]
    assert ddpg_act(ag, s) == ddpg_act(ag, s)
    assert ddpg_act(ag, s) == pytest.approx(SMALL.init_action, abs=0.01)
    with pytest.raises(ShapeError):
        ag.act([0.0] * 4)


def test_replay_buffer_evicts_oldest_first():
    b = ReplayBuffer(3)
    for i in range(5):
        b.push([i], 0.0, float(i), [i + 1])
    assert len(b) == 3
    assert [it[2] for it in b.items] == [2.0, 3.0, 4.0]


def test_update_skipped_when_buffer_short():
    ag = DdpgAgent(2, SMALL, seed=0)
    for _ in range(3):
        ag.remember([0, 0], 0.5, -1.0, [0, 0])
    assert ddpg_update(ag).status == "skipped"
    ag.remember([0, 0], 0.5, -1.0, [0, 0])
    res = ddpg_update(ag)
    assert res.status == "ok" and res.critic_loss is not None


def test_critic_loss_decreases_on_fixed_batch():
    """Net decrease across 10 critic steps on one replayed batch (Adam need not be monotone step-to-step)."""
    ag = DdpgAgent(2, SCRIPTED, seed=0)
    scripted_threshold_env(ag, epochs=20)
    batch = ag.buffer.sample(Rng(6), SCRIPTED.batch_size)
    before = ag.critic_loss(batch)
    for _ in range(10):
        ag.critic_step(batch)
    after = ag.critic_loss(batch)
    assert after < 0.5 * before, (before, after)


def test_scripted_environment_converges():
    thetas = scripted_threshold_env(DdpgAgent(2, SCRIPTED, seed=0))
    assert np.abs(thetas[-20:] - SCRIPTED_OPTIMUM).max() <= 0.1


# ---- policies -------------------------------------------------------------------------------

def _fb(epoch, ppl, comm, k=2, names=("f2s",)):
    return EpochFeedback(epoch, ppl, comm, {n: np.full(k, 0.99) for n in names})


def test_controller_state_vector():
    st_ = ControllerState(("f2s",), num_clients=2, total_epochs=10)
    st_.theta = {"f2s": 0.9}
    st_.observe(_fb(1, 10.0, 100))
    st_.observe(EpochFeedback(2, 11.0, 50, {"f2s": np.array([0.5, np.nan])}))
    v = st_.vector("f2s")
    ema1 = 0.9 * 1.0 + 0.1 * 0.99
    # client 1 reported no similarity in epoch 2, so its EMA holds
    np.testing.assert_allclose(v, [0.9 * ema1 + 0.1 * 0.5, ema1, 0.1, -0.5, 0.9, 0.2], rtol=1e-12)


def test_ddpg_policy_one_agent_per_interface():
    names = ("f2s", "s2t", "t2s", "s2f")
    pol = make_policy("ddpg", names, ddpg=SMALL, num_clients=10, total_epochs=5, seed=0)
    assert set(pol.agents) == set(names)
    assert all(a.state_dim == 14 for a in pol.agents.values())
    th = pol.observe(_fb(1, 20.0, 1000, k=10, names=names))
    assert set(th) == set(names) and all(0 <= v <= 1 for v in th.values())
    pol.observe(_fb(2, 19.0, 400, k=10, names=names))
    assert len(pol.rewards) == 1
    assert pol.rewards[0] == pytest.approx(reward(math.log(19.0), math.log(20.0), 400, 1000, False, False, 2.0, 1.0))
    assert all(len(a.buffer) == 1 for a in pol.agents.values())


def test_make_policy_variants():
    assert make_policy("fixed", ("f2s",), theta=-1.01).observe(None) == {"f2s": -1.01}
    bbc = make_policy("bbc", ("f2s", "s2f"))
    assert bbc.observe(_fb(1, 10.0, 1)) == {"f2s": LOW, "s2f": LOW}
    with pytest.raises(ConfigError):
        make_policy("pid", ("f2s",))
