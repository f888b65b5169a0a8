import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitreuse.errors import ConfigError, ShapeError
from splitreuse.federation import AggregationConfig, broadcast, decode_adapters, encode_adapters, fedavg
from splitreuse.model import LoraAdapterSet
from splitreuse.protocol.transport import Network
from splitreuse.protocol.wire import MsgType

f32 = st.floats(-1e3, 1e3, width=32)


def _set(a, b):
    return LoraAdapterSet({"h0.q.A": np.asarray(a, np.float32), "h0.q.B": np.asarray(b, np.float32)})


def test_single_client_identity_and_pairwise_mean():
    x = _set([[1.5, -2.0]], [3.0])
    assert fedavg([x], [1.0]).equal(x)
    y = _set([[0.5, 7.0]], [-1.0])
    out = fedavg([x, y], [0.5, 0.5])
    np.testing.assert_array_equal(out["h0.q.A"], [[1.0, 2.5]])
    np.testing.assert_array_equal(out["h0.q.B"], [1.0])


def test_weighted_scalar_example():
    a = LoraAdapterSet({"s": np.array([0.0], np.float32)})
    b = LoraAdapterSet({"s": np.array([4.0], np.float32)})
    assert fedavg([a, b], [0.25, 0.75])["s"][0] == 3.0


def test_errors():
    x = _set([[1.0]], [1.0])
    with pytest.raises(ConfigError):
        fedavg([x, x], [0.5, 0.6])
    with pytest.raises(ShapeError):
        fedavg([x, _set([[1.0, 2.0]], [1.0])], [0.5, 0.5])
    with pytest.raises(ShapeError):
        fedavg([x, LoraAdapterSet({"other": np.zeros(1, np.float32)})], [0.5, 0.5])
    with pytest.raises(ShapeError):
        fedavg([x, x], [1.0])
    with pytest.raises(ConfigError):
        AggregationConfig(0, (1.0,)).validate()
    assert AggregationConfig(3, (0.5, 0.5)).validate().interval == 3


@given(arrays(np.float32, (2, 3), elements=f32), st.integers(1, 8))
def test_idempotence(a, k):
    s = LoraAdapterSet({"t": a})
    out = fedavg([s.copy() for _ in range(k)], np.full(k, 1.0 / k))
    np.testing.assert_array_equal(out["t"], a)


@given(st.lists(arrays(np.float32, 5, elements=f32), min_size=2, max_size=6), st.data())
def test_convex_hull(sets, data):
    raw = np.array(data.draw(st.lists(st.floats(0.01, 1.0), min_size=len(sets), max_size=len(sets))))
    w = raw / raw.sum()
    if abs(w.sum() - 1.0) > 1e-9:
        return
    out = fedavg([LoraAdapterSet({"t": s}) for s in sets], w)["t"]
    stack = np.stack(sets)
    assert (out >= stack.min(0)).all() and (out <= stack.max(0)).all()


def test_fedavg_matches_float64_oracle():
    r = np.random.default_rng(0)
    sets = [r.standard_normal((4, 4)).astype(np.float32) for _ in range(10)]
    out = fedavg([LoraAdapterSet({"t": s}) for s in sets], [0.1] * 10)["t"]
    ref = (sum(0.1 * s.astype(np.float64) for s in sets)).astype(np.float32)
    np.testing.assert_array_equal(out, ref)


def test_adapter_payload_roundtrip():
    x = _set([[1.0, 2.0]], [3.0])
    assert decode_adapters(encode_adapters(x)).equal(x)


@pytest.mark.parametrize("k", [1, 3])
def test_broadcast_over_network_records_downlink(k):
    glob = _set([[1.0, 2.0]], [3.0])
    clients = [_set([[0.0, i]], [float(i)]) for i in range(k)]
    net = Network(k)
    broadcast(glob, clients, net, epoch=2, step=5)
    assert all(c.equal(glob) for c in clients)
    for led in (net.client_ledger, net.server_ledger):
        recs = led.records()
        assert len(recs) == k
        assert all(r.type == MsgType.ADAPTER_BROADCAST and r.direction == "down" for r in recs)
        assert [r.client_id for r in recs] == list(range(k))
    net.close()


def test_broadcast_without_network_copies():
    glob = _set([[1.0, 2.0]], [3.0])
    clients = [_set([[0.0, 0.0]], [0.0])]
    broadcast(glob, clients)
    assert clients[0].equal(glob)
