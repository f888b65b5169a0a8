import numpy as np
import pytest

from oracles import central_difference, loss64
from splitreuse.errors import ConfigError, ModeError, ProtocolError, ShapeError, StateError
from splitreuse.kernel.rng import Rng
from splitreuse.model import (DropoutKey, LoraAdapterSet, ModelConfig, Segment, build_model, decode_container,
                              encode_container, forward_frontend, forward_server_with_loss, forward_tail_and_loss,
                              load_checkpoint, save_checkpoint)
from splitreuse.model.transformer import full_forward_loss, logits, mean_nll

STD = ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_layers=3, seq_len=6, lora_rank=4)
USH = ModelConfig(vocab_size=16, d_model=16, n_heads=2, n_layers=4, seq_len=6, lora_rank=4, tail_layers=1)


def _batch(cfg, b=3, seed=1):
    r = Rng(seed, "batch")
    tok = r.child("x").integers(cfg.vocab_size, b * cfg.seq_len).reshape(b, cfg.seq_len)
    tgt = r.child("y").integers(cfg.vocab_size, b * cfg.seq_len).reshape(b, cfg.seq_len)
    return tok, tgt


def _with_random_b(model, seed=2):
    """Zero-initialized B would make every A-gradient vanish; use random B for gradient checks."""
    ad = model.adapters.copy()
    for n in ad.names():
        if n.endswith(".B"):
            ad.tensors[n] = Rng(seed, n).gaussian(ad[n].shape) * np.float32(0.3)
    return model.with_adapters(ad)


def _masks(cfg, dkey, b):
    return {(l, t): dkey.mask(l, t, (b, cfg.seq_len, cfg.d_model), cfg.lora_dropout).astype(np.float64)
            for l in range(cfg.n_layers) for t in ("q", "v")}


def _fd_check(model, grads, names, tokens, targets, masks, n_coords=20, seed=0):
    """Compare analytic grads on ``n_coords`` random adapter coordinates against float64 central differences."""
    cfg = model.config
    adapters = {k: v.astype(np.float64) for k, v in model.adapters.tensors.items()}
    rng = np.random.default_rng(seed)
    failures = []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in adapters[name].shape)
        num = central_difference(lambda: loss64(cfg, model.base, adapters, tokens, targets, masks),
                                 adapters[name], idx)
        ana = float(grads[name][idx])
        if abs(ana - num) > max(1e-4, 1e-2 * abs(num)):
            failures.append((name, idx, ana, num))
    return failures


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=30, n_heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(n_layers=2, frontend_layers=1, tail_layers=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(frontend_layers=0).validate()


def test_init_is_deterministic_and_lora_starts_at_zero():
    a, b = build_model(STD, 5), build_model(STD, 5)
    assert all(np.array_equal(a.base[k], b.base[k]) for k in a.base)
    assert a.adapters.equal(b.adapters)
    assert all(not a.adapters[n].any() for n in a.adapters.names() if n.endswith(".B"))
    # B = 0 means the adapted model equals the base model
    tok, _ = _batch(STD)
    np.testing.assert_array_equal(logits(a, tok), logits(a, tok, adapters=False))


def test_frontend_shape_and_reference_agreement():
    m = build_model(STD, 0)
    tok, tgt = _batch(STD)
    act = forward_frontend(m, tok)
    assert act.shape == (3, STD.seq_len, STD.d_model) and act.dtype == np.float32
    loss, _, _ = forward_server_with_loss(m, act, tgt)
    assert loss == pytest.approx(loss64(STD, m.base, m.adapters.tensors, tok, tgt), rel=1e-5)


def test_mode_errors():
    m = build_model(STD, 0)
    with pytest.raises(ModeError):
        forward_tail_and_loss(m, np.zeros((1, 6, 16), np.float32), np.zeros((1, 6), int))
    with pytest.raises(ModeError):
        Segment(build_model(USH, 0), "server")


def test_shape_and_state_errors():
    m = build_model(STD, 0)
    seg = Segment(m, "server")
    with pytest.raises(ShapeError):
        seg.forward(np.zeros((2, 5, 16), np.float32), labels=np.zeros((2, 5), int))
    with pytest.raises(StateError):
        seg.backward()
    tok, tgt = _batch(STD)
    seg.forward(forward_frontend(m, tok), labels=tgt)
    seg.backward()
    with pytest.raises(StateError):
        seg.backward()


@pytest.mark.parametrize("cfg", [STD, USH], ids=["standard", "ushape"])
def test_split_gradients_match_float64_finite_differences(cfg):
    """20 random adapter coordinates per segment, rel 1e-2 / abs 1e-4, dropout active."""
    m = _with_random_b(build_model(cfg, 3))
    tok, tgt = _batch(cfg)
    dkey = DropoutKey(7, 1, 0, 0)
    front = Segment(m, "frontend")
    act = front.forward(tok, dkey)
    grads = {}
    if cfg.ushape:
        trunk = Segment(m, "trunk")
        h = trunk.forward(act, dkey)
        tail = Segment(m, "tail")
        tail.forward(h, dkey, labels=tgt)
        g_tail, g_h = tail.backward()
        g_trunk, g_act = trunk.backward(g_h)
        segments = {"tail": g_tail, "trunk": g_trunk}
    else:
        server = Segment(m, "server")
        server.forward(act, dkey, labels=tgt)
        g_srv, g_act = server.backward()
        segments = {"server": g_srv}
    g_front, none = front.backward(g_act)
    assert none is None
    segments["frontend"] = g_front
    masks = _masks(cfg, dkey, tok.shape[0])
    for i, (seg, g) in enumerate(segments.items()):
        grads.update(g)
        bad = _fd_check(m, g, sorted(g), tok, tgt, masks, seed=i)
        assert not bad, f"{seg}: {bad[:3]}"


def test_split_equals_unsplit_bitwise():
    m = _with_random_b(build_model(STD, 4))
    tok, tgt = _batch(STD)
    dkey = DropoutKey(1, 1, 0, 0)
    front = Segment(m, "frontend")
    act = front.forward(tok, dkey)
    loss, cut, g_srv = forward_server_with_loss(m, act, tgt, dkey)
    g_front, _ = front.backward(cut)
    from splitreuse.kernel import autodiff as ad
    full, _, AD = full_forward_loss(m, tok, tgt, dkey)
    names = list(AD)
    g_full = dict(zip(names, ad.backward(full, [AD[n] for n in names])))
    assert float(full.data) == loss
    for n, g in {**g_srv, **g_front}.items():
        np.testing.assert_array_equal(g, g_full[n])


def test_dropout_masks_depend_only_on_key():
    k = DropoutKey(0, 1, 2, 3)
    np.testing.assert_array_equal(k.mask(0, "q", (2, 3), 0.5), DropoutKey(0, 1, 2, 3).mask(0, "q", (2, 3), 0.5))
    assert not np.array_equal(k.mask(0, "q", (8, 8), 0.5), DropoutKey(0, 1, 2, 4).mask(0, "q", (8, 8), 0.5))
    m = k.mask(1, "v", (1000,), 0.1)
    assert set(np.unique(m)) <= {0.0, np.float32(1 / 0.9)}


def test_mean_nll_matches_oracle():
    m = build_model(STD, 0)
    tok, tgt = _batch(STD, b=5)
    assert mean_nll(m, tok, tgt, batch_size=2) == pytest.approx(loss64(STD, m.base, m.adapters.tensors, tok, tgt),
                                                                 rel=1e-5)


def test_adapter_names_partition_between_parties():
    m = build_model(USH, 0)
    client, server = set(m.client_adapter_names()), set(m.server_adapter_names())
    assert client.isdisjoint(server)
    assert client | server == set(m.adapters.names())
    assert "h0.q.A" in client and "h3.v.B" in client and "h1.q.A" in server


def test_container_roundtrip(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "ids": np.array([1, -2], dtype=np.int32),
         "codes": np.array([-127, 0, 127], dtype=np.int8)}
    blob = encode_container(t, "x = 1\n")
    out, text = decode_container(blob)
    assert text == "x = 1\n" and list(out) == list(t)
    for k in t:
        np.testing.assert_array_equal(out[k], t[k])
        assert out[k].dtype == t[k].dtype
    save_checkpoint(tmp_path / "c.scmd", t)
    back, _ = load_checkpoint(tmp_path / "c.scmd")
    np.testing.assert_array_equal(back["a"], t["a"])
    with pytest.raises(ProtocolError):
        decode_container(b"XXXX" + blob[4:])
    with pytest.raises(ProtocolError):
        decode_container(blob + b"\0")


def test_adapter_set_assign_rejects_structural_mismatch():
    a = LoraAdapterSet({"x": np.zeros(2, np.float32)})
    with pytest.raises(ShapeError):
        a.assign(LoraAdapterSet({"y": np.zeros(2, np.float32)}))
