"""Split-federated fine-tuning across K clients and one server.

One training step for client ``i``:

* client: frontend forward, per-sample gate on ``f2s``, upload fresh rows and a
  skip bitmap for the rest (labels ride along with a sample's first upload in
  the standard topologies);
* server: commit received rows, rebuild the batch from uploads plus its reuse
  cache, run its segment(s) and update its adapters;
* U-shape only: the trunk output goes down (``s2t``), the client runs the tail
  and loss, and the tail's input gradient comes back up (``t2s``);
* server -> client: cut-layer gradient (gated on ``s2f`` except in the plain
  standard topology), then the client backpropagates and steps.

Client phases can run in a thread pool; server work for a step always runs in
client-id order, so every schedule produces the same numbers and ledgers.
"""

from __future__ import annotations

import functools
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..compression.gating import (CacheKey, ComparisonCache, Decision, ProjectionMatrix, ReuseCache,
                                  commit_transmission, gate, project)
from ..compression.quant import dequantize, quantize_int8
from ..control.policy import EpochFeedback, make_policy
from ..errors import ProtocolError
from ..federation import broadcast, decode_adapters, encode_adapters, fedavg
from ..harness.config import RunConfig
from ..harness.corpus import generate_corpus
from ..kernel.optim import AdamW, LinearSchedule
from ..kernel.rng import Rng
from ..kernel.tensor import DTYPE
from ..model.pretrain import pretrain_base
from ..model.transformer import DropoutKey, LoraAdapterSet, ModelConfig, Segment, SplitModel, build_model, mean_nll
from .ledger import DOWN, UP, estimate_latency
from .transport import Network
from .wire import Message, MsgType, decode_bitmap, decode_rows, encode_bitmap, encode_rows

# (data message, skip message, direction) per interface
INTERFACE_MESSAGES = {
    "f2s": (MsgType.ACTIVATION_UPLOAD, MsgType.SKIP_NOTICE, UP),
    "s2t": (MsgType.TRUNK_ACTIVATION_DOWN, MsgType.SKIP_NOTICE, DOWN),
    "t2s": (MsgType.TAIL_GRADIENT_UP, MsgType.GRADIENT_SKIP, UP),
    "s2f": (MsgType.FRONT_GRADIENT_DOWN, MsgType.GRADIENT_SKIP, DOWN),
}


def projection_dim(d_in: int, ratio: int, minimum: int) -> int:
    return max(minimum, d_in // ratio)


@functools.lru_cache(maxsize=8)
def _pretrained(seed, vocab, seq_len, sharpness, mcfg: ModelConfig, n, steps, batch, lr):
    corpus = generate_corpus(seed, 1, 1, vocab_size=vocab, seq_len=seq_len, val_size=1, test_size=1,
                             sharpness=sharpness)
    model = build_model(mcfg, seed)
    return pretrain_base(model, corpus.pretrain_split(n), steps=steps, batch_size=batch, lr=lr, seed=seed).base


def pretrained_base(cfg: RunConfig) -> dict:
    """Frozen base weights for ``cfg`` (shared by all topologies; memoized per process)."""
    m = cfg.model_config()
    mcfg = ModelConfig(**{**m.to_dict(), "tail_layers": 0})
    return _pretrained(cfg.seed, cfg.vocab_size, cfg.seq_len, cfg.sharpness, mcfg, cfg.pretrain_samples,
                       cfg.pretrain_steps, cfg.pretrain_batch, cfg.pretrain_lr)


def merge_adapters(*sets: LoraAdapterSet) -> LoraAdapterSet:
    out = {}
    for s in sets:
        out.update(s.tensors)
    return LoraAdapterSet(out)


def assemble_server_batch(uploads: dict, reuse_cache: ReuseCache, keys) -> np.ndarray:
    """Stack rows in batch order, taking fresh uploads first and cached tensors otherwise."""
    rows = []
    for pos, key in enumerate(keys):
        if pos in uploads:
            rows.append(uploads[pos])
            continue
        cached = reuse_cache.get(key)
        if cached is None:
            raise ProtocolError(f"sample {key.sample_id} of client {key.client_id} on {key.interface}: "
                                "reuse requested but nothing cached")
        rows.append(cached)
    return np.stack(rows).astype(DTYPE, copy=False)


@dataclass
class GateOutcome:
    """Sender-side result of gating one batch on one interface."""

    sends: list = field(default_factory=list)
    reuses: list = field(default_factory=list)
    wire_rows: dict = field(default_factory=dict)   # pos -> fp32 row or QuantizedTensor
    pending: dict = field(default_factory=dict)     # pos -> compressed vector to commit
    sims: list = field(default_factory=list)


@dataclass
class ClientState:
    cid: int
    shard: np.ndarray
    adapters: LoraAdapterSet
    opt: AdamW
    labels_sent: set = field(default_factory=set)
    step: dict = field(default_factory=dict)        # scratch for the step in flight


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_ppl: float
    theta: dict
    sends: dict
    reuses: dict
    bytes_up: int
    bytes_down: int
    payload_bytes: dict        # interface -> data-message payload bytes
    notice_bytes: dict         # interface -> skip-message bytes (header + payload)
    latency_s: float
    client_losses: list
    similarities: dict         # interface -> per-client mean similarity (nan if none)
    coherent: bool
    coherence_max_dev: float
    wall_s: float = 0.0

    @property
    def sends_up(self) -> int:
        return sum(v for k, v in self.sends.items() if INTERFACE_MESSAGES[k][2] == UP)

    @property
    def reuses_up(self) -> int:
        return sum(v for k, v in self.reuses.items() if INTERFACE_MESSAGES[k][2] == UP)


class World:
    """All state of one run: corpus, frozen base, parties, caches, network, threshold policy."""

    def __init__(self, cfg: RunConfig):
        cfg = cfg.resolved().validate()
        self.cfg = cfg
        self.mcfg = cfg.model_config()
        self.corpus = generate_corpus(cfg.seed, cfg.samples, cfg.clients, vocab_size=cfg.vocab_size,
                                      seq_len=cfg.seq_len, val_size=cfg.val_size, test_size=cfg.test_size,
                                      sharpness=cfg.sharpness, domain_shift=cfg.domain_shift)
        self.base = pretrained_base(cfg)
        init = build_model(self.mcfg, cfg.seed).adapters
        probe = SplitModel(self.mcfg, self.base, init)
        self.client_names = probe.client_adapter_names()
        self.server_names = probe.server_adapter_names()
        self.K = cfg.clients
        self.B = cfg.batch_size
        self.steps_per_epoch = min(len(s) for s in self.corpus.shards) // self.B
        self.agg_interval = cfg.agg_interval or self.steps_per_epoch
        self.weights = self.corpus.client_weights()
        local_steps = cfg.epochs * self.steps_per_epoch

        def opt(total):
            return AdamW(LinearSchedule(cfg.lr, total, cfg.warmup_frac), weight_decay=cfg.weight_decay,
                         clip_norm=cfg.clip_norm)

        self.clients = [ClientState(i, self.corpus.shards[i], init.subset(self.client_names).copy(), opt(local_steps))
                        for i in range(self.K)]
        if cfg.server_adapters == "shared":
            shared = init.subset(self.server_names).copy()
            self.server_adapters = [shared] * self.K
            self.server_opts = [opt(self.K * local_steps)] * self.K
        else:
            self.server_adapters = [init.subset(self.server_names).copy() for _ in range(self.K)]
            self.server_opts = [opt(local_steps) for _ in range(self.K)]

        self.gated = cfg.gated_interfaces if cfg.gating else ()
        d_in = self.mcfg.cut_numel
        d_out = projection_dim(d_in, cfg.rp_ratio, cfg.rp_min_dim)
        self.proj = {f: ProjectionMatrix(d_in, d_out, cfg.seed, f) for f in self.gated}
        self.send_cache = {f: [ComparisonCache() for _ in range(self.K)] for f in self.gated}
        self.recv_cache = {f: [ReuseCache() for _ in range(self.K)] for f in self.gated}
        self.server_labels: dict = {}

        self.network = Network(self.K, cfg.transport)
        self.policy = make_policy(cfg.policy, cfg.gated_interfaces, theta=cfg.theta, bbc=cfg.bbc_config(),
                                  ddpg=cfg.ddpg_config(), num_clients=self.K, total_epochs=cfg.epochs,
                                  seed=cfg.seed)
        self.theta = dict(self.policy.theta)
        self.global_step = 0
        self.reports: list = []
        self._epoch_stats = None
        self._handshake()

    # -- setup -------------------------------------------------------------------------
    def _handshake(self) -> None:
        """SessionHello (config hash, projection seed, schedule seed) and the initial adapter broadcast."""
        digest = bytes.fromhex(self.cfg.sha256())
        hello = struct.pack("<32sQQ", digest, self.cfg.seed, self.cfg.seed)
        for i, link in enumerate(self.network.links):
            msg = link.transfer(Message(MsgType.SESSION_HELLO, i, 0, 0, hello), DOWN)
            if msg.payload[:32] != digest:
                raise ProtocolError(f"client {i}: configuration hash mismatch")
        broadcast(self.clients[0].adapters.copy(), [c.adapters for c in self.clients], self.network, 0, 0)

    # -- helpers -------------------------------------------------------------------------
    def batch_ids(self, cid: int, epoch: int, step: int) -> np.ndarray:
        shard = self.clients[cid].shard
        order = shard[Rng(self.cfg.seed, "batch-order", epoch, cid).permutation(len(shard))]
        return order[step * self.B:(step + 1) * self.B]

    def client_model(self, cid: int) -> SplitModel:
        return SplitModel(self.mcfg, self.base, self.clients[cid].adapters)

    def server_model(self, cid: int) -> SplitModel:
        return SplitModel(self.mcfg, self.base, self.server_adapters[cid])

    def global_adapters(self) -> LoraAdapterSet:
        """Post-aggregation view: FedAvg of client sets plus (aggregated) server adapters."""
        client = fedavg([c.adapters for c in self.clients], self.weights)
        if self.cfg.server_adapters == "shared":
            server = self.server_adapters[0]
        else:
            server = fedavg(self.server_adapters, self.weights)
        return merge_adapters(client, server)

    def _gate_rows(self, iface: str, cid: int, rows: np.ndarray, ids, positions) -> GateOutcome:
        out = GateOutcome()
        q = self.cfg.quantize_int8
        for pos in positions:
            row = rows[pos]
            if iface not in self.gated:
                out.sends.append(pos)
                out.wire_rows[pos] = quantize_int8(row) if q else row
                continue
            key = CacheKey(cid, int(ids[pos]), iface)
            comp = project(self.proj[iface], row)
            res = gate(self.send_cache[iface][cid], key, comp, self.theta[iface])
            if res.similarity is not None:
                out.sims.append(res.similarity)
            if res.decision is Decision.SEND:
                out.sends.append(pos)
                if q:
                    qt = quantize_int8(row)
                    out.wire_rows[pos] = qt
                    out.pending[pos] = project(self.proj[iface], dequantize(qt))
                else:
                    out.wire_rows[pos] = row
                    out.pending[pos] = comp
            else:
                out.reuses.append(pos)
        self._count(iface, out)
        return out

    def _count(self, iface: str, out: GateOutcome) -> None:
        if iface not in self.cfg.gated_interfaces:
            return
        st = self._epoch_stats
        st["sends"][iface] += len(out.sends)
        st["reuses"][iface] += len(out.reuses)

    def _emit(self, iface: str, cid: int, epoch: int, step: int, out: GateOutcome,
              data_type: MsgType | None = None) -> None:
        dtype_, skip_type, direction = INTERFACE_MESSAGES[iface]
        data_type = data_type or dtype_
        link = self.network.links[cid]
        if out.wire_rows:
            payload = encode_rows(out.wire_rows, self.cfg.quantize_int8)
            link.send(Message(data_type, cid, epoch, step, payload), direction, iface)
        if out.reuses:
            link.send(Message(skip_type, cid, epoch, step, encode_bitmap(self.B, out.reuses)), direction, iface)

    def _absorb(self, iface: str, cid: int, epoch: int, step: int, ids, positions, out: GateOutcome,
                data_type: MsgType | None = None) -> np.ndarray:
        """Receive one interface's messages for a batch, commit fresh rows, return the rebuilt batch.

        Rows outside ``positions`` come back as zeros.
        """
        dtype_, skip_type, direction = INTERFACE_MESSAGES[iface]
        data_type = data_type or dtype_
        link = self.network.links[cid]
        expected = set(positions)
        got, skipped = {}, set()
        while expected - set(got) - skipped:
            msg = link.recv(direction, iface)
            if (msg.epoch, msg.step) != (epoch, step):
                raise ProtocolError(f"client {cid}: got {msg.type.name} for epoch/step {msg.epoch}/{msg.step}")
            if msg.type == data_type:
                got.update(decode_rows(msg.payload))
            elif msg.type == skip_type:
                skipped.update(decode_bitmap(msg.payload))
            else:
                raise ProtocolError(f"client {cid}: unexpected {msg.type.name} on {iface}")
        if set(got) | skipped != expected or set(got) & skipped:
            raise ProtocolError(f"client {cid}: {iface} rows do not cover the batch exactly")
        keys = [CacheKey(cid, int(s), iface) for s in ids]
        if iface in self.gated:
            for pos in sorted(got):
                commit_transmission(self.send_cache[iface][cid], self.recv_cache[iface][cid], keys[pos],
                                    got[pos], out.pending[pos])
        zero = np.zeros((self.mcfg.seq_len, self.mcfg.d_model), dtype=DTYPE)
        cache = self.recv_cache[iface][cid] if iface in self.gated else ReuseCache()
        full = {p: got[p] for p in got}
        for p in range(len(ids)):
            if p not in expected:
                full[p] = zero
        return assemble_server_batch(full, cache, keys)

    def _server_step(self, cid: int, grads: dict) -> None:
        names = self.server_names
        self.server_opts[cid].step([self.server_adapters[cid][n] for n in names], [grads[n] for n in names])

    # -- phases -------------------------------------------------------------------------
    def _client_forward(self, cid: int, epoch: int, step: int) -> None:
        c = self.clients[cid]
        ids = self.batch_ids(cid, epoch, step)
        data = self.corpus.train[ids]
        tokens, targets = data[:, :-1], data[:, 1:]
        dkey = DropoutKey(self.cfg.seed, epoch, step, cid)
        seg = Segment(self.client_model(cid), "frontend")
        act = seg.forward(tokens, dkey)
        out = self._gate_rows("f2s", cid, act, ids, range(len(ids)))
        self._emit("f2s", cid, epoch, step, out)
        if not self.mcfg.ushape:
            new = {p: targets[p] for p in out.sends if int(ids[p]) not in c.labels_sent}
            if new:
                self.network.links[cid].send(
                    Message(MsgType.LABEL_BLOCK, cid, epoch, step, encode_rows(new)), UP)
                c.labels_sent.update(int(ids[p]) for p in new)
        frozen = set(out.reuses) if self.cfg.reuse_grad_mode == "freeze" else set()
        c.step = {"ids": ids, "targets": targets, "dkey": dkey, "front": seg, "f2s": out,
                  "active": [p for p in range(len(ids)) if p not in frozen]}

    def _server_standard(self, cid: int, epoch: int, step: int) -> float:
        c = self.clients[cid]
        st = c.step
        ids = st["ids"]
        act = self._absorb("f2s", cid, epoch, step, ids, range(len(ids)), st["f2s"])
        missing = [int(s) for s in ids if (cid, int(s)) not in self.server_labels]
        if missing:
            msg = self.network.links[cid].recv(UP)
            if msg.type != MsgType.LABEL_BLOCK:
                raise ProtocolError(f"client {cid}: expected LabelBlock, got {msg.type.name}")
            for pos, lab in decode_rows(msg.payload).items():
                self.server_labels[(cid, int(ids[pos]))] = lab
        labels = np.stack([self.server_labels[(cid, int(s))] for s in ids])
        seg = Segment(self.server_model(cid), "server")
        loss = seg.forward(act, st["dkey"], labels=labels)
        grads, cut = seg.backward()
        self._server_step(cid, grads)
        out = self._gate_rows("s2f", cid, cut, ids, st["active"])
        self._emit("s2f", cid, epoch, step, out, MsgType.GRADIENT_DOWN)
        st["s2f"] = out
        return loss

    def _server_ushape(self, cid: int, epoch: int, step: int) -> float:
        c = self.clients[cid]
        st = c.step
        ids, all_pos = st["ids"], range(len(st["ids"]))
        act = self._absorb("f2s", cid, epoch, step, ids, all_pos, st["f2s"])
        trunk = Segment(self.server_model(cid), "trunk")
        h = trunk.forward(act, st["dkey"])
        out_s2t = self._gate_rows("s2t", cid, h, ids, all_pos)
        self._emit("s2t", cid, epoch, step, out_s2t)
        # client-side tail (labels never leave the client)
        h_c = self._absorb("s2t", cid, epoch, step, ids, all_pos, out_s2t)
        tail = Segment(self.client_model(cid), "tail")
        loss = tail.forward(h_c, st["dkey"], labels=st["targets"])
        st["tail_grads"], g_in = tail.backward()
        out_t2s = self._gate_rows("t2s", cid, g_in, ids, all_pos)
        self._emit("t2s", cid, epoch, step, out_t2s)
        st["s2t"], st["t2s"] = out_s2t, out_t2s
        # server-side trunk backward
        g = self._absorb("t2s", cid, epoch, step, ids, all_pos, out_t2s)
        grads, cut = trunk.backward(g)
        self._server_step(cid, grads)
        out = self._gate_rows("s2f", cid, cut, ids, st["active"])
        self._emit("s2f", cid, epoch, step, out)
        st["s2f"] = out
        return loss

    def _client_backward(self, cid: int, epoch: int, step: int) -> None:
        c = self.clients[cid]
        st = c.step
        data_type = None if self.mcfg.ushape else MsgType.GRADIENT_DOWN
        up = self._absorb("s2f", cid, epoch, step, st["ids"], st["active"], st["s2f"], data_type)
        grads = dict(st.get("tail_grads", {}))
        if st["active"]:
            front, _ = st["front"].backward(up)
            grads.update(front)
        elif not grads:
            c.step = {}
            return                      # every sample frozen: no client update this step
        names = c.adapters.names()
        c.opt.step([c.adapters[n] for n in names],
                   [grads[n] if n in grads else np.zeros_like(c.adapters[n]) for n in names])
        c.step = {}

    def _aggregate(self, epoch: int, step: int) -> None:
        received = []
        for c in self.clients:
            link = self.network.links[c.cid]
            msg = link.transfer(Message(MsgType.ADAPTER_UPLOAD, c.cid, epoch, step, encode_adapters(c.adapters)), UP)
            received.append(decode_adapters(msg.payload))
        broadcast(fedavg(received, self.weights), [c.adapters for c in self.clients], self.network, epoch, step)
        if self.cfg.server_adapters == "per_client":
            g = fedavg(self.server_adapters, self.weights)
            for s in self.server_adapters:
                s.assign(g)

    def _for_clients(self, fn, pool) -> None:
        if pool is None:
            for i in range(self.K):
                fn(i)
        else:
            for f in [pool.submit(fn, i) for i in range(self.K)]:
                f.result()

    # -- epoch -------------------------------------------------------------------------
    def run_epoch(self, epoch: int) -> EpochReport:
        t0 = time.perf_counter()
        ifaces = self.cfg.gated_interfaces
        self._epoch_stats = {"sends": {f: 0 for f in ifaces}, "reuses": {f: 0 for f in ifaces}}
        losses = [[] for _ in range(self.K)]
        sims = {f: [[] for _ in range(self.K)] for f in ifaces}
        server = self._server_ushape if self.mcfg.ushape else self._server_standard
        pool = ThreadPoolExecutor(max_workers=self.K) if self.cfg.schedule == "concurrent" else None
        try:
            for step in range(self.steps_per_epoch):
                self._for_clients(lambda i: self._client_forward(i, epoch, step), pool)
                for i in range(self.K):
                    losses[i].append(server(i, epoch, step))
                for i in range(self.K):
                    st = self.clients[i].step
                    for f in ifaces:
                        if f in st:
                            sims[f][i].extend(st[f].sims)
                self._for_clients(lambda i: self._client_backward(i, epoch, step), pool)
                self.global_step += 1
                if self.global_step % self.agg_interval == 0:
                    self._aggregate(epoch, step)
        finally:
            if pool is not None:
                pool.shutdown()
        return self._finish_epoch(epoch, losses, sims, time.perf_counter() - t0)

    def _finish_epoch(self, epoch, losses, sims, wall) -> EpochReport:
        cfg = self.cfg
        val = self.corpus.val
        merged = SplitModel(self.mcfg, self.base, self.global_adapters())
        val_ppl = math.exp(mean_nll(merged, val[:, :-1], val[:, 1:]))
        led = self.network.client_ledger
        up, down = led.bytes(UP, epoch=epoch), led.bytes(DOWN, epoch=epoch)
        ifaces = cfg.gated_interfaces
        payload, notices = {}, {}
        for f in ifaces:
            data_types = {INTERFACE_MESSAGES[f][0], MsgType.GRADIENT_DOWN}
            payload[f] = led.bytes(epoch=epoch, interface=f, types=data_types, payload_only=True)
            notices[f] = led.bytes(epoch=epoch, interface=f, types={INTERFACE_MESSAGES[f][1]})
        sim_means = {f: [float(np.mean(s)) if s else float("nan") for s in sims[f]] for f in ifaces}
        ok, dev = check_cache_coherence(self)
        client_losses = [float(np.mean(np.asarray(l, dtype=np.float64))) for l in losses]
        report = EpochReport(
            epoch=epoch,
            train_loss=float(np.mean(np.asarray([x for l in losses for x in l], dtype=np.float64))),
            val_ppl=val_ppl, theta=dict(self.theta),
            sends=dict(self._epoch_stats["sends"]), reuses=dict(self._epoch_stats["reuses"]),
            bytes_up=up, bytes_down=down, payload_bytes=payload, notice_bytes=notices,
            latency_s=estimate_latency((up, down), cfg.up_bps, cfg.down_bps)["total_s"],
            client_losses=client_losses, similarities=sim_means, coherent=ok, coherence_max_dev=dev, wall_s=wall)
        comm = sum(led.bytes(epoch=epoch, interface=f) for f in ifaces)
        self.theta = self.policy.observe(EpochFeedback(epoch, val_ppl, comm, sim_means))
        self.reports.append(report)
        return report

    def run(self) -> list:
        try:
            for epoch in range(len(self.reports) + 1, self.cfg.epochs + 1):
                self.run_epoch(epoch)
        finally:
            self.network.close()
        return self.reports


def check_cache_coherence(world: World):
    """Every sender comparison entry must equal the projection of the receiver's reuse entry.

    Returns ``(ok, max_abs_deviation)``.
    """
    ok, dev = True, 0.0
    for f in world.gated:
        for sc, rc in zip(world.send_cache[f], world.recv_cache[f]):
            if set(sc.entries) != set(rc.entries):
                return False, float("inf")
            for key, comp in sc.entries.items():
                expect = project(world.proj[f], rc.entries[key])
                if not np.array_equal(comp, expect):
                    ok = False
                    dev = max(dev, float(np.max(np.abs(comp - expect))))
    return ok, dev


def run_epoch(world: World, epoch: int) -> EpochReport:
    return world.run_epoch(epoch)

