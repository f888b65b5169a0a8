"""Toy causal transformer with LoRA on the query/value projections, cut into segments.

Layout (pre-LN blocks)::

    frontend = token+position embedding, blocks[0:f]
    trunk    = blocks[f:n-t]                      (U-shape, server)
    tail     = blocks[n-t:n], final LN, head      (U-shape, client, computes loss)
    server   = blocks[f:n], final LN, head        (standard, computes loss)

Base weights are frozen; only the ``A``/``B`` adapter matrices are trained.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Iterable

import numpy as np

from ..errors import ConfigError, ModeError, ShapeError, StateError
from ..kernel import autodiff as ad
from ..kernel.rng import Rng
from ..kernel.tensor import DTYPE

LORA_TARGETS = ("q", "v")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 4
    seq_len: int = 16
    lora_rank: int = 8
    lora_alpha: float = 4.0
    lora_dropout: float = 0.1
    frontend_layers: int = 1
    tail_layers: int = 0

    def validate(self) -> "ModelConfig":
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.seq_len) < 1:
            raise ConfigError("sizes must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora_rank < 1:
            raise ConfigError("lora_rank must be >= 1")
        if self.frontend_layers < 1 or self.tail_layers < 0:
            raise ConfigError("need frontend_layers >= 1 and tail_layers >= 0")
        if self.frontend_layers + self.tail_layers >= self.n_layers:
            raise ConfigError(
                f"frontend_layers + tail_layers = {self.frontend_layers + self.tail_layers} "
                f"must be < n_layers = {self.n_layers}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError("lora_dropout must be in [0, 1)")
        return self

    @property
    def ushape(self) -> bool:
        return self.tail_layers > 0

    @property
    def lora_scaling(self) -> float:
        return self.lora_alpha / self.lora_rank

    @property
    def cut_numel(self) -> int:
        """Elements in one sample's cut-layer tensor."""
        return self.seq_len * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# parameter naming -------------------------------------------------------------

def base_param_shapes(cfg: ModelConfig) -> dict:
    d, v = cfg.d_model, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.seq_len, d)}
    for l in range(cfg.n_layers):
        p = f"h{l}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, 4 * d), p + "mlp.b1": (4 * d,),
            p + "mlp.w2": (4 * d, d), p + "mlp.b2": (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head.w": (d, v), "head.b": (v,)})
    return shapes


def adapter_names(layers: Iterable[int]) -> list:
    out = []
    for l in layers:
        for t in LORA_TARGETS:
            out += [f"h{l}.{t}.A", f"h{l}.{t}.B"]
    return out


class LoraAdapterSet:
    """Ordered mapping ``name -> array`` of adapter matrices (``A: [d, r]``, ``B: [r, d]``)."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def names(self) -> list:
        return list(self.tensors)

    def arrays(self) -> list:
        return list(self.tensors.values())

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def copy(self) -> "LoraAdapterSet":
        return LoraAdapterSet({k: v.copy() for k, v in self.tensors.items()})

    def subset(self, names: Iterable[str]) -> "LoraAdapterSet":
        return LoraAdapterSet({n: self.tensors[n] for n in names})

    def assign(self, other: "LoraAdapterSet") -> None:
        """Copy values from ``other`` into this set's arrays in place."""
        if other.names() != self.names():
            raise ShapeError("adapter sets differ structurally")
        for k, v in other.tensors.items():
            np.copyto(self.tensors[k], v)

    def equal(self, other: "LoraAdapterSet") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors)

    def nbytes(self) -> int:
        return sum(v.nbytes for v in self.tensors.values())


@dataclass
class SplitModel:
    """Frozen base weights plus one party's adapters."""

    config: ModelConfig
    base: dict
    adapters: LoraAdapterSet

    def segment_layers(self, kind: str) -> range:
        c = self.config
        f, t, n = c.frontend_layers, c.tail_layers, c.n_layers
        if kind == "frontend":
            return range(0, f)
        if kind == "trunk":
            return range(f, n - t)
        if kind == "tail":
            return range(n - t, n)
        if kind == "server":
            return range(f, n)
        raise ValueError(f"unknown segment {kind!r}")

    def client_adapter_names(self) -> list:
        names = adapter_names(self.segment_layers("frontend"))
        if self.config.ushape:
            names += adapter_names(self.segment_layers("tail"))
        return names

    def server_adapter_names(self) -> list:
        kind = "trunk" if self.config.ushape else "server"
        return adapter_names(self.segment_layers(kind))

    def with_adapters(self, adapters: LoraAdapterSet) -> "SplitModel":
        return SplitModel(self.config, self.base, adapters)


def build_model(config: ModelConfig, seed: int) -> SplitModel:
    """Deterministic init: GPT-2 style N(0, 0.02) base, adapters ``A ~ N(0, 1/r)``, ``B = 0``."""
    config.validate()
    rng = Rng(seed, "model-init")
    base = {}
    for name, shape in base_param_shapes(config).items():
        if name.endswith((".g",)):
            base[name] = np.ones(shape, dtype=DTYPE)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) and len(shape) == 1:
            base[name] = np.zeros(shape, dtype=DTYPE)
        else:
            base[name] = rng.child(name).gaussian(shape) * DTYPE(0.02)
    r = config.lora_rank
    adapters = {}
    for name in adapter_names(range(config.n_layers)):
        if name.endswith(".A"):
            adapters[name] = rng.child(name).gaussian((config.d_model, r)) * DTYPE(1.0 / np.sqrt(r))
        else:
            adapters[name] = np.zeros((r, config.d_model), dtype=DTYPE)
    return SplitModel(config, base, LoraAdapterSet(adapters))


# graph construction -------------------------------------------------------------

@dataclass(frozen=True)
class DropoutKey:
    """Identifies the LoRA dropout masks of one training step; ``None`` means eval mode."""

    seed: int
    epoch: int
    step: int
    client: int

    def mask(self, layer: int, target: str, shape, p: float) -> np.ndarray:
        u = Rng(self.seed, "lora-dropout", self.epoch, self.step, self.client, layer, target).uniform(shape)
        return (u >= p).astype(DTYPE) * DTYPE(1.0 / (1.0 - p))


def _causal_mask(s: int) -> np.ndarray:
    m = np.zeros((s, s), dtype=DTYPE)
    m[np.triu_indices(s, 1)] = DTYPE(-1e9)
    return m


def _lora(h, A, B, cfg: ModelConfig, mask):
    if mask is not None:
        h = ad.mul_const(h, mask)
    return ad.scale(ad.linear(ad.linear(h, A), B), cfg.lora_scaling)


def _block(x, l: int, P: dict, AD: dict, cfg: ModelConfig, dkey: DropoutKey | None):
    pre = f"h{l}."
    b, s, d = x.shape
    nh = cfg.n_heads
    dh = d // nh
    h = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])

    def proj(t):
        out = ad.add_bias(ad.linear(h, P[pre + f"attn.w{t}"]), P[pre + f"attn.b{t}"])
        a_name = f"h{l}.{t}.A"
        if a_name in AD:
            mask = None
            if dkey is not None and cfg.lora_dropout > 0:
                mask = dkey.mask(l, t, h.shape, cfg.lora_dropout)
            out = ad.add(out, _lora(h, AD[a_name], AD[f"h{l}.{t}.B"], cfg, mask))
        return out

    q, k, v = proj("q"), proj("k"), proj("v")
    q4 = ad.transpose(ad.reshape(q, (b, s, nh, dh)), (0, 2, 1, 3))
    kT = ad.transpose(ad.reshape(k, (b, s, nh, dh)), (0, 2, 3, 1))
    v4 = ad.transpose(ad.reshape(v, (b, s, nh, dh)), (0, 2, 1, 3))
    att = ad.scale(ad.bmm(q4, kT), 1.0 / np.sqrt(dh))
    att = ad.softmax(ad.add_const(att, _causal_mask(s)))
    o = ad.reshape(ad.transpose(ad.bmm(att, v4), (0, 2, 1, 3)), (b, s, d))
    x = ad.add(x, ad.add_bias(ad.linear(o, P[pre + "attn.wo"]), P[pre + "attn.bo"]))
    h2 = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
    m = ad.gelu(ad.add_bias(ad.linear(h2, P[pre + "mlp.w1"]), P[pre + "mlp.b1"]))
    return ad.add(x, ad.add_bias(ad.linear(m, P[pre + "mlp.w2"]), P[pre + "mlp.b2"]))


def _embed(tokens: np.ndarray, P: dict, cfg: ModelConfig):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
        raise ShapeError(f"token batch must be [b, {cfg.seq_len}], got {tokens.shape}")
    pos = np.broadcast_to(np.arange(cfg.seq_len), tokens.shape)
    return ad.add(ad.embedding(P["tok_emb"], tokens), ad.embedding(P["pos_emb"], pos))


def _head_loss(x, targets: np.ndarray, P: dict, cfg: ModelConfig):
    b, s, d = x.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (b, s):
        raise ShapeError(f"labels must be [{b}, {s}], got {targets.shape}")
    h = ad.layer_norm(x, P["lnf.g"], P["lnf.b"])
    logits = ad.add_bias(ad.linear(ad.reshape(h, (b * s, d)), P["head.w"]), P["head.b"])
    return ad.cross_entropy(logits, targets.reshape(-1)), logits


def wrap_params(arrays: dict, trainable: bool = False) -> dict:
    return {k: ad.leaf(v, requires_grad=trainable, name=k) for k, v in arrays.items()}


def run_layers(x, layers: Iterable[int], P: dict, AD: dict, cfg: ModelConfig, dkey):
    for l in layers:
        x = _block(x, l, P, AD, cfg, dkey)
    return x


# segments --------------------------------------------------------------------------

class Segment:
    """One party's slice of the model. ``forward`` records a graph that ``backward`` consumes once."""

    def __init__(self, model: SplitModel, kind: str):
        self.model = model
        self.kind = kind
        self.layers = model.segment_layers(kind)
        self.has_loss = kind in ("server", "tail")
        if kind == "tail" and not model.config.ushape:
            raise ModeError("tail segment exists only in U-shape configuration")
        if kind == "trunk" and not model.config.ushape:
            raise ModeError("trunk segment exists only in U-shape configuration; use 'server'")
        if kind == "server" and model.config.ushape:
            raise ModeError("U-shape server runs the 'trunk' segment; loss stays on the client")
        self.adapter_names = adapter_names(self.layers)
        self._record = None

    def _adapter_vars(self):
        return {n: ad.leaf(self.model.adapters[n], requires_grad=True, name=n) for n in self.adapter_names}

    def forward(self, x, dkey: DropoutKey | None = None, labels=None):
        """Run the segment. Frontend takes token ids; others take a ``[b, seq, d]`` activation.

        Loss segments require ``labels`` and return the scalar loss; others return the output array.
        """
        cfg = self.model.config
        P = wrap_params(self.model.base)
        AD = self._adapter_vars()
        if self.kind == "frontend":
            inp = None
            h = _embed(x, P, cfg)
        else:
            x = np.asarray(x, dtype=DTYPE)
            if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.d_model):
                raise ShapeError(f"{self.kind} input must be [b, {cfg.seq_len}, {cfg.d_model}], got {x.shape}")
            inp = ad.leaf(x, requires_grad=True, name=f"{self.kind}.input")
            h = inp
        out = run_layers(h, self.layers, P, AD, cfg, dkey)
        if self.has_loss:
            if labels is None:
                raise ShapeError(f"{self.kind} segment needs labels")
            out, _ = _head_loss(out, labels, P, cfg)
        self._record = (inp, out, AD)
        return float(out.data) if self.has_loss else out.data

    def backward(self, upstream: np.ndarray | None = None):
        """Returns ``(adapter_grads, input_grad)``; ``input_grad`` is ``None`` for the frontend."""
        if self._record is None:
            raise StateError(f"{self.kind}: backward without a recorded forward (or already consumed)")
        inp, out, AD = self._record
        self._record = None
        if self.has_loss and upstream is not None:
            raise ShapeError("loss segments take no upstream gradient")
        if not self.has_loss and upstream is None:
            raise ShapeError("upstream gradient required")
        wrt = list(AD.values()) + ([inp] if inp is not None else [])
        grads = ad.backward(out, wrt, upstream=upstream)
        adapter_grads = dict(zip(AD.keys(), grads[:len(AD)]))
        return adapter_grads, (grads[-1] if inp is not None else None)


def forward_frontend(model: SplitModel, tokens, dkey=None) -> np.ndarray:
    return Segment(model, "frontend").forward(tokens, dkey)


def forward_trunk(model: SplitModel, activation, dkey=None) -> np.ndarray:
    return Segment(model, "trunk").forward(activation, dkey)


def forward_server_with_loss(model: SplitModel, activation, labels, dkey=None):
    """Standard topology: ``(loss, cut_gradient, server_adapter_grads)``."""
    seg = Segment(model, "server")
    loss = seg.forward(activation, dkey, labels=labels)
    grads, cut = seg.backward()
    return loss, cut, grads


def forward_tail_and_loss(model: SplitModel, trunk_activation, labels, dkey=None):
    """U-shape: ``(loss, tail_input_gradient, tail_adapter_grads)``."""
    if not model.config.ushape:
        raise ModeError("forward_tail_and_loss requires the U-shape configuration")
    seg = Segment(model, "tail")
    loss = seg.forward(trunk_activation, dkey, labels=labels)
    grads, gin = seg.backward()
    return loss, gin, grads


def backward_segment(segment: Segment, upstream):
    return segment.backward(upstream)


# whole-model helpers ---------------------------------------------------------------

def full_forward_loss(model: SplitModel, tokens, targets, dkey=None, train_base: bool = False,
                      adapter_grad: bool = True):
    """Unsplit forward. Returns ``(loss_var, base_vars, adapter_vars)`` with the graph recorded."""
    cfg = model.config
    P = wrap_params(model.base, trainable=train_base)
    AD = wrap_params(model.adapters.tensors, trainable=adapter_grad and not train_base)
    h = _embed(tokens, P, cfg)
    h = run_layers(h, range(cfg.n_layers), P, AD, cfg, dkey)
    loss, _ = _head_loss(h, targets, P, cfg)
    return loss, P, AD


def logits(model: SplitModel, tokens, adapters: bool = True) -> np.ndarray:
    cfg = model.config
    P = wrap_params(model.base)
    AD = wrap_params(model.adapters.tensors) if adapters else {}
    h = run_layers(_embed(tokens, P, cfg), range(cfg.n_layers), P, AD, cfg, None)
    b, s, d = h.shape
    hn = ad.layer_norm(h, P["lnf.g"], P["lnf.b"])
    return ad.add_bias(ad.linear(ad.reshape(hn, (b * s, d)), P["head.w"]), P["head.b"]).data.reshape(b, s, -1)


def mean_nll(model: SplitModel, tokens, targets, batch_size: int = 64) -> float:
    """Mean per-token NLL in eval mode (no dropout), accumulated in float64 across batches."""
    tokens = np.asarray(tokens)
    targets = np.asarray(targets)
    total, count = 0.0, 0
    for i in range(0, tokens.shape[0], batch_size):
        loss, _, _ = full_forward_loss(model, tokens[i:i + batch_size], targets[i:i + batch_size],
                                       adapter_grad=False)
        n = targets[i:i + batch_size].size
        total += float(loss.data) * n
        count += n
    return total / max(count, 1)
