"""Seeded first-order Markov-chain corpora with an IID client partition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..kernel.rng import Rng


def _transition(rng: Rng, vocab: int, sharpness: float) -> np.ndarray:
    z = rng.gaussian((vocab, vocab)).astype(np.float64) * sharpness
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def _sample(rng: Rng, trans: np.ndarray, n: int, length: int) -> np.ndarray:
    vocab = trans.shape[0]
    cdf = np.cumsum(trans, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty((n, length), dtype=np.int64)
    out[:, 0] = rng.child("init").integers(vocab, n)
    for t in range(1, length):
        u = rng.child("step", t).uniform(n)
        out[:, t] = np.minimum((cdf[out[:, t - 1]] < u[:, None]).sum(axis=1), vocab - 1)
    return out


def entropy_rate(trans: np.ndarray) -> float:
    """Entropy rate in nats of the stationary chain; ``exp`` of it is the best attainable PPL."""
    w, v = np.linalg.eig(trans.T)
    pi = np.real(v[:, np.argmin(np.abs(w - 1.0))])
    pi = pi / pi.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(trans > 0, trans * np.log(trans), 0.0).sum(axis=1)
    return float(pi @ h)


@dataclass
class SyntheticCorpus:
    seed: int
    vocab_size: int
    seq_len: int
    transition: np.ndarray
    pretrain_transition: np.ndarray
    train: np.ndarray          # [N, seq_len + 1]
    val: np.ndarray
    test: np.ndarray
    shards: list               # per-client arrays of row indices into ``train``

    def client_weights(self) -> list:
        total = sum(len(s) for s in self.shards)
        return [len(s) / total for s in self.shards]

    def pretrain_split(self, n: int) -> np.ndarray:
        """Sequences from the pre-training chain; disjoint from the task corpus by construction."""
        return _sample(Rng(self.seed, "pretrain-corpus"), self.pretrain_transition, n, self.seq_len + 1)


def generate_corpus(seed: int, size: int, K: int, *, vocab_size: int = 32, seq_len: int = 16,
                    val_size: int = 200, test_size: int = 200, sharpness: float = 2.5,
                    domain_shift: float = 0.5) -> SyntheticCorpus:
    """Task chain = ``(1 - shift) * pretrain_chain + shift * fresh_chain``; rows are softmax of scaled Gaussians."""
    if K < 1 or size < K:
        raise ConfigError(f"need size >= K >= 1, got size={size}, K={K}")
    root = Rng(seed, "corpus")
    pre = _transition(root.child("pretrain-chain"), vocab_size, sharpness)
    fresh = _transition(root.child("task-chain"), vocab_size, sharpness)
    task = (1.0 - domain_shift) * pre + domain_shift * fresh
    length = seq_len + 1
    train = _sample(root.child("train"), task, size, length)
    val = _sample(root.child("val"), task, val_size, length)
    test = _sample(root.child("test"), task, test_size, length)
    perm = root.child("partition").permutation(size)
    shards = [np.sort(s) for s in np.array_split(perm, K)]
    return SyntheticCorpus(seed, vocab_size, seq_len, task, pre, train, val, test, shards)
