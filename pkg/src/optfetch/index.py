"""Learned option retrieval: key matrix, query network, top-p selection.

A query network maps the encoded initial state to a query vector; dot
products against one learned key per library option give a softmax
distribution, and the smallest probability mass strictly exceeding the
threshold p determines the fetched option set.  Keys and query network
train jointly against trajectory-derived soft targets.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .nn import (DenseNet, backward_from_cache, cross_entropy_loss_and_grad,
                 forward, forward_cached, glorot_net, init_optimizer,
                 net_parameters, read_net, softmax, step_arrays, write_net)

CHECKPOINT_MAGIC = b"OFIX"
CHECKPOINT_VERSION = 1


@dataclass
class OptionIndex:
    """One learned key per library option, row i belonging to option i."""

    keys: np.ndarray  # (k, d) float64

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        if self.keys.ndim != 2:
            raise ShapeError(f"keys must be 2-D, got shape {self.keys.shape}")

    @property
    def k(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.keys.shape[1]

    def copy(self) -> "OptionIndex":
        return OptionIndex(self.keys.copy())


@dataclass(frozen=True)
class RetrievalResult:
    fetched: tuple[int, ...]       # ascending option ids
    probabilities: np.ndarray      # full softmax over all k options


def make_index(k: int, d: int,
               rng: np.random.Generator | None = None,
               scheme: str | None = None) -> OptionIndex:
    """Fresh key matrix under one of three initialization schemes.

    "glorot" draws keys like a k x d network layer.  Healthy key
    magnitudes matter from the first update: the query-network gradient
    is projected through the keys, so near-zero keys would leave the
    query network untrained while the keys alone race toward whatever
    options happened to succeed early.

    "identity" embeds option i as basis vector i (needs d >= k).
    Orthonormal keys give zero cross-option score interference: an
    update that moves the query toward one option's key leaves every
    other score untouched, which measurably improves how retrieval
    generalizes to unseen variants when keys are kept slow-moving.

    "zeros" (or omitting rng) gives exactly-zero keys for tests that
    need an exactly uniform softmax.  Without an explicit scheme, rng
    selects between "glorot" (rng given) and "zeros" (rng None)."""
    if k < 1 or d < 1:
        raise ConfigError(f"index needs k >= 1 and d >= 1, got k={k} d={d}")
    if scheme is None:
        scheme = "zeros" if rng is None else "glorot"
    if scheme == "zeros":
        return OptionIndex(np.zeros((k, d)))
    if scheme == "identity":
        if d < k:
            raise ConfigError(
                f"identity keys need d >= k, got k={k} d={d}")
        keys = np.zeros((k, d))
        np.fill_diagonal(keys, 1.0)
        return OptionIndex(keys)
    if scheme == "glorot":
        if rng is None:
            raise ConfigError("glorot keys need an rng")
        bound = np.sqrt(6.0 / (k + d))
        return OptionIndex(rng.uniform(-bound, bound, size=(k, d)))
    raise ConfigError(f"unknown key scheme {scheme!r}")


QGN_HEAD_SCALE = 0.05


def make_qgn(state_dim: int, hidden: int, key_dim: int,
             rng: np.random.Generator,
             head_scale: float = QGN_HEAD_SCALE) -> DenseNet:
    """Two-layer query network with a small-scale output head.

    The shrunken head keeps every fresh query tiny, so initial key scores
    are within a fraction of a percent of each other and the first top-p
    fetch covers at least ceil(0.9 k) options (the bootstrap the trajectory
    oracle needs), with the dropped ids varying by query rather than being
    the same fixed tail.  Hidden-layer and key scales stay at full Glorot
    size, so gradients condition retrieval on the state from the start
    instead of first having to grow the magnitudes."""
    net = glorot_net([state_dim, hidden, key_dim], ["relu", "identity"], rng)
    net.layers[-1].weight *= head_scale
    return net


def top_p_set(probs: np.ndarray, p: float) -> tuple[int, ...]:
    """Smallest id set whose probability mass strictly exceeds p.

    Greedy descending-probability accumulation; equal probabilities are
    taken lower-id-first so the result is deterministic and monotone in p.
    Returned ids are sorted ascending.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size == 0:
        raise ShapeError(f"need a 1-D probability vector, got {probs.shape}")
    if not 0.0 < p < 1.0:
        raise ConfigError(f"p must lie in (0, 1), got {p}")
    order = np.argsort(-probs, kind="stable")
    total = 0.0
    for i, idx in enumerate(order):
        total += probs[idx]
        if total > p:
            return tuple(sorted(int(j) for j in order[:i + 1]))
    return tuple(range(probs.size))  # mass never exceeded p: take everything


def select_options(s0: np.ndarray, index: OptionIndex, qgn: DenseNet,
                   p: float = 0.9) -> RetrievalResult:
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.ndim != 1 or s0.shape[0] != qgn.input_dim:
        raise ShapeError(
            f"state of shape {s0.shape} does not fit query network input "
            f"{qgn.input_dim}")
    if qgn.output_dim != index.d:
        raise ShapeError(
            f"query dim {qgn.output_dim} does not match key dim {index.d}")
    q = forward(qgn, s0)
    probs = softmax(index.keys @ q)
    return RetrievalResult(top_p_set(probs, p), probs)


def target_from_trajectories(trajectories, k: int) -> tuple[np.ndarray, bool]:
    """Soft target: each option occurrence weighted by its trajectory's
    per-step reward share.  Returns (y, ok); ok is False (zero vector)
    for an empty set or non-positive total reward."""
    y = np.zeros(k)
    trajs = list(trajectories)
    if not trajs:
        return y, False
    total = sum(t.ret for t in trajs)
    if total <= 0.0:
        return y, False
    for t in trajs:
        n = len(t.options)
        if n == 0:
            continue
        share = (t.ret / n) / total
        for o in t.options:
            if not 0 <= o < k:
                raise ShapeError(f"option id {o} outside library of size {k}")
            y[o] += share
    return y, True


def retrieval_loss_and_gradients(index: OptionIndex, qgn: DenseNet,
                                 states: np.ndarray, targets: np.ndarray):
    """Mean batch cross entropy and its gradients w.r.t. the query network
    parameters and the key matrix.  Returns (loss, net_grads, key_grad)."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if states.shape[0] != targets.shape[0] or states.shape[0] == 0:
        raise ShapeError(
            f"batch mismatch: {states.shape[0]} states vs "
            f"{targets.shape[0]} targets")
    if targets.shape[1] != index.k:
        raise ShapeError(
            f"targets over {targets.shape[1]} options, index has {index.k}")
    n = states.shape[0]
    queries, cache = forward_cached(qgn, states)
    probs = softmax(queries @ index.keys.T)
    losses, logit_grad = cross_entropy_loss_and_grad(targets, probs)
    mean_loss = float(np.mean(losses))
    g = logit_grad / n                    # (n, k), d mean-loss / d logits
    query_grad = g @ index.keys           # (n, d)
    key_grad = g.T @ queries               # (k, d)
    net_grads = backward_from_cache(qgn, cache, query_grad)
    return mean_loss, net_grads, key_grad


class RetrievalModel:
    """Index + query network + one shared optimizer over both."""

    def __init__(self, index: OptionIndex, qgn: DenseNet,
                 optimizer: str = "adam", learning_rate: float = 1e-3):
        if qgn.output_dim != index.d:
            raise ShapeError(
                f"query dim {qgn.output_dim} does not match key dim {index.d}")
        self.index = index
        self.qgn = qgn
        self._params = net_parameters(qgn) + [index.keys]
        self.opt = init_optimizer(self._params, optimizer, learning_rate)

    @property
    def parameters(self) -> list[np.ndarray]:
        """Live views: query-network weights and biases, then the keys."""
        return self._params

    def select(self, s0: np.ndarray, p: float = 0.9) -> RetrievalResult:
        return select_options(s0, self.index, self.qgn, p)

    def update(self, states: np.ndarray, targets: np.ndarray) -> float:
        """One joint optimizer step on a batch; returns pre-update mean loss."""
        mean_loss, net_grads, key_grad = retrieval_loss_and_gradients(
            self.index, self.qgn, states, targets)
        if not np.isfinite(mean_loss):
            warnings.warn("non-finite retrieval loss; update skipped")
            return mean_loss
        step_arrays(self._params, net_grads.as_list() + [key_grad], self.opt)
        return mean_loss


def _domain_hash_bytes(domain_hash: str) -> bytes:
    """Normalize to the fixed 32-byte header field."""
    if len(domain_hash) == 64:
        try:
            return bytes.fromhex(domain_hash)
        except ValueError:
            pass
    return hashlib.sha256(domain_hash.encode()).digest()


def save_checkpoint(index: OptionIndex, qgn: DenseNet, path,
                    domain_hash: str = "") -> None:
    """Header (version, domain hash, k, d) + query net + key matrix."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(_domain_hash_bytes(domain_hash or "0" * 64))
        f.write(struct.pack("<II", index.k, index.d))
        write_net(f, qgn)
        f.write(np.ascontiguousarray(index.keys, dtype="<f8").tobytes())


def load_checkpoint(path, domain_hash: str | None = None,
                    state_dim: int | None = None,
                    key_dim: int | None = None):
    """Returns (index, qgn); validates any provided expectations."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"not a retrieval checkpoint: {path}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} "
                f"(expected {CHECKPOINT_VERSION})")
        stored_hash = f.read(32)
        k, d = struct.unpack("<II", f.read(8))
        qgn = read_net(f)
        payload = f.read(8 * k * d)
        if len(payload) != 8 * k * d:
            raise CheckpointError(
                f"truncated key matrix: wanted {8 * k * d} bytes, "
                f"got {len(payload)}")
        keys = np.frombuffer(payload, dtype="<f8").reshape(k, d).copy()
    if domain_hash is not None and _domain_hash_bytes(domain_hash) != stored_hash:
        raise CheckpointError(
            "checkpoint belongs to a different domain "
            f"(hash {stored_hash.hex()[:12]}… does not match)")
    if key_dim is not None and d != key_dim:
        raise CheckpointError(
            f"checkpoint key dim {d} does not match expected {key_dim}")
    if state_dim is not None and qgn.input_dim != state_dim:
        raise CheckpointError(
            f"checkpoint expects states of dim {qgn.input_dim}, "
            f"domain encodes {state_dim}")
    if qgn.output_dim != d:
        raise CheckpointError(
            f"inconsistent checkpoint: query dim {qgn.output_dim} vs key "
            f"dim {d}")
    return OptionIndex(keys), qgn
