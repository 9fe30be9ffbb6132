"""Dense feed-forward networks with hand-written backprop.

Everything is plain numpy float64. Layers hold explicit weight/bias
arrays, gradients are computed analytically, and the two optimizers
(SGD, Adam) mutate parameters in place. No autograd framework.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError

ACTIVATIONS = ("identity", "relu")
LOG_CLAMP = 1e-12


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[Layer]

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.weight.copy(), l.bias.copy(), l.activation)
                         for l in self.layers])


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def as_list(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def glorot_net(dims: list[int], activations: list[str],
               rng: np.random.Generator) -> DenseNet:
    """Build a net with Glorot-uniform weights and zero biases.

    dims is [input, hidden..., output]; activations has one entry per
    layer. Glorot keeps early softmax outputs near uniform, which the
    retrieval bootstrap depends on.
    """
    if len(dims) < 2:
        raise ConfigError("need at least an input and an output dimension")
    if len(activations) != len(dims) - 1:
        raise ConfigError(
            f"expected {len(dims) - 1} activations, got {len(activations)}")
    layers = []
    for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        if fan_in < 1 or fan_out < 1:
            raise ConfigError("layer dimensions must be positive")
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return DenseNet(layers)


def net_parameters(net: DenseNet) -> list[np.ndarray]:
    """Flat parameter list (w0, b0, w1, b1, ...); arrays are live views."""
    params = []
    for layer in net.layers:
        params.extend((layer.weight, layer.bias))
    return params


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    return z


def _check_input(net: DenseNet, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.input_dim:
        raise ShapeError(
            f"input shape {x.shape} incompatible with net input dim "
            f"{net.input_dim}")
    return x


def forward(net: DenseNet, x: np.ndarray) -> np.ndarray:
    """Run the net on a single vector (d,) or a batch (n, d)."""
    x = _check_input(net, x)
    a = x if x.ndim == 2 else x[None, :]
    for layer in net.layers:
        a = _apply_activation(a @ layer.weight.T + layer.bias, layer.activation)
    return a if x.ndim == 2 else a[0]


def forward_cached(net: DenseNet, x: np.ndarray):
    """Forward pass keeping per-layer inputs and pre-activations.

    Returns (output, cache); feed the cache to backward_from_cache so
    the hot paths only pay for one forward pass.
    """
    x = _check_input(net, x)
    a = x if x.ndim == 2 else x[None, :]
    cache = []
    for layer in net.layers:
        z = a @ layer.weight.T + layer.bias
        cache.append((a, z))
        a = _apply_activation(z, layer.activation)
    return (a if x.ndim == 2 else a[0]), cache


def backward_from_cache(net: DenseNet, cache, output_grad: np.ndarray) -> Gradients:
    """Analytic gradients from a forward_cached pass.

    output_grad holds dLoss/dOutput row-aligned with the forward batch;
    gradients are summed over rows. The ReLU subgradient at exactly
    zero is zero.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != (cache[-1][1].shape[0], net.output_dim):
        raise ShapeError(
            f"output_grad shape {output_grad.shape} does not match the "
            f"forward batch ({cache[-1][1].shape[0]}, {net.output_dim})")
    w_grads: list[np.ndarray] = [None] * len(net.layers)
    b_grads: list[np.ndarray] = [None] * len(net.layers)
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        a_in, z = cache[idx]
        if layer.activation == "relu":
            g = g * (z > 0.0)
        w_grads[idx] = g.T @ a_in
        b_grads[idx] = g.sum(axis=0)
        if idx > 0:
            g = g @ layer.weight
    return Gradients(w_grads, b_grads)


def backward(net: DenseNet, x: np.ndarray, output_grad: np.ndarray) -> Gradients:
    """Exact gradients of the scalar loss whose output gradient is given."""
    _, cache = forward_cached(net, x)
    return backward_from_cache(net, cache, output_grad)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("softmax of an empty vector")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss_and_grad(y: np.ndarray, probs: np.ndarray):
    """Mean cross entropy against a (possibly soft) target vector.

    loss = -(1/k) sum_i y_i log(p_i) with p clamped at 1e-12; the
    returned gradient is with respect to the logits that produced
    probs: (1/k) * (p * sum(y) - y).
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if y.shape != p.shape or y.size == 0:
        raise ShapeError(f"target shape {y.shape} vs probs shape {p.shape}")
    k = y.shape[-1]
    loss = -(y * np.log(np.maximum(p, LOG_CLAMP))).sum(axis=-1) / k
    grad = (p * y.sum(axis=-1, keepdims=True) - y) / k
    return loss, grad


@dataclass
class OptimizerState:
    kind: str                    # "sgd" | "momentum" | "adam"
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optimizer(params: list[np.ndarray], kind: str = "adam",
                   learning_rate: float = 1e-3) -> OptimizerState:
    if kind not in ("sgd", "momentum", "adam"):
        raise ConfigError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, learning_rate=learning_rate)
    if kind == "momentum":
        state.m = [np.zeros_like(p) for p in params]
    elif kind == "adam":
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    return state


def step_arrays(params: list[np.ndarray], grads: list[np.ndarray],
                state: OptimizerState) -> bool:
    """One optimizer step over an aligned parameter/gradient list.

    Non-finite gradients skip the whole update and surface a warning;
    parameters and moments are left untouched. Returns True when the
    update was applied.
    """
    if len(params) != len(grads):
        raise ShapeError("parameter/gradient lists differ in length")
    if not all(np.all(np.isfinite(g)) for g in grads):
        warnings.warn("non-finite gradients; update skipped", RuntimeWarning)
        return False
    lr = state.learning_rate
    if state.kind == "sgd":
        for p, g in zip(params, grads):
            p -= lr * g
        state.step += 1
        return True
    if state.kind == "momentum":
        for p, g, m in zip(params, grads, state.m):
            m *= state.beta1
            m += g
            p -= lr * m
        state.step += 1
        return True
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def optimizer_step(net: DenseNet, grads: Gradients,
                   state: OptimizerState) -> bool:
    return step_arrays(net_parameters(net), grads.as_list(), state)


def finite_difference_gradients(net: DenseNet, loss_fn, h: float = 1e-5) -> Gradients:
    """Central-difference gradients of loss_fn(net) over every parameter.

    Deliberately shares no code with backward; used as the numeric
    oracle in tests and demos.
    """
    w_grads, b_grads = [], []
    for layer in net.layers:
        for holder, sink in ((layer.weight, w_grads), (layer.bias, b_grads)):
            grad = np.zeros_like(holder)
            flat = holder.reshape(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn(net)
                flat[i] = orig - h
                down = loss_fn(net)
                flat[i] = orig
                gflat[i] = (up - down) / (2.0 * h)
            sink.append(grad)
    return Gradients(w_grads, b_grads)


def finite_difference_array(arr: np.ndarray, loss_fn, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of loss_fn() with respect to arr in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


# --- parameter serialization (embedded in index checkpoints) ---

_ACT_CODES = {"identity": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


def write_net(stream, net: DenseNet) -> None:
    """Header (layer shapes + activations) then float64 little-endian params."""
    stream.write(struct.pack("<I", len(net.layers)))
    for layer in net.layers:
        stream.write(struct.pack("<IIB", layer.out_dim, layer.in_dim,
                                 _ACT_CODES[layer.activation]))
    for layer in net.layers:
        stream.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        stream.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise CheckpointError(
            f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_net(stream) -> DenseNet:
    (n_layers,) = struct.unpack("<I", _read_exact(stream, 4))
    if n_layers == 0 or n_layers > 64:
        raise CheckpointError(f"implausible layer count {n_layers}")
    shapes = []
    for _ in range(n_layers):
        out_dim, in_dim, act = struct.unpack("<IIB", _read_exact(stream, 9))
        if act not in _ACT_NAMES:
            raise CheckpointError(f"unknown activation code {act}")
        shapes.append((out_dim, in_dim, _ACT_NAMES[act]))
    layers = []
    for out_dim, in_dim, act in shapes:
        w = np.frombuffer(_read_exact(stream, 8 * out_dim * in_dim),
                          dtype="<f8").reshape(out_dim, in_dim).copy()
        b = np.frombuffer(_read_exact(stream, 8 * out_dim), dtype="<f8").copy()
        layers.append(Layer(w, b, act))
    return DenseNet(layers)
