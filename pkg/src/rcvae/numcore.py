"""Dense float64 substrate: affine stacks with exact reverse-mode gradients,
Adam, and a seedable normal sampler.

Batch convention: every 2-D activation array has shape ``(features, batch)``,
i.e. columns are batch items. 1-D inputs are treated as a single column.
"""
from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import NumericError, ShapeError, StateError

__all__ = [
    "Activation",
    "AffineLayer",
    "GradTape",
    "affine_forward",
    "stack_forward",
    "backward",
    "AdamState",
    "adam_step",
    "Rng",
    "normal_sample",
    "as_column_batch",
    "check_finite",
]


class Activation(str, enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {what}")
    return array


def as_column_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[:, None]
    if x.ndim != 2:
        raise ShapeError(f"expected 1-D or 2-D input, got shape {x.shape}")
    return x


# expit rounds to exactly 0 or 1 once |pre| > ~37 (upper) or ~745 (lower)
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _activate(kind: Activation, pre: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(pre, 0.0)
    if kind is Activation.SIGMOID:
        return np.clip(expit(pre), _SIG_LO, _SIG_HI)
    return pre


def _activation_grad(kind: Activation, pre: np.ndarray, out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return grad_out * (pre > 0.0)
    if kind is Activation.SIGMOID:
        return grad_out * out * (1.0 - out)
    return grad_out


@dataclass
class AffineLayer:
    """``activation(weight @ x + bias)`` with weight ``(out, in)`` and bias ``(out, 1)``."""

    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.RELU

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1, 1)
        self.activation = Activation(self.activation)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match weight rows {self.weight.shape[0]}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def glorot(cls, in_dim: int, out_dim: int, activation: Activation, rng: "Rng") -> "AffineLayer":
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        weight = (2.0 * rng.uniform(out_dim * in_dim) - 1.0).reshape(out_dim, in_dim) * limit
        return cls(weight, np.zeros((out_dim, 1)), activation)

    @classmethod
    def zeros(cls, in_dim: int, out_dim: int, activation: Activation) -> "AffineLayer":
        return cls(np.zeros((out_dim, in_dim)), np.zeros((out_dim, 1)), activation)

    def copy(self) -> "AffineLayer":
        return AffineLayer(self.weight.copy(), self.bias.copy(), self.activation)


def affine_forward(layer: AffineLayer, x: np.ndarray) -> np.ndarray:
    x = as_column_batch(x)
    if x.shape[0] != layer.in_dim:
        raise ShapeError(f"input has {x.shape[0]} rows, layer expects {layer.in_dim}")
    out = _activate(layer.activation, layer.weight @ x + layer.bias)
    return check_finite(out, "affine_forward output")


@dataclass
class _Record:
    index: int
    x: np.ndarray
    pre: np.ndarray
    out: np.ndarray


@dataclass
class GradTape:
    """Forward values of one pass through a layer stack.

    A tape supports exactly one :func:`backward` call.
    """

    layers: list
    records: list = field(default_factory=list)
    input_shape: tuple | None = None
    consumed: bool = False


def stack_forward(layers, x, skip=frozenset()):
    """Run ``x`` through ``layers`` in order and return ``(output, tape)``.

    Indices in ``skip`` are bypassed: the layer's input is handed unchanged
    to the next layer, which requires the skipped layer to be square.
    """
    a = as_column_batch(x)
    tape = GradTape(list(layers), input_shape=a.shape)
    for i, layer in enumerate(layers):
        if i in skip:
            if layer.in_dim != layer.out_dim:
                raise ShapeError(f"cannot bypass non-square layer {i} ({layer.in_dim}->{layer.out_dim})")
            continue
        if a.shape[0] != layer.in_dim:
            raise ShapeError(f"layer {i} expects {layer.in_dim} inputs, got {a.shape[0]}")
        with np.errstate(over="ignore", invalid="ignore"):  # reported by check_finite instead
            pre = layer.weight @ a + layer.bias
            out = check_finite(_activate(layer.activation, pre), f"layer {i} output")
        tape.records.append(_Record(i, a, pre, out))
        a = out
    return a, tape


def backward(tape: GradTape, loss_grad: np.ndarray):
    """Reverse pass over a recorded stack.

    Returns ``(grads, grad_input)`` where ``grads[i]`` is ``(dW, db)`` for
    layer ``i`` (zeros for bypassed layers) and ``grad_input`` is the
    gradient with respect to the stack's input.
    """
    if tape is None or tape.input_shape is None:
        raise StateError("backward called without a recorded forward pass")
    if tape.consumed:
        raise StateError("tape already consumed by a previous backward pass")
    tape.consumed = True

    g = as_column_batch(loss_grad)
    grads = [(np.zeros_like(layer.weight), np.zeros_like(layer.bias)) for layer in tape.layers]
    if tape.records and g.shape != tape.records[-1].out.shape:
        raise ShapeError(f"loss gradient shape {g.shape} != output shape {tape.records[-1].out.shape}")
    for rec in reversed(tape.records):
        layer = tape.layers[rec.index]
        g_pre = _activation_grad(layer.activation, rec.pre, rec.out, g)
        grads[rec.index] = (g_pre @ rec.x.T, g_pre.sum(axis=1, keepdims=True))
        g = layer.weight.T @ g_pre
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("stream keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    """Seedable stream: PCG64 uniforms (seeded through SeedSequence) and
    Box-Muller normals.

    ``spawn(*keys)`` derives an independent child stream whose identity is
    the parent seed plus the key path, so substreams are reproducible
    without consuming the parent. String keys map to their CRC-32.
    """

    algorithm = "pcg64-seedseq/box-muller"

    def __init__(self, seed: int, path: tuple = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(_key_to_int(k) for k in path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(keys))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` values in [0, 1)."""
        return self._gen.random(int(n))

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        if n == 0:
            return np.zeros(shape)
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        u2 = u[pairs:]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice_weighted(self, weights: np.ndarray) -> int:
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if not total > 0:
            raise ValueError("weights must have a positive sum")
        cdf = np.cumsum(weights) / total
        idx = int(np.searchsorted(cdf, self.uniform(1)[0], side="right"))
        return min(idx, len(weights) - 1)


def normal_sample(rng: Rng, n: int) -> np.ndarray:
    if n < 0:
        raise ValueError("n must be non-negative")
    return rng.normal(n)
