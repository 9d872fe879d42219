"""Small dense MLP engine with hand-written reverse mode, Adam, and a
finite-difference oracle.

Parameters live in one flat float64 vector per network. Layer ``i`` occupies
a weight block of shape ``(widths[i], widths[i+1])`` stored row-major,
followed by its bias of length ``widths[i+1]``. Inputs may be a single vector
or a 2-D batch with one row per example; parameter gradients are summed over
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "identity")
OUTPUT_ACTIVATIONS = ("identity", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ShapeError(f"layer_widths needs at least 2 entries, got {len(widths)}")
        if any(w < 1 for w in widths):
            raise ShapeError(f"all layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))

    def layer_slices(self) -> list[tuple[slice, slice, tuple[int, int]]]:
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            out.append((w, b, (fan_in, fan_out)))
        return out


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    params = np.zeros(spec.n_params)
    for w, _, (fan_in, fan_out) in spec.layer_slices():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[w] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return params


def _check_params(spec: MlpSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ShapeError(f"expected parameter vector of length {spec.n_params}, got shape {params.shape}")
    return params


def _as_batch(spec: MlpSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_width:
        got = x.shape[-1] if x.ndim >= 1 else 0
        raise ShapeError(f"expected input of length {spec.input_width}, got {got}")
    return x, single


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class ForwardCache:
    """Activations retained for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    single: bool = False


def forward_with_cache(spec: MlpSpec, params, x) -> tuple[np.ndarray, ForwardCache]:
    params = _check_params(spec, params)
    h, single = _as_batch(spec, x)
    cache = ForwardCache(single=single)
    last = spec.n_layers - 1
    for i, (w, b, shape) in enumerate(spec.layer_slices()):
        cache.inputs.append(h)
        with np.errstate(over="ignore", invalid="ignore"):
            z = h @ params[w].reshape(shape) + params[b]
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite pre-activation in layer {i}")
        cache.pre.append(z)
        if i < last:
            h = np.maximum(z, 0.0) if spec.activation == "relu" else z
        else:
            h = _softplus(z) if spec.output_activation == "softplus" else z
    return (h[0] if single else h), cache


def mlp_forward(spec: MlpSpec, params, x) -> np.ndarray:
    return forward_with_cache(spec, params, x)[0]


def backward_from_cache(spec: MlpSpec, params, cache: ForwardCache, output_grad) -> tuple[np.ndarray, np.ndarray]:
    params = _check_params(spec, params)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    batch = cache.inputs[0].shape[0]
    if g.shape != (batch, spec.output_width):
        raise ShapeError(f"expected output_grad of shape {(batch, spec.output_width)}, got {g.shape}")
    grad = np.zeros(spec.n_params)
    slices = spec.layer_slices()
    last = spec.n_layers - 1
    for i in range(last, -1, -1):
        w, b, shape = slices[i]
        z = cache.pre[i]
        if i == last:
            if spec.output_activation == "softplus":
                g = g * _sigmoid(z)
        elif spec.activation == "relu":
            # subgradient at exactly 0 is 0
            g = g * (z > 0.0)
        grad[w] = (cache.inputs[i].T @ g).ravel()
        grad[b] = g.sum(axis=0)
        with np.errstate(over="ignore", invalid="ignore"):
            g = g @ params[w].reshape(shape).T
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient flowing into layer {i}")
    input_grad = g[0] if cache.single else g
    return grad, input_grad


def mlp_backward(spec: MlpSpec, params, x, output_grad) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. params and input."""
    _, cache = forward_with_cache(spec, params, x)
    return backward_from_cache(spec, params, cache, output_grad)


def finite_diff_grad(loss: Callable[[np.ndarray], float], params, step: float = 1e-5) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    p = np.array(params, dtype=np.float64)
    grad = np.zeros_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + step
        up = float(loss(p))
        p[i] = orig - step
        down = float(loss(p))
        p[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss when perturbing index {i}")
        grad[i] = (up - down) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_stab: float = 1e-8

    @classmethod
    def zeros(cls, n: int, learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, learning_rate, **kw)


def adam_step(state: AdamState, params, grad) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam descent step; returns fresh state and params."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    n = state.first_moment.shape[0]
    if params.shape != (n,) or grad.shape != (n,):
        raise ShapeError(f"adam expects length {n}, got params {params.shape} and grad {grad.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError(f"non-finite gradient at index {bad}")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon_stab)
    return replace(state, first_moment=m, second_moment=v, step_count=t), new_params


def rng_stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Independent PCG64 stream keyed by ``(seed, stream_id)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.PCG64(ss))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        return float(_sigmoid(x[None])[0])
    return _sigmoid(x)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))

