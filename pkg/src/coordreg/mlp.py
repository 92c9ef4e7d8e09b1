"""Small fully connected networks with hand-written backward pass, plus Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (64, 64)
    output_dim: int = 1
    activation: str = "relu"
    final_layer_zero_init: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(h) for h in self.hidden_widths))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("need at least one hidden layer of width >= 1")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MlpParams:
    """Weights are stored ``(fan_in, fan_out)`` so a layer is ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])


def init_mlp(config: MlpConfig, seed=None) -> MlpParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.

    Zero biases keep a network fed with near-zero hash features close to zero
    output at initialization.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    n_layers = len(config.layer_dims)
    for k, (fan_in, fan_out) in enumerate(config.layer_dims):
        if k == n_layers - 1 and config.final_layer_zero_init:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _act_grad(z, kind):
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    return 0.5 * (1.0 + erf(z / _SQRT2)) + z * _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def forward(config: MlpConfig, params: MlpParams, x: np.ndarray, keep_cache: bool = False):
    """Evaluate the network on a batch ``(B, input_dim)`` (a single vector is promoted).

    With ``keep_cache`` returns ``(output, cache)`` for :func:`backward`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    inputs, pre = [], []
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        if k == last:
            h = z
        else:
            pre.append(z)
            h = _act(z, config.activation)
    out = h[0] if single else h
    if keep_cache:
        return out, (inputs, pre, single)
    return out


def backward(config: MlpConfig, params: MlpParams, cache, grad_out: np.ndarray, need_input_grad: bool = True):
    """Reverse pass; returns ``(param_grads, input_grad)``."""
    inputs, pre, single = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if single:
        g = g[None, :]
    n_layers = len(params.weights)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        gw[k] = inputs[k].T @ g
        gb[k] = g.sum(axis=0)
        if k == 0 and not need_input_grad:
            g = None
            break
        g = g @ params.weights[k].T
        if k > 0:
            g = g * _act_grad(pre[k - 1], config.activation)
    grads = MlpParams(gw, gb)
    if g is not None and single:
        g = g[0]
    return grads, g


def forward_backward(config: MlpConfig, params: MlpParams, x, grad_out):
    """Convenience wrapper: ``(param_grads, input_grad)`` for one upstream gradient."""
    _, cache = forward(config, params, x, keep_cache=True)
    return backward(config, params, cache, grad_out)


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of arrays, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ValueError("params and grads differ in length")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} != param shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
