"""Dense ReLU networks, L2 weight penalty and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


@dataclass(frozen=True)
class DenseNetSpec:
    """Layer sizes (input first, output last); identity on the output layer.

    ``activation`` names the hidden-layer nonlinearity (``"relu"`` or ``"tanh"``).
    """

    layer_sizes: tuple[int, ...]
    init_seed: int = 0
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2:
            raise ValueError("a network needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError(f"layer sizes must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "init_seed": self.init_seed,
                "activation": self.activation}


@dataclass
class NetParams:
    """Per-layer weights ``W[k]`` of shape ``(in, out)`` and biases ``b[k]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check(self, spec: DenseNetSpec) -> None:
        sizes = spec.layer_sizes
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ValueError("parameter count does not match the network spec")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (sizes[k], sizes[k + 1]) or b.shape != (sizes[k + 1],):
                raise ValueError(f"layer {k}: shapes {W.shape}, {b.shape} do not match spec")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise FloatingPointError(f"layer {k}: non-finite parameters")


def init_params(spec: DenseNetSpec, rng: np.random.Generator | None = None) -> NetParams:
    """He-uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(spec.init_seed))
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetParams(weights, biases)


def forward(params, x, activation: str = "relu"):
    """Apply the network to the last axis of ``x``.

    ``params`` holds arrays or tape variables (``(weights, biases)`` lists);
    the result is a numpy array when nothing in the inputs is on a tape.
    """
    weights, biases = (params.weights, params.biases) if isinstance(params, NetParams) else params
    xv = ad.value(x)
    n_in = ad.value(weights[0]).shape[0]
    if xv.shape[-1] != n_in:
        raise ValueError(f"input dimension {xv.shape[-1]} does not match layer size {n_in}")
    squeeze = xv.ndim == 1
    h = ad.reshape(x, (1, n_in)) if squeeze else x
    act = ACTIVATIONS[activation]
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        h = ad.add(ad.matmul(h, W), b)
        if k < last:
            h = act(h)
    if squeeze:
        h = ad.reshape(h, (ad.value(h).shape[-1],))
    return h


def l2_penalty(weights, weight: float):
    """``weight * sum ||W||_F^2`` over weight matrices (biases excluded)."""
    if weight < 0:
        raise ValueError("L2 weight must be nonnegative")
    total = 0.0
    for W in weights:
        total = ad.add(total, ad.sumsq(W))
    return ad.mul(total, weight)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """One Adam update on a dict of named arrays; returns the new arrays.

    Raises
    ------
    FloatingPointError
        If any gradient is NaN or infinite.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradients for {bad} at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    out = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
        m = state.m.get(key, np.zeros_like(p))
        v = state.v.get(key, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[key], state.v[key] = m, v
        m_hat = m / (1.0 - b1 ** state.step)
        v_hat = v / (1.0 - b2 ** state.step)
        out[key] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return out
