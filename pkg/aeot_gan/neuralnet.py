"""Fully-connected networks with exact reverse-mode gradients and Adam.

Batches are row-major: a layer maps `x (batch, in)` to `act(x @ W + b)` with
`W` of shape (in, out).
"""
from __future__ import annotations

import dataclasses as dc
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import DimensionMismatchError, RngStream

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("relu", "leaky_relu", "tanh", "sigmoid", "identity")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_FORWARD: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda z: np.maximum(z, 0.0),
    "leaky_relu": lambda z: np.where(z > 0, z, LEAKY_SLOPE * z),
    "tanh": np.tanh,
    "sigmoid": _sigmoid,
    "identity": lambda z: z,
}


def _activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d act / d z given pre-activation z and output a."""
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dc.dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("layer dimensions must be positive")


@dc.dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.weight.shape[0], self.weight.shape[1], self.activation)


@dc.dataclass
class Mlp:
    layers: List[Layer]
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise DimensionMismatchError("adjacent layer dimensions do not chain")
        for layer in self.layers:
            if layer.bias.shape != (layer.weight.shape[1],):
                raise DimensionMismatchError("bias length does not match layer width")
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ValueError("network parameters must be finite")

    @property
    def in_dim(self) -> int:
        return int(self.layers[0].weight.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.layers[-1].weight.shape[1])

    @property
    def specs(self) -> List[LayerSpec]:
        return [layer.spec for layer in self.layers]

    def parameters(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Mlp":
        layers = [
            Layer(weight=np.array(params[2 * k], dtype=np.float64), bias=np.array(params[2 * k + 1], dtype=np.float64), activation=layer.activation)
            for k, layer in enumerate(self.layers)
        ]
        return Mlp(layers=layers, seed=self.seed)

    def copy(self) -> "Mlp":
        return self.with_parameters(self.parameters())

    def to_checkpoint(self) -> Dict[str, Any]:
        return {
            "layers": [
                {
                    "in_dim": s.in_dim,
                    "out_dim": s.out_dim,
                    "activation": s.activation,
                    "weight": [float(v) for v in layer.weight.ravel(order="C")],
                    "bias": [float(v) for v in layer.bias],
                }
                for s, layer in zip(self.specs, self.layers)
            ],
            "seed": self.seed,
        }

    @staticmethod
    def from_checkpoint(d: Dict[str, Any]) -> "Mlp":
        layers = []
        for item in d["layers"]:
            w = np.asarray(item["weight"], dtype=np.float64).reshape(item["in_dim"], item["out_dim"])
            b = np.asarray(item["bias"], dtype=np.float64)
            layers.append(Layer(weight=w, bias=b, activation=item["activation"]))
        return Mlp(layers=layers, seed=d.get("seed"))


@dc.dataclass
class ForwardTrace:
    """Per-layer inputs, pre-activations and outputs of one forward pass."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    outputs: List[np.ndarray]

    def __len__(self) -> int:
        return len(self.outputs)

    @property
    def features(self) -> List[np.ndarray]:
        return self.outputs


@dc.dataclass
class GradientBundle:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def parameters(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for gw, gb in zip(self.weights, self.biases):
            out += [gw, gb]
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.parameters())


@dc.dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: Sequence[np.ndarray], lr: float) -> "AdamState":
        return AdamState(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], lr=lr)


def init(specs: Sequence[LayerSpec], rng: RngStream) -> Mlp:
    """He init for relu-family layers, Xavier otherwise; zero biases."""
    specs = list(specs)
    for prev, nxt in zip(specs, specs[1:]):
        if prev.out_dim != nxt.in_dim:
            raise DimensionMismatchError("layer spec dimensions do not chain")
    gen = rng.generator()
    layers = []
    for s in specs:
        if s.activation in ("relu", "leaky_relu"):
            std = np.sqrt(2.0 / s.in_dim)
        else:
            std = np.sqrt(2.0 / (s.in_dim + s.out_dim))
        layers.append(Layer(weight=gen.normal(0.0, std, size=(s.in_dim, s.out_dim)), bias=np.zeros(s.out_dim), activation=s.activation))
    return Mlp(layers=layers, seed=rng.seed)


def mlp_specs(in_dim: int, hidden: Sequence[int], out_dim: int, activation: str, final_activation: str = "identity") -> List[LayerSpec]:
    dims = [in_dim, *hidden, out_dim]
    acts = [activation] * len(hidden) + [final_activation]
    return [LayerSpec(a, b, act) for a, b, act in zip(dims[:-1], dims[1:], acts)]


def forward(net: Mlp, batch: np.ndarray) -> Tuple[np.ndarray, ForwardTrace]:
    x = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if x.shape[1] != net.in_dim:
        raise DimensionMismatchError(f"batch has {x.shape[1]} columns, network expects {net.in_dim}")
    inputs, pres, outs = [], [], []
    for layer in net.layers:
        inputs.append(x)
        z = x @ layer.weight + layer.bias
        x = _FORWARD[layer.activation](z)
        pres.append(z)
        outs.append(x)
    return x, ForwardTrace(inputs=inputs, pre_activations=pres, outputs=outs)


def backward(
    net: Mlp,
    trace: ForwardTrace,
    upstream: np.ndarray,
    layer_upstreams: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> GradientBundle:
    """Reverse pass. `layer_upstreams[l]`, when given, is added to the
    gradient arriving at layer l's output (hidden-layer loss terms)."""
    if len(trace) != len(net.layers):
        raise DimensionMismatchError("trace does not belong to this network")
    for layer, x in zip(net.layers, trace.inputs):
        if x.shape[1] != layer.weight.shape[0]:
            raise DimensionMismatchError("trace does not belong to this network")
    g = np.asarray(upstream, dtype=np.float64).reshape(trace.outputs[-1].shape)
    gw: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    gb: List[np.ndarray] = [np.empty(0)] * len(net.layers)
    for k in reversed(range(len(net.layers))):
        layer = net.layers[k]
        if layer_upstreams is not None and layer_upstreams[k] is not None:
            g = g + layer_upstreams[k]
        gz = g * _activation_grad(layer.activation, trace.pre_activations[k], trace.outputs[k])
        gw[k] = trace.inputs[k].T @ gz
        gb[k] = gz.sum(axis=0)
        g = gz @ layer.weight.T
    return GradientBundle(weights=gw, biases=gb, inputs=g)


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """One Adam descent step; returns new parameter arrays and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatchError("parameter, gradient and state counts differ")
    t = state.step + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionMismatchError("parameter and gradient shapes differ")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, dc.replace(state, m=new_m, v=new_v, step=t)


def adam_step(net: Mlp, state: AdamState, grads: GradientBundle) -> Tuple[Mlp, AdamState]:
    params, state = adam_update(net.parameters(), grads.parameters(), state)
    return net.with_parameters(params), state
