"""
GemFlow Network
Fully-connected ReLU networks with reverse-mode gradients and RMSProp
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from gemflow.errors import ConfigError, NumericFault, ShapeError

logger = logging.getLogger(__name__)

RMSPROP_DECAY = 0.9
RMSPROP_EPSILON = 1e-8


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def as_batch(batch: Any, width: Optional[int] = None, name: str = "batch") -> np.ndarray:
    """Coerce to an n x m float64 matrix, checking the width if given"""
    points = np.asarray(batch, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D array, got shape {points.shape}")
    if width is not None and points.shape[1] != width:
        raise ShapeError(f"{name} has width {points.shape[1]}, expected {width}")
    return points


@dataclass
class ParamGrads:
    """Per-layer gradients mirroring a Network's weights and biases"""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def zeros_like(cls, net: "Network") -> "ParamGrads":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> List[np.ndarray]:
        """Gradients in Network.parameters() order"""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, factor: float) -> "ParamGrads":
        return ParamGrads([factor * w for w in self.weights], [factor * b for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(a * a)) for a in self.arrays())))


@dataclass
class Network:
    """Feedforward net: ReLU on hidden layers, identity on the output layer"""

    layer_widths: Tuple[int, ...]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.layer_widths) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("Network needs one weight matrix and one bias per layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_widths[l + 1], self.layer_widths[l])
            if w.shape != expected or b.shape != (expected[0],):
                raise ShapeError(
                    f"Layer {l}: weight {w.shape} / bias {b.shape} do not match widths {expected}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericFault(f"Layer {l} holds non-finite parameters")

    @property
    def input_width(self) -> int:
        return self.layer_widths[0]

    @property
    def output_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "Network":
        return Network(self.layer_widths, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "widths": list(self.layer_widths),
            "layers": [
                {"w": [float(v) for v in w.ravel()], "b": [float(v) for v in b]}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Network":
        widths = tuple(int(w) for w in data["widths"])
        if len(data["layers"]) != len(widths) - 1:
            raise ShapeError("Checkpoint layer count does not match its widths")
        weights, biases = [], []
        for l, layer in enumerate(data["layers"]):
            w = np.asarray(layer["w"], dtype=np.float64)
            if w.size != widths[l + 1] * widths[l]:
                raise ShapeError(f"Checkpoint layer {l} has {w.size} weights, expected {widths[l + 1] * widths[l]}")
            weights.append(w.reshape(widths[l + 1], widths[l]))
            biases.append(np.asarray(layer["b"], dtype=np.float64))
        return cls(widths, weights, biases)


@dataclass
class OptState:
    """RMSProp state: one squared-gradient accumulator per parameter array"""

    learning_rate: float
    accumulators: List[np.ndarray]
    decay: float = RMSPROP_DECAY
    epsilon: float = RMSPROP_EPSILON
    steps: int = 0

    @classmethod
    def for_network(
        cls, net: Network, learning_rate: float, decay: float = RMSPROP_DECAY, epsilon: float = RMSPROP_EPSILON
    ) -> "OptState":
        if not learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {learning_rate}")
        if not 0 < decay < 1:
            raise ConfigError(f"RMSProp decay must lie in (0, 1), got {decay}")
        if not epsilon > 0:
            raise ConfigError(f"RMSProp epsilon must be positive, got {epsilon}")
        return cls(learning_rate, [np.zeros_like(p) for p in net.parameters()], decay, epsilon)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "learning_rate": self.learning_rate,
            "decay": self.decay,
            "epsilon": self.epsilon,
            "steps": self.steps,
            "accumulators": [[float(v) for v in a.ravel()] for a in self.accumulators],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], net: Network) -> "OptState":
        shapes = [p.shape for p in net.parameters()]
        if len(data["accumulators"]) != len(shapes):
            raise ShapeError("Optimizer checkpoint does not match the network")
        accumulators = [
            np.asarray(values, dtype=np.float64).reshape(shape)
            for values, shape in zip(data["accumulators"], shapes)
        ]
        return cls(
            learning_rate=float(data["learning_rate"]),
            accumulators=accumulators,
            decay=float(data["decay"]),
            epsilon=float(data["epsilon"]),
            steps=int(data.get("steps", 0)),
        )


@dataclass
class ForwardCache:
    """Activations a_0..a_L and pre-activations z_1..z_L of one forward pass"""

    activations: List[np.ndarray] = field(default_factory=list)
    preactivations: List[np.ndarray] = field(default_factory=list)


def network_init(layer_widths: Sequence[int], seed: int) -> Network:
    """He-initialized network with zero biases, deterministic in the seed"""
    widths = [int(w) for w in layer_widths]
    if len(widths) < 2:
        raise ConfigError(f"A network needs at least input and output widths, got {widths}")
    if any(w < 1 for w in widths):
        raise ConfigError(f"Layer widths must be positive, got {widths}")

    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(tuple(widths), weights, biases)


def forward_cache(net: Network, batch: Any) -> Tuple[np.ndarray, ForwardCache]:
    x = as_batch(batch, net.input_width)
    cache = ForwardCache(activations=[x])
    a = x
    last = net.n_layers - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ w.T + b
        cache.preactivations.append(z)
        a = relu(z) if l < last else z
        cache.activations.append(a)
    return a, cache


def forward(net: Network, batch: Any) -> np.ndarray:
    """Evaluate the network on an n x m batch, giving n x out_width"""
    out, _ = forward_cache(net, batch)
    return out


def backward(
    net: Network, batch: Any, upstream: Any, cache: Optional[ForwardCache] = None
) -> Tuple[ParamGrads, np.ndarray]:
    """Gradients of sum_i upstream_i . net(x_i) w.r.t. parameters and inputs"""
    if cache is None:
        _, cache = forward_cache(net, batch)
    n = cache.activations[0].shape[0]
    delta = as_batch(upstream, net.output_width, name="upstream")
    if delta.shape[0] != n:
        raise ShapeError(f"upstream has {delta.shape[0]} rows, batch has {n}")

    grads = ParamGrads.zeros_like(net)
    last = net.n_layers - 1
    for l in range(last, -1, -1):
        if l < last:
            # relu'(0) := 0
            delta = delta * (cache.preactivations[l] > 0.0)
        grads.weights[l] = delta.T @ cache.activations[l]
        grads.biases[l] = delta.sum(axis=0)
        delta = delta @ net.weights[l]
    return grads, delta


def _require_scalar(net: Network):
    if net.output_width != 1:
        raise ConfigError(f"Expected a scalar-output network, output width is {net.output_width}")


def _input_gradient_chain(net: Network, cache: ForwardCache) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Row-wise d net / d x plus the masked deltas of each hidden layer"""
    n = cache.activations[0].shape[0]
    grad = np.ones((n, 1)) @ net.weights[-1]
    deltas: List[Optional[np.ndarray]] = [None] * net.n_layers
    for l in range(net.n_layers - 2, -1, -1):
        deltas[l] = grad * (cache.preactivations[l] > 0.0)
        grad = deltas[l] @ net.weights[l]
    return grad, deltas


def input_gradient(net: Network, batch: Any) -> np.ndarray:
    """Rows are grad_x net(x_i) for a scalar-output network"""
    _require_scalar(net)
    _, cache = forward_cache(net, batch)
    grad, _ = _input_gradient_chain(net, cache)
    return grad


def input_gradient_vjp(net: Network, batch: Any) -> Tuple[np.ndarray, Callable[[Any], ParamGrads]]:
    """Input gradients plus a pullback to parameter space.

    pullback(E) is the parameter gradient of sum_i E_i . grad_x net(x_i).
    The ReLU masks are locally constant in the parameters, so the input
    gradient is multilinear in the weights and carries no bias dependence.
    """
    _require_scalar(net)
    _, cache = forward_cache(net, batch)
    grad, deltas = _input_gradient_chain(net, cache)

    def pullback(cotangent: Any) -> ParamGrads:
        e = as_batch(cotangent, net.input_width, name="cotangent")
        if e.shape != grad.shape:
            raise ShapeError(f"cotangent shape {e.shape} does not match input gradients {grad.shape}")
        grads = ParamGrads.zeros_like(net)
        for l in range(net.n_layers - 1):
            grads.weights[l] = deltas[l].T @ e
            e = (e @ net.weights[l].T) * (cache.preactivations[l] > 0.0)
        grads.weights[-1] = e.sum(axis=0, keepdims=True)
        return grads

    return grad, pullback


def rmsprop_step(net: Network, grads: ParamGrads, opt: OptState) -> Tuple[Network, OptState]:
    """One in-place RMSProp update; rejects non-finite gradients untouched"""
    params = net.parameters()
    grad_arrays = grads.arrays()
    if len(grad_arrays) != len(params) or any(g.shape != p.shape for g, p in zip(grad_arrays, params)):
        raise ShapeError("Gradients are not congruent with the network")
    if not grads.is_finite():
        raise NumericFault("Non-finite gradient rejected by RMSProp")

    for p, g, acc in zip(params, grad_arrays, opt.accumulators):
        acc *= opt.decay
        acc += (1.0 - opt.decay) * g * g
        p -= opt.learning_rate * g / np.sqrt(acc + opt.epsilon)
    opt.steps += 1
    return net, opt


def value_and_input_gradient(net: Network, batch: Any) -> Tuple[np.ndarray, np.ndarray]:
    """Outputs (n x 1) and input gradients (n x m) from a single forward pass"""
    _require_scalar(net)
    out, cache = forward_cache(net, batch)
    grad, _ = _input_gradient_chain(net, cache)
    return out, grad
