"""
Dense numeric primitives shared by every model in the repo.

Provides:
- Fixed-topology fully-connected stacks (LeakyReLU hidden layers, identity output)
  with exact analytic backward passes
- Adam with bias correction over named parameter dictionaries
- Central finite-difference gradient checking
- Smallest right singular vector (DLT / Procrustes substrate)

All routines accept a single row vector or a 2-D batch of rows; batches are the
normal case because 20 bones (times the minibatch) are evaluated at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

LEAKY_SLOPE = 0.01
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

ACTIVATIONS = ("leaky_relu", "identity")

Slope = Union[float, np.ndarray]


class RejectedInputError(ValueError):
    """Shape or cache mismatch at a numeric-core boundary."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, tensor_name: str):
        super().__init__(f"Non-finite gradient in tensor '{tensor_name}'")
        self.tensor_name = tensor_name


@dataclass
class DenseLayer:
    """
    One affine layer plus activation.

    `slope` is the LeakyReLU negative slope. A float is a fixed hyperparameter;
    an array of shape (out,) is a learned per-unit slope and shows up as a
    trainable tensor.
    """

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "leaky_relu"
    slope: Slope = LEAKY_SLOPE

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    @property
    def learned_slope(self) -> bool:
        return isinstance(self.slope, np.ndarray)

    def parameter_count(self) -> int:
        count = self.weight.size + self.bias.size
        if self.learned_slope:
            count += self.slope.size
        return int(count)

    def mac_count(self) -> int:
        # Bias additions count as one MAC each.
        return self.out_dim * self.in_dim + self.out_dim

    def copy(self) -> "DenseLayer":
        slope = self.slope.copy() if self.learned_slope else self.slope
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation, slope)


@dataclass
class MLPStack:
    layers: List[DenseLayer] = field(default_factory=list)

    def __post_init__(self) -> None:
        validate_stack(self)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)

    def mac_count(self) -> int:
        return sum(layer.mac_count() for layer in self.layers)

    def copy(self) -> "MLPStack":
        return MLPStack([layer.copy() for layer in self.layers])

    def astype(self, dtype) -> "MLPStack":
        layers = []
        for layer in self.layers:
            slope = layer.slope.astype(dtype) if layer.learned_slope else layer.slope
            layers.append(
                DenseLayer(layer.weight.astype(dtype), layer.bias.astype(dtype), layer.activation, slope)
            )
        return MLPStack(layers)


@dataclass
class MLPCache:
    """Per-layer inputs and pre-activations from one forward call."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    layer_shapes: Tuple[Tuple[int, int], ...]
    squeeze: bool


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def validate_stack(stack: MLPStack) -> None:
    if not stack.layers:
        raise RejectedInputError("MLP stack has no layers")
    for index, layer in enumerate(stack.layers):
        if layer.activation not in ACTIVATIONS:
            raise RejectedInputError(f"layer {index}: unknown activation '{layer.activation}'")
        if layer.bias.shape != (layer.out_dim,):
            raise RejectedInputError(f"layer {index}: bias shape {layer.bias.shape} != ({layer.out_dim},)")
        if layer.learned_slope and layer.slope.shape != (layer.out_dim,):
            raise RejectedInputError(f"layer {index}: slope shape {layer.slope.shape} != ({layer.out_dim},)")
        if index > 0 and stack.layers[index - 1].out_dim != layer.in_dim:
            raise RejectedInputError(
                f"layer {index}: input dim {layer.in_dim} does not chain from {stack.layers[index - 1].out_dim}"
            )
    if stack.layers[-1].activation != "identity":
        raise RejectedInputError("final layer must use the identity activation")


def init_dense_layer(
    rng: np.random.Generator,
    in_dim: int,
    out_dim: int,
    *,
    activation: str = "leaky_relu",
    learned_slope: bool = False,
    zero: bool = False,
    dtype=np.float64,
) -> DenseLayer:
    """Uniform ±sqrt(1/fan_in) init, or all zeros for Zero-FC layers."""
    if zero:
        weight = np.zeros((out_dim, in_dim), dtype=dtype)
        bias = np.zeros(out_dim, dtype=dtype)
    else:
        bound = np.sqrt(1.0 / in_dim)
        weight = rng.uniform(-bound, bound, size=(out_dim, in_dim)).astype(dtype)
        bias = rng.uniform(-bound, bound, size=out_dim).astype(dtype)
    slope: Slope = np.full(out_dim, LEAKY_SLOPE, dtype=dtype) if learned_slope else LEAKY_SLOPE
    return DenseLayer(weight, bias, activation, slope)


def init_mlp_stack(
    rng: np.random.Generator,
    dims: Sequence[int],
    *,
    learned_slope: bool = False,
    dtype=np.float64,
) -> MLPStack:
    """Build a stack whose layer widths follow `dims` (input first)."""
    layers = []
    for index in range(len(dims) - 1):
        last = index == len(dims) - 2
        layers.append(
            init_dense_layer(
                rng,
                dims[index],
                dims[index + 1],
                activation="identity" if last else "leaky_relu",
                learned_slope=learned_slope and not last,
                dtype=dtype,
            )
        )
    return MLPStack(layers)


def leaky_relu(z: np.ndarray, slope: Slope = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z < 0, slope * z, z)


def _activate(layer: DenseLayer, z: np.ndarray) -> np.ndarray:
    if layer.activation == "identity":
        return z
    return leaky_relu(z, layer.slope)


def layer_forward(layer: DenseLayer, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return (activation, pre-activation) for a 2-D batch of rows."""
    z = x @ layer.weight.T + layer.bias
    return _activate(layer, z), z


def layer_backward(
    layer: DenseLayer,
    x: np.ndarray,
    z: np.ndarray,
    dy: np.ndarray,
    *,
    need_param_grads: bool = True,
) -> Tuple[Optional[Dict[str, np.ndarray]], np.ndarray]:
    if layer.activation == "identity":
        dz = dy
    else:
        negative = z < 0
        dz = np.where(negative, layer.slope * dy, dy)

    grads = None
    if need_param_grads:
        grads = {"weight": dz.T @ x, "bias": dz.sum(axis=0)}
        if layer.learned_slope:
            grads["slope"] = np.where(z < 0, z * dy, 0.0).sum(axis=0)
    return grads, dz @ layer.weight


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        return x[np.newaxis, :], True
    if x.ndim == 2:
        return x, False
    raise RejectedInputError(f"expected a vector or a 2-D batch, got shape {x.shape}")


def mlp_forward(stack: MLPStack, x: np.ndarray) -> Tuple[np.ndarray, MLPCache]:
    batch, squeeze = _as_batch(x)
    if batch.shape[1] != stack.in_dim:
        raise RejectedInputError(f"input dim {batch.shape[1]} != stack input dim {stack.in_dim}")

    inputs: List[np.ndarray] = []
    pre_activations: List[np.ndarray] = []
    activation = batch
    for layer in stack.layers:
        inputs.append(activation)
        activation, z = layer_forward(layer, activation)
        pre_activations.append(z)

    cache = MLPCache(
        inputs=inputs,
        pre_activations=pre_activations,
        layer_shapes=tuple(layer.weight.shape for layer in stack.layers),
        squeeze=squeeze,
    )
    return (activation[0] if squeeze else activation), cache


def mlp_backward(
    stack: MLPStack,
    cache: MLPCache,
    dL_dy: np.ndarray,
    *,
    need_param_grads: bool = True,
) -> Tuple[Optional[List[Dict[str, np.ndarray]]], np.ndarray]:
    """
    Exact gradients of the forward map.

    Returns (per-layer gradient dicts or None, dL/dx). Pass
    `need_param_grads=False` for frozen stacks that only relay gradients.
    """
    shapes = tuple(layer.weight.shape for layer in stack.layers)
    if shapes != cache.layer_shapes or len(cache.inputs) != len(stack.layers):
        raise RejectedInputError("forward cache does not belong to this stack")

    delta, _ = _as_batch(dL_dy)
    expected = cache.pre_activations[-1].shape
    if delta.shape != expected:
        raise RejectedInputError(f"upstream gradient shape {delta.shape} != output shape {expected}")

    layer_grads: List[Dict[str, np.ndarray]] = [None] * len(stack.layers)  # type: ignore[list-item]
    for index in range(len(stack.layers) - 1, -1, -1):
        grads, delta = layer_backward(
            stack.layers[index],
            cache.inputs[index],
            cache.pre_activations[index],
            delta,
            need_param_grads=need_param_grads,
        )
        layer_grads[index] = grads

    dL_dx = delta[0] if cache.squeeze else delta
    return (layer_grads if need_param_grads else None), dL_dx


def stack_parameters(stack: MLPStack, prefix: str, *, compact: bool = False) -> Dict[str, np.ndarray]:
    """
    Name → live array mapping for a stack.

    compact=True yields `prefix.w0`, `prefix.b0`; otherwise `prefix.layer0.w`.
    """
    named: Dict[str, np.ndarray] = {}
    for index, layer in enumerate(stack.layers):
        names = _layer_names(prefix, index, compact)
        named[names["weight"]] = layer.weight
        named[names["bias"]] = layer.bias
        if layer.learned_slope:
            named[names["slope"]] = layer.slope
    return named


def stack_gradients(
    layer_grads: Iterable[Dict[str, np.ndarray]], prefix: str, *, compact: bool = False
) -> Dict[str, np.ndarray]:
    named: Dict[str, np.ndarray] = {}
    for index, grads in enumerate(layer_grads):
        names = _layer_names(prefix, index, compact)
        for key, value in grads.items():
            named[names[key]] = value
    return named


def _layer_names(prefix: str, index: int, compact: bool) -> Dict[str, str]:
    if compact:
        return {
            "weight": f"{prefix}.w{index}",
            "bias": f"{prefix}.b{index}",
            "slope": f"{prefix}.slope{index}",
        }
    return {
        "weight": f"{prefix}.layer{index}.w",
        "bias": f"{prefix}.layer{index}.b",
        "slope": f"{prefix}.layer{index}.slope",
    }


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Bias-corrected Adam update, applied in place to `params`.

    Every gradient is checked before any parameter moves, so a non-finite
    tensor leaves the model untouched.
    """
    for name, grad in grads.items():
        if name not in params:
            raise RejectedInputError(f"gradient for unknown parameter '{name}'")
        if grad.shape != params[name].shape:
            raise RejectedInputError(f"gradient shape {grad.shape} != parameter shape {params[name].shape} for '{name}'")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradientError(name)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        param = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(param)
            state.first_moment[name] = m
        v = state.second_moment.get(name)
        if v is None:
            v = np.zeros_like(param)
            state.second_moment[name] = v
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def finite_diff_check(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x: np.ndarray,
    h: float = 1e-5,
    *,
    indices: Optional[Sequence[int]] = None,
) -> float:
    """
    Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `f` returns (value, analytic gradient). `indices` restricts the check to a
    subset of flat coordinates for large parameter vectors. NaN propagates as
    the failure value.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    coords = range(flat.size) if indices is None else indices

    worst = 0.0
    for i in coords:
        original = flat[i]
        flat[i] = original + h
        plus, _ = f(x)
        flat[i] = original - h
        minus, _ = f(x)
        flat[i] = original
        numeric = (plus - minus) / (2.0 * h)
        error = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        if np.isnan(error):
            return float("nan")
        worst = max(worst, float(error))
    return worst


def svd_smallest(A: np.ndarray) -> np.ndarray:
    """Unit vector v minimizing ||A v|| (right singular vector of the smallest singular value)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 2:
        raise RejectedInputError(f"svd_smallest needs rows >= 1 and cols >= 2, got {A.shape}")
    _, _, vt = np.linalg.svd(A, full_matrices=True)
    v = vt[-1]
    return v / np.linalg.norm(v)
