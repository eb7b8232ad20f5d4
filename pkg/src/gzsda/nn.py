"""Dense numerical core: parameters, MLPs with hand-written backward passes, Adam.

Everything here operates on 2-D ``float64`` numpy arrays with rows as samples.
Gradients accumulate as sums over the batch; any averaging happens once, in the
loss that produces the upstream gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer step meets a NaN or infinite gradient."""


class NonDeterminismError(RuntimeError):
    """Raised when a loss closure returns different values at the same point."""


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(seed))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


class Parameter:
    """A trainable matrix with its gradient and Adam moment buffers."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.array(value, dtype=np.float64)
        if self.value.ndim != 2:
            raise ShapeError(f"parameter {name!r} must be 2-D, got shape {self.value.shape}")
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class MlpCache:
    inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)


class Mlp:
    """Fully-connected network with ReLU after every layer but the last.

    Parameters
    ----------
    sizes : sequence of int
        Layer widths including the input, e.g. ``(10, 6, 6)`` is two layers.
    rng : numpy Generator, optional
        Source for Glorot-uniform weights. Without it all weights start at zero.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, name: str = "mlp"):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeError(f"invalid layer sizes {sizes}")
        self.sizes = tuple(sizes)
        self.name = name
        self.layers: list[tuple[Parameter, Parameter]] = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = glorot_uniform(n_in, n_out, rng) if rng is not None else np.zeros((n_in, n_out))
            self.layers.append(
                (Parameter(w, f"{name}.{i}.weight"), Parameter(np.zeros((1, n_out)), f"{name}.{i}.bias"))
            )

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"{self.name}: expected input with {self.in_dim} columns, got {x.shape}")
        cache = MlpCache()
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            cache.inputs.append(h)
            a = matmul(h, w.value) + b.value
            cache.pre_activations.append(a)
            h = a if i == last else np.maximum(a, 0.0)
        return h, cache

    def backward(self, cache: MlpCache, output_grad: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input."""
        if len(cache.inputs) != len(self.layers):
            raise ShapeError(f"{self.name}: cache has {len(cache.inputs)} layers, network has {len(self.layers)}")
        expected = cache.pre_activations[-1].shape
        if output_grad.shape != expected:
            raise ShapeError(f"{self.name}: output gradient shape {output_grad.shape} != {expected}")
        g = output_grad
        for i in range(len(self.layers) - 1, -1, -1):
            w, b = self.layers[i]
            if i != len(self.layers) - 1:
                # subgradient of ReLU at exactly 0 is 0
                g = g * (cache.pre_activations[i] > 0.0)
            w.grad += cache.inputs[i].T @ g
            b.grad += g.sum(axis=0, keepdims=True)
            g = g @ w.value.T
        return g


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


@dataclass
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def adam_step(params: Sequence[Parameter], config: AdamConfig) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {p.name!r}")
    config.step_count += 1
    t = config.step_count
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for p in params:
        p.adam_m *= b1
        p.adam_m += (1.0 - b1) * p.grad
        p.adam_v *= b2
        p.adam_v += (1.0 - b2) * p.grad**2
        m_hat = p.adam_m / correction1
        v_hat = p.adam_v / correction2
        p.value -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        p.zero_grad()


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, num_classes = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match {n} logit rows")
    if n and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    loss = -log_probs[rows, labels].mean() if n else 0.0
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= max(n, 1)
    return float(loss), grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    num_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def grad_check(
    loss_fn: Callable[[], float],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must return the scalar loss and accumulate its analytic
    gradient into each parameter's ``grad``. Any randomness inside it has to be
    frozen; two evaluations at the same point must agree bit for bit.

    All coordinates are checked unless ``max_coords`` is given, in which case a
    seeded sample of at least 50 coordinates is drawn.
    """
    for p in params:
        p.zero_grad()
    base = loss_fn()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    again = loss_fn()
    if base != again:
        raise NonDeterminismError(f"loss changed between identical evaluations: {base!r} vs {again!r}")

    coords = [(k, idx) for k, p in enumerate(params) for idx in np.ndindex(p.shape)]
    if max_coords is not None and len(coords) > max(max_coords, 50):
        pick = make_rng(seed).choice(len(coords), size=max(max_coords, 50), replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst, worst_name = 0.0, ""
    for k, idx in coords:
        p = params[k]
        original = p.value[idx]
        p.value[idx] = original + h
        plus = loss_fn()
        p.value[idx] = original - h
        minus = loss_fn()
        p.value[idx] = original
        numeric = (plus - minus) / (2.0 * h)
        a = analytic[k][idx]
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        if err > worst:
            worst, worst_name = err, f"{p.name}{list(idx)}"
    for p in params:
        p.zero_grad()
    return GradCheckReport(float(worst), worst_name, len(coords), tolerance)
