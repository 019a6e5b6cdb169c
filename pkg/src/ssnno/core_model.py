"""Layered state-space neural network: model types, evaluation, state statistics.

A model is a pair of feedforward subnetworks plus a trainable initial state:
the state subnetwork advances ``x_{k+1} = f(x_k, u_k)`` on the concatenated
vector ``[x; u]``, the output subnetwork maps ``yhat_k = g(x_k)``.  Hidden
layers use tanh, the last layer of each subnetwork is linear.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

MODEL_SCHEMA_VERSION = "ssnno-model/1"


class ModelDimensionError(ValueError):
    """Raised when an input does not match the model's layer dimensions."""


class DivergenceError(RuntimeError):
    """Raised when a simulation produces a non-finite value.

    Attributes
    ----------
    step : int
        Index of the simulation step at which the value went non-finite.
    """

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


class ActivationKind(Enum):
    TANH = "tanh"
    LINEAR = "linear"

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self is ActivationKind.TANH:
            return np.tanh(z)
        return z

    def derivative_from_output(self, out: np.ndarray) -> np.ndarray:
        """Elementwise activation derivative expressed through the activation output."""
        if self is ActivationKind.TANH:
            return 1.0 - out * out
        return np.ones_like(out)


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ModelDimensionError(f"{name} must be a 2-D array, got ndim={arr.ndim}")
    return arr


def _as_vector(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 1:
        raise ModelDimensionError(f"{name} must be a 1-D array, got ndim={arr.ndim}")
    return arr


@dataclass(frozen=True)
class LayerParams:
    """One affine layer ``act(weights @ v + bias)``."""

    weights: np.ndarray  # (width, fan_in)
    bias: np.ndarray  # (width,)
    activation: ActivationKind

    def __post_init__(self):
        w = _as_matrix(self.weights, "weights")
        b = _as_vector(self.bias, "bias")
        if w.shape[0] != b.shape[0]:
            raise ModelDimensionError(
                f"layer width mismatch: weights have {w.shape[0]} rows, bias has length {b.shape[0]}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError("layer parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def width(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class SsnnArchitecture:
    """Widths of both subnetworks.

    ``state_layer_widths`` lists every state-subnetwork layer width; the last
    entry must equal ``state_dim``.  The first state layer consumes
    ``state_dim + input_dim`` values.  ``output_layer_widths`` is analogous,
    with the first layer consuming ``state_dim`` values and the last entry
    equal to ``output_dim``.
    """

    state_dim: int
    input_dim: int
    output_dim: int
    state_layer_widths: tuple[int, ...]
    output_layer_widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "state_layer_widths", tuple(int(w) for w in self.state_layer_widths))
        object.__setattr__(self, "output_layer_widths", tuple(int(w) for w in self.output_layer_widths))
        for name in ("state_dim", "input_dim", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if len(self.state_layer_widths) < 1 or len(self.output_layer_widths) < 1:
            raise ValueError("each subnetwork needs at least one layer")
        if any(w < 1 for w in self.state_layer_widths + self.output_layer_widths):
            raise ValueError("layer widths must be positive")
        if self.state_layer_widths[-1] != self.state_dim:
            raise ValueError(
                f"last state layer width {self.state_layer_widths[-1]} must equal state_dim {self.state_dim}"
            )
        if self.output_layer_widths[-1] != self.output_dim:
            raise ValueError(
                f"last output layer width {self.output_layer_widths[-1]} must equal output_dim {self.output_dim}"
            )

    @property
    def state_fan_ins(self) -> tuple[int, ...]:
        return (self.state_dim + self.input_dim,) + self.state_layer_widths[:-1]

    @property
    def output_fan_ins(self) -> tuple[int, ...]:
        return (self.state_dim,) + self.output_layer_widths[:-1]

    @property
    def n_state_params(self) -> int:
        return sum(w * f + w for w, f in zip(self.state_layer_widths, self.state_fan_ins))

    @property
    def n_output_params(self) -> int:
        return sum(w * f + w for w, f in zip(self.output_layer_widths, self.output_fan_ins))

    @property
    def n_params(self) -> int:
        """Full parameter count: both subnetworks plus the initial state."""
        return self.n_state_params + self.n_output_params + self.state_dim


def default_activations(n_layers: int) -> tuple[ActivationKind, ...]:
    """Hidden layers tanh, final layer linear."""
    return tuple(ActivationKind.TANH for _ in range(n_layers - 1)) + (ActivationKind.LINEAR,)


@dataclass(frozen=True)
class SsnnModel:
    """Full parameter set: state subnetwork, output subnetwork, initial state."""

    arch: SsnnArchitecture
    state_layers: tuple[LayerParams, ...]
    output_layers: tuple[LayerParams, ...]
    x0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "state_layers", tuple(self.state_layers))
        object.__setattr__(self, "output_layers", tuple(self.output_layers))
        object.__setattr__(self, "x0", _as_vector(self.x0, "x0"))
        arch = self.arch
        if self.x0.shape[0] != arch.state_dim:
            raise ModelDimensionError(f"x0 has length {self.x0.shape[0]}, expected {arch.state_dim}")
        _check_chain(self.state_layers, arch.state_layer_widths, arch.state_fan_ins, "state")
        _check_chain(self.output_layers, arch.output_layer_widths, arch.output_fan_ins, "output")

    @property
    def state_dim(self) -> int:
        return self.arch.state_dim

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    @property
    def output_dim(self) -> int:
        return self.arch.output_dim


def _check_chain(layers, widths, fan_ins, which: str):
    if len(layers) != len(widths):
        raise ModelDimensionError(f"{which} subnetwork has {len(layers)} layers, expected {len(widths)}")
    for i, (layer, width, fan_in) in enumerate(zip(layers, widths, fan_ins)):
        if layer.width != width or layer.fan_in != fan_in:
            raise ModelDimensionError(
                f"{which} layer {i}: shape {layer.weights.shape}, expected ({width}, {fan_in})"
            )


@dataclass(frozen=True)
class Trajectory:
    """Simulated state and output sequences, one column per time instant."""

    states: np.ndarray  # (d, N)
    outputs: np.ndarray  # (p, N)

    @property
    def n_samples(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class VarianceStats:
    """Sample mean, covariance and per-state variances of a state sequence."""

    mean: np.ndarray  # (d,)
    covariance: np.ndarray  # (d, d)
    variances: np.ndarray  # (d,), diagonal of covariance


def layer_forward(layer: LayerParams, value: np.ndarray, index: int | None = None) -> np.ndarray:
    """Apply a single layer to a vector (or to each column of a matrix)."""
    value = np.asarray(value, dtype=float)
    if value.shape[0] != layer.fan_in:
        where = f"layer {index}" if index is not None else "layer"
        raise ModelDimensionError(
            f"{where}: input has {value.shape[0]} rows, weights expect {layer.fan_in}"
        )
    if value.ndim == 1:
        return layer.activation.apply(layer.weights @ value + layer.bias)
    return layer.activation.apply(layer.weights @ value + layer.bias[:, None])


def state_step(model: SsnnModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One state update ``x_next = f(x, u)``."""
    x = _as_vector(x, "x")
    u = _as_vector(u, "u")
    if x.shape[0] != model.state_dim:
        raise ModelDimensionError(f"state has length {x.shape[0]}, expected {model.state_dim}")
    if u.shape[0] != model.input_dim:
        raise ModelDimensionError(f"input has length {u.shape[0]}, expected {model.input_dim}")
    v = np.concatenate([x, u])
    for i, layer in enumerate(model.state_layers):
        v = layer_forward(layer, v, index=i)
    return v


def output_map(model: SsnnModel, x: np.ndarray) -> np.ndarray:
    """Output ``yhat = g(x)``."""
    x = _as_vector(x, "x")
    if x.shape[0] != model.state_dim:
        raise ModelDimensionError(f"state has length {x.shape[0]}, expected {model.state_dim}")
    v = x
    for i, layer in enumerate(model.output_layers):
        v = layer_forward(layer, v, index=i)
    return v


def simulate(model: SsnnModel, U: np.ndarray) -> Trajectory:
    """Roll the model forward over an input sequence.

    Parameters
    ----------
    U : ndarray, shape (m, N)
        Input sequence, one column per instant; N >= 1.

    Returns
    -------
    Trajectory
        ``states[:, 0]`` is the model's initial state; ``states[:, k+1]``
        is the propagation under ``U[:, k]``; ``outputs[:, k]`` is the output
        map applied to ``states[:, k]``.

    Raises
    ------
    DivergenceError
        If any state or output value goes non-finite; carries the step index.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[None, :]
    if U.shape[0] != model.input_dim:
        raise ModelDimensionError(f"U has {U.shape[0]} rows, expected {model.input_dim}")
    n = U.shape[1]
    if n < 1:
        raise ValueError("input sequence must have at least one column")
    d, p = model.state_dim, model.output_dim
    X = np.empty((d, n))
    Y = np.empty((p, n))
    x = model.x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            X[:, k] = x
            y = output_map(model, x)
            if not np.isfinite(y).all():
                raise DivergenceError(k, f"non-finite output at step {k}")
            Y[:, k] = y
            if k < n - 1:
                x = state_step(model, x, U[:, k])
                if not np.isfinite(x).all():
                    raise DivergenceError(k + 1, f"non-finite state at step {k + 1}")
    return Trajectory(states=X, outputs=Y)


def variance_stats(X: np.ndarray) -> VarianceStats:
    """Sample mean and covariance of a state sequence (columns), ddof = 1."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ModelDimensionError("X must be a (d, N) matrix")
    n = X.shape[1]
    if n < 2:
        raise ValueError(f"need at least 2 samples for a sample covariance, got {n}")
    mean = X.mean(axis=1)
    centered = X - mean[:, None]
    cov = (centered @ centered.T) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    return VarianceStats(mean=mean, covariance=cov, variances=np.diag(cov).copy())


def is_variance_ordered(stats: VarianceStats, slack: float = 0.0) -> bool:
    """True iff per-state variances are non-increasing (up to ``slack``)."""
    if slack < 0:
        raise ValueError("slack must be non-negative")
    v = stats.variances
    return bool(np.all(v[:-1] >= v[1:] - slack))


# --- parameter vector packing -------------------------------------------------
#
# Flat layout, fixed and relied upon by the trainer and serialization:
#   state layers in order, each as row-major weights then bias,
#   then output layers likewise, then x0.


def flatten_params(model: SsnnModel) -> np.ndarray:
    """Pack all parameters into a single vector (see layout note above)."""
    parts = []
    for layer in model.state_layers + model.output_layers:
        parts.append(layer.weights.ravel())
        parts.append(layer.bias)
    parts.append(model.x0)
    return np.concatenate(parts)


def unflatten_params(
    arch: SsnnArchitecture,
    theta: np.ndarray,
    state_activations: tuple[ActivationKind, ...] | None = None,
    output_activations: tuple[ActivationKind, ...] | None = None,
) -> SsnnModel:
    """Inverse of :func:`flatten_params`.

    Activations default to the standard pattern (tanh hidden, linear last).
    """
    theta = _as_vector(theta, "theta")
    if theta.shape[0] != arch.n_params:
        raise ValueError(f"parameter vector has length {theta.shape[0]}, expected {arch.n_params}")
    if state_activations is None:
        state_activations = default_activations(len(arch.state_layer_widths))
    if output_activations is None:
        output_activations = default_activations(len(arch.output_layer_widths))

    pos = 0

    def take(width, fan_in, act):
        nonlocal pos
        w = theta[pos:pos + width * fan_in].reshape(width, fan_in)
        pos += width * fan_in
        b = theta[pos:pos + width]
        pos += width
        return LayerParams(weights=w, bias=b, activation=act)

    state_layers = tuple(
        take(w, f, a) for w, f, a in zip(arch.state_layer_widths, arch.state_fan_ins, state_activations)
    )
    output_layers = tuple(
        take(w, f, a) for w, f, a in zip(arch.output_layer_widths, arch.output_fan_ins, output_activations)
    )
    x0 = theta[pos:pos + arch.state_dim]
    return SsnnModel(arch=arch, state_layers=state_layers, output_layers=output_layers, x0=x0)


def random_model(arch: SsnnArchitecture, rng: np.random.Generator, init_scale: float = 0.5) -> SsnnModel:
    """Uniform random weights/biases in [-init_scale, init_scale]; x0 = 0."""
    n_net = arch.n_state_params + arch.n_output_params
    theta = np.concatenate([
        rng.uniform(-init_scale, init_scale, size=n_net),
        np.zeros(arch.state_dim),
    ])
    return unflatten_params(arch, theta)


# --- serialization --------------------------------------------------------------


def model_to_dict(model: SsnnModel) -> dict:
    return {
        "version": MODEL_SCHEMA_VERSION,
        "arch": {
            "state_dim": model.arch.state_dim,
            "input_dim": model.arch.input_dim,
            "output_dim": model.arch.output_dim,
            "state_layer_widths": list(model.arch.state_layer_widths),
            "output_layer_widths": list(model.arch.output_layer_widths),
        },
        "state_layers": [_layer_to_dict(l) for l in model.state_layers],
        "output_layers": [_layer_to_dict(l) for l in model.output_layers],
        "x0": model.x0.tolist(),
    }


def _layer_to_dict(layer: LayerParams) -> dict:
    return {
        "weights": layer.weights.tolist(),
        "bias": layer.bias.tolist(),
        "activation": layer.activation.value,
    }


def _layer_from_dict(doc: dict) -> LayerParams:
    return LayerParams(
        weights=np.array(doc["weights"], dtype=float),
        bias=np.array(doc["bias"], dtype=float),
        activation=ActivationKind(doc["activation"]),
    )


def model_from_dict(doc: dict) -> SsnnModel:
    version = doc.get("version")
    if version != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model document version: {version!r}")
    a = doc["arch"]
    arch = SsnnArchitecture(
        state_dim=a["state_dim"],
        input_dim=a["input_dim"],
        output_dim=a["output_dim"],
        state_layer_widths=tuple(a["state_layer_widths"]),
        output_layer_widths=tuple(a["output_layer_widths"]),
    )
    return SsnnModel(
        arch=arch,
        state_layers=tuple(_layer_from_dict(l) for l in doc["state_layers"]),
        output_layers=tuple(_layer_from_dict(l) for l in doc["output_layers"]),
        x0=np.array(doc["x0"], dtype=float),
    )


def save_model(model: SsnnModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


def load_model(path: str | Path) -> SsnnModel:
    return model_from_dict(json.loads(Path(path).read_text()))
