"""State-order permutations that preserve the input-output map.

Reordering the states of a layered state-space network only touches the
state columns of the first state layer, the rows and bias of the last state
layer, the state columns of the first output layer, and the initial state;
every other parameter is untouched.  Because each layer applies one
activation elementwise, permuting the last layer's rows realizes the
permuted activation exactly, so the permuted network reproduces the original
outputs and carries permuted states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_model import LayerParams, SsnnModel, VarianceStats


@dataclass(frozen=True)
class PermutationIndex:
    """A permutation of 0..d-1; entry i names the source state of new state i."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=int)
        if z.ndim != 1 or not np.array_equal(np.sort(z), np.arange(z.shape[0])):
            raise ValueError(f"not a permutation of 0..{z.shape[0] - 1}: {z}")
        object.__setattr__(self, "z", z)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.z, np.arange(self.dim)))

    def inverse(self) -> "PermutationIndex":
        return PermutationIndex(np.argsort(self.z))

    def matrix(self) -> np.ndarray:
        """Rows of the identity rearranged by z, so (matrix @ x)[i] = x[z[i]]."""
        return np.eye(self.dim)[self.z, :]


def variance_sort_index(stats: VarianceStats) -> PermutationIndex:
    """Index that sorts state variances in non-increasing order; ties keep original order."""
    z = np.argsort(-stats.variances, kind="stable")
    return PermutationIndex(z=z)


def permute_model(model: SsnnModel, index: PermutationIndex) -> SsnnModel:
    """Equivalent model with states reordered as ``x_new[i] = x_old[z[i]]``."""
    z = index.z
    d = model.state_dim
    if index.dim != d:
        raise ValueError(f"permutation has dimension {index.dim}, model has {d} states")

    state_layers = list(model.state_layers)
    last = len(state_layers) - 1

    first = state_layers[0]
    w = first.weights.copy()
    w[:, :d] = first.weights[:, z]
    state_layers[0] = LayerParams(weights=w, bias=first.bias, activation=first.activation)

    tail = state_layers[last]
    state_layers[last] = LayerParams(
        weights=tail.weights[z, :], bias=tail.bias[z], activation=tail.activation
    )

    output_layers = list(model.output_layers)
    head = output_layers[0]
    output_layers[0] = LayerParams(
        weights=head.weights[:, z], bias=head.bias, activation=head.activation
    )

    return SsnnModel(
        arch=model.arch,
        state_layers=tuple(state_layers),
        output_layers=tuple(output_layers),
        x0=model.x0[z],
    )


def permuted_loss_check(model: SsnnModel, data, weights, index: PermutationIndex):
    """Loss breakdowns of a model and of its permuted twin.

    For the variance-sort index the prediction and parameter terms agree up
    to roundoff while the variance term of the permuted model is no larger.
    """
    from .training import loss

    original = loss(model, data, weights)
    permuted = loss(permute_model(model, index), data, weights)
    return original, permuted
