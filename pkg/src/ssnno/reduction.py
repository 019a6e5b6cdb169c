"""Order reduction by freezing low-variance states at their training mean.

States whose sample variance stays at or below a threshold barely move over
the training data, so they are replaced by their mean and folded into the
biases of the first layer of each subnetwork.  Only those first layers and
the rows of the last state layer change; no retraining happens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .benchmark import Dataset
from .core_model import (
    MODEL_SCHEMA_VERSION,
    LayerParams,
    SsnnArchitecture,
    SsnnModel,
    Trajectory,
    is_variance_ordered,
    model_from_dict,
    model_to_dict,
    simulate,
    variance_stats,
)

REDUCED_SCHEMA_VERSION = "ssnno-model-reduced/1"

ORDERING_SLACK = 1e-12


class VarianceOrderingError(ValueError):
    """Raised when state variances are not non-increasing."""


@dataclass(frozen=True)
class SignificanceReport:
    """Variance-threshold classification of states into significant and residual."""

    delta: float
    variances: np.ndarray
    significant_count: int
    residual_mean: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=float))
        object.__setattr__(self, "residual_mean", np.asarray(self.residual_mean, dtype=float))


@dataclass(frozen=True)
class ReducedModel:
    """Order-s network with residual-state means absorbed into first-layer biases."""

    model: SsnnModel
    delta: float
    residual_mean: np.ndarray
    source_order: int

    def __post_init__(self):
        object.__setattr__(self, "residual_mean", np.asarray(self.residual_mean, dtype=float))

    @property
    def order(self) -> int:
        return self.model.state_dim

    @property
    def state_layers(self):
        return self.model.state_layers

    @property
    def output_layers(self):
        return self.model.output_layers

    @property
    def x0(self) -> np.ndarray:
        return self.model.x0


def classify_states(model: SsnnModel, data: Dataset, delta: float) -> SignificanceReport:
    """Count significant states (variance strictly above ``delta``) on the training window.

    The model must already have non-increasing state variances; otherwise run
    the ordered-variance repair loop (``training.repair_variance_ordering``)
    before reducing.
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    stats = variance_stats(simulate(model, data.U_train).states)
    if not is_variance_ordered(stats, slack=ORDERING_SLACK):
        raise VarianceOrderingError(
            f"state variances are not non-increasing ({stats.variances}); "
            "run training.repair_variance_ordering first"
        )
    s = int(np.sum(stats.variances > delta))
    return SignificanceReport(
        delta=delta,
        variances=stats.variances,
        significant_count=s,
        residual_mean=stats.mean[s:],
    )


def reduce(model: SsnnModel, report: SignificanceReport) -> ReducedModel:
    """Build the order-s model; exact whenever the residual states are constant."""
    d, m = model.state_dim, model.input_dim
    s = report.significant_count
    if report.variances.shape[0] != d:
        raise ValueError("report does not match the model order")
    if s < 1:
        raise ValueError("threshold removes every state; lower delta")
    xr = report.residual_mean

    state_layers = list(model.state_layers)
    last = len(state_layers) - 1

    first = state_layers[0]
    kept = np.hstack([first.weights[:, :s], first.weights[:, d:]])  # significant + input columns
    bias = first.bias + first.weights[:, s:d] @ xr
    state_layers[0] = LayerParams(weights=kept, bias=bias, activation=first.activation)

    tail = state_layers[last]
    state_layers[last] = LayerParams(
        weights=tail.weights[:s, :], bias=tail.bias[:s], activation=tail.activation
    )

    output_layers = list(model.output_layers)
    head = output_layers[0]
    output_layers[0] = LayerParams(
        weights=head.weights[:, :s],
        bias=head.bias + head.weights[:, s:] @ xr,
        activation=head.activation,
    )

    arch = SsnnArchitecture(
        state_dim=s,
        input_dim=m,
        output_dim=model.output_dim,
        state_layer_widths=model.arch.state_layer_widths[:-1] + (s,),
        output_layer_widths=model.arch.output_layer_widths,
    )
    reduced = SsnnModel(
        arch=arch,
        state_layers=tuple(state_layers),
        output_layers=tuple(output_layers),
        x0=model.x0[:s],
    )
    return ReducedModel(model=reduced, delta=report.delta, residual_mean=xr, source_order=d)


def reduced_simulate(rm: ReducedModel, U: np.ndarray) -> Trajectory:
    """Roll the reduced recursion forward; same contract as the full simulate."""
    return simulate(rm.model, U)


# --- serialization --------------------------------------------------------------


def reduced_to_dict(rm: ReducedModel) -> dict:
    doc = model_to_dict(rm.model)
    doc["version"] = REDUCED_SCHEMA_VERSION
    doc["reduction"] = {
        "delta": rm.delta,
        "significant_count": rm.order,
        "source_order": rm.source_order,
        "residual_mean": rm.residual_mean.tolist(),
    }
    return doc


def reduced_from_dict(doc: dict) -> ReducedModel:
    if doc.get("version") != REDUCED_SCHEMA_VERSION:
        raise ValueError(f"unsupported reduced-model document version: {doc.get('version')!r}")
    inner = dict(doc)
    inner["version"] = MODEL_SCHEMA_VERSION
    info = doc["reduction"]
    return ReducedModel(
        model=model_from_dict(inner),
        delta=float(info["delta"]),
        residual_mean=np.asarray(info["residual_mean"], dtype=float),
        source_order=int(info["source_order"]),
    )


def save_reduced(rm: ReducedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(reduced_to_dict(rm), indent=1))


def load_reduced(path: str | Path) -> ReducedModel:
    return reduced_from_dict(json.loads(Path(path).read_text()))
