"""Shared fixtures: the benchmark dataset and the trained models reused across suites.

The expensive fixtures are session-scoped so the CSTR training runs happen
once for the whole test run.
"""

import numpy as np
import pytest

import ssnno as s

EXPERIMENT_SEED = 0
EXPERIMENT_ALPHA = 0.0025
EXPERIMENT_BETA = 0.25
TRAIN_BUDGET = 800
N_SEEDS = 5


def experiment_arch() -> s.SsnnArchitecture:
    """d=3 with one hidden layer of 3 in each subnetwork."""
    return s.SsnnArchitecture(
        state_dim=3, input_dim=1, output_dim=1,
        state_layer_widths=(3, 3), output_layer_widths=(3, 1),
    )


def experiment_weights() -> s.LossWeights:
    return s.LossWeights.default(3, EXPERIMENT_ALPHA, EXPERIMENT_BETA)


@pytest.fixture(scope="session")
def cstr_dataset() -> s.Dataset:
    U = s.generate_input(seed=EXPERIMENT_SEED)
    sim = s.SimConfig(seed=EXPERIMENT_SEED, noise_std=0.05)
    return s.generate_dataset(s.CstrParams(), sim, U)


@pytest.fixture(scope="session")
def best_of_five(cstr_dataset) -> s.TrainReport:
    """Best of five seeded runs by final training loss (the evaluation protocol)."""
    arch = experiment_arch()
    weights = experiment_weights()
    best = None
    for seed in range(N_SEEDS):
        cfg = s.TrainConfig(max_iterations=TRAIN_BUDGET, seed=seed)
        report = s.train(cstr_dataset, arch, weights, cfg)
        if best is None or report.loss_history[-1].total < best.loss_history[-1].total:
            best = report
    return best


@pytest.fixture(scope="session")
def reduced_order_two(best_of_five, cstr_dataset) -> s.ReducedModel:
    report = s.classify_states(best_of_five.model, cstr_dataset, 0.0005)
    return s.reduce(best_of_five.model, report)


def split_mse(net, data: s.Dataset) -> tuple[float, float]:
    """Train/test MSE with the test split continuing from the end-of-training state."""
    traj = s.simulate(net, data.U)
    split = data.split_index
    r_tr = data.Y_train - traj.outputs[:, :split]
    r_ts = data.Y_test - traj.outputs[:, split:]
    return (
        float((r_tr * r_tr).sum() / split),
        float((r_ts * r_ts).sum() / (data.n_samples - split)),
    )


def random_architecture(rng: np.random.Generator) -> s.SsnnArchitecture:
    d = int(rng.integers(1, 4))
    m = int(rng.integers(1, 3))
    p = int(rng.integers(1, 3))
    state_widths = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(0, 2)))) + (d,)
    output_widths = tuple(int(rng.integers(1, 5)) for _ in range(int(rng.integers(0, 2)))) + (p,)
    return s.SsnnArchitecture(d, m, p, state_widths, output_widths)
