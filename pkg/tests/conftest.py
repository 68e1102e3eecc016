import numpy as np
import pytest

from obswave.geometry import (
    Grid,
    MetricField,
    QuadraticWeight,
    check_observation_window,
    check_weight_condition,
    compute_observation_boundary,
)

BENCH_C0 = 1.0
BENCH_C1 = 0.7


@pytest.fixture(scope="session")
def bench_grid():
    # d = 4(x+1)^2 on (0,1), T = 10 > T0 = 8; CFL = 2/3
    return Grid(lo=(0.0,), hi=(1.0,), nx=(101,), T=10.0, nt=1500)


@pytest.fixture(scope="session")
def bench_metric(bench_grid):
    return MetricField.identity(bench_grid, s0=0.5)


@pytest.fixture(scope="session")
def bench_weight(bench_grid, bench_metric):
    w = QuadraticWeight(scale=4.0, center=(-1.0,))
    check_weight_condition(bench_metric, w, bench_grid)
    return w


@pytest.fixture(scope="session")
def bench_window(bench_weight, bench_metric, bench_grid):
    return check_observation_window(
        bench_weight, bench_metric, bench_grid, BENCH_C0, BENCH_C1
    )


@pytest.fixture(scope="session")
def bench_partition(bench_weight, bench_metric, bench_grid):
    return compute_observation_boundary(
        bench_weight, bench_metric, bench_grid, delta=0.2
    )


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.Philox(key=[20260810, 0]))
