import numpy as np
import pytest
from scipy.integrate import quad

from obswave.errors import DegenerateEnsemble
from obswave.geometry import Grid, MetricField, QuadraticWeight, compute_observation_boundary
from obswave.observability import (
    boundary_flux_series,
    check_hidden_regularity,
    initial_norm_sq,
    observe_boundary,
    observe_internal,
    trace_norm_sq,
    unique_continuation_probe,
    verify_observability,
)
from obswave.spde import ProblemSpec, Trajectory, random_fourier_data, sample_brownian, solve, zero_path


def standing_wave(grid):
    x = grid.axes()[0]
    return np.sin(np.pi * x), np.zeros(grid.nx)


@pytest.fixture(scope="module")
def wave_traj(bench_grid, bench_metric):
    spec = ProblemSpec(bench_metric)
    return solve(standing_wave(bench_grid), spec, zero_path(bench_grid.nt, bench_grid.dt))


@pytest.fixture(scope="module")
def zero_traj(bench_grid, bench_metric):
    spec = ProblemSpec(bench_metric)
    zero = np.zeros(bench_grid.nx)
    return solve((zero, zero), spec, zero_path(bench_grid.nt, bench_grid.dt))


class TestBoundaryTrace:
    def test_zero_trajectory(self, zero_traj, bench_partition):
        tr = observe_boundary(zero_traj, bench_partition)
        assert np.all(tr.values == 0.0)
        assert trace_norm_sq(tr) == 0.0

    def test_standing_wave_pointwise(self, wave_traj, bench_partition, bench_grid):
        tr = observe_boundary(wave_traj, bench_partition)
        exact = -np.pi * np.cos(np.pi * bench_grid.times())
        err = np.abs(tr.values[:, 0] - exact).max()
        # one-sided stencil + accumulated solver phase error, both O(h^2)
        assert err <= 200.0 * (bench_grid.h[0] ** 2 + bench_grid.dt**2)

    def test_standing_wave_norm(self, wave_traj, bench_partition):
        got = trace_norm_sq(observe_boundary(wave_traj, bench_partition))
        assert abs(got - 5.0 * np.pi**2) <= 0.01 * 5.0 * np.pi**2

    def test_trace_convergence_order(self, bench_metric):
        errs = []
        for nx, nt in [(51, 1500), (101, 3000)]:
            g = Grid(lo=(0.0,), hi=(1.0,), nx=(nx,), T=5.0, nt=nt)
            m = MetricField.identity(g, s0=0.5)
            w = QuadraticWeight(4.0, (-1.0,))
            part = compute_observation_boundary(w, m, g, 0.2)
            traj = solve(standing_wave(g), ProblemSpec(m), zero_path(g.nt, g.dt))
            tr = observe_boundary(traj, part)
            exact = -np.pi * np.cos(np.pi * g.times())
            errs.append(np.abs(tr.values[:, 0] - exact).max())
        assert 2.5 <= errs[0] / errs[1] <= 6.0

    def test_linearity(self, bench_grid, bench_metric, bench_partition):
        spec = ProblemSpec(bench_metric, b4=0.5)
        p = sample_brownian(3, 0, bench_grid.nt, bench_grid.dt)
        u = random_fourier_data(bench_grid, 8, 0, 3)
        v = random_fourier_data(bench_grid, 8, 1, 3)
        a, b = 1.7, -0.6
        t_comb = solve((a * u[0] + b * v[0], a * u[1] + b * v[1]), spec, p)
        t_u = solve(u, spec, p)
        t_v = solve(v, spec, p)
        tr_comb = observe_boundary(t_comb, bench_partition).values
        tr_lin = (
            a * observe_boundary(t_u, bench_partition).values
            + b * observe_boundary(t_v, bench_partition).values
        )
        scale = np.abs(tr_comb).max()
        assert np.abs(tr_comb - tr_lin).max() <= 1e-10 * scale


class TestInternalTrace:
    def test_zero_trajectory(self, zero_traj, bench_partition):
        tr = observe_internal(zero_traj, bench_partition)
        assert np.all(tr.values == 0.0)

    def test_standing_wave_collar_norm(self, wave_traj, bench_partition):
        got = trace_norm_sq(observe_internal(wave_traj, bench_partition))
        sx = quad(lambda x: (np.pi * np.cos(np.pi * x)) ** 2, 0.8, 1.0)[0]
        st = quad(lambda t: np.cos(np.pi * t) ** 2, 0.0, 10.0)[0]
        assert abs(got - sx * st) <= 0.01 * sx * st

    def test_monotone_in_delta(self, wave_traj, bench_grid, bench_metric, bench_weight):
        small = compute_observation_boundary(bench_weight, bench_metric, bench_grid, 0.2)
        full = compute_observation_boundary(bench_weight, bench_metric, bench_grid, 2.0)
        assert full.collar_mask.all()
        n_small = trace_norm_sq(observe_internal(wave_traj, small))
        n_full = trace_norm_sq(observe_internal(wave_traj, full))
        assert n_full >= n_small


class TestHiddenRegularity:
    def test_zero_data(self, zero_traj, bench_partition, bench_metric):
        spec = ProblemSpec(bench_metric)
        rep = check_hidden_regularity([zero_traj], spec, bench_partition, C=10.0)
        assert rep.ok and rep.lhs == 0.0

    def test_standing_wave(self, wave_traj, bench_partition, bench_metric):
        spec = ProblemSpec(bench_metric)
        rep = check_hidden_regularity([wave_traj], spec, bench_partition, C=10.0)
        assert rep.ok
        # trace ~ 5 pi^2, data energy ~ pi^2/2: ratio ~ 10, so C e^C >= 10
        assert 1.0 < rep.empirical_C < 3.0

    def test_noisy_ensemble(self, bench_grid, bench_metric, bench_partition):
        spec = ProblemSpec(
            bench_metric, b4=1.0, g=lambda t, x: np.sin(np.pi * x)
        )
        paths = [sample_brownian(5, i, bench_grid.nt, bench_grid.dt) for i in range(20)]
        trajs = [solve(standing_wave(bench_grid), spec, p) for p in paths]
        rep = check_hidden_regularity(trajs, spec, bench_partition, C=10.0)
        assert rep.ok and np.isfinite(rep.empirical_C)


class TestObservabilityVerification:
    def test_zero_ensemble_passes(self, zero_traj, bench_partition, bench_metric):
        spec = ProblemSpec(bench_metric)
        zero = np.zeros(bench_partition.grid.nx)
        rep = verify_observability(
            [((zero, zero), zero_traj)], spec, bench_partition, "boundary", C_max=10.0
        )
        assert rep.lhs == 0.0 and rep.passed

    def test_degenerate_ensemble_aborts(self, zero_traj, bench_partition, bench_metric, bench_grid):
        spec = ProblemSpec(bench_metric)
        fake_initial = standing_wave(bench_grid)  # nonzero data, zero trajectory
        with pytest.raises(DegenerateEnsemble):
            verify_observability(
                [(fake_initial, zero_traj)], spec, bench_partition, "boundary"
            )

    def test_constants_finite_both_modes(self, bench_grid, bench_metric, bench_partition):
        spec = ProblemSpec(bench_metric, b4=0.5)
        members = []
        for m in range(8):
            data = random_fourier_data(bench_grid, 11, m % 4, 5)
            p = sample_brownian(11, m, bench_grid.nt, bench_grid.dt)
            members.append((data, solve(data, spec, p)))
        for mode in ("boundary", "internal"):
            rep = verify_observability(members, spec, bench_partition, mode)
            assert np.isfinite(rep.empirical_constant)
            assert rep.empirical_constant > 0.0

    def test_scaling_invariance(self, bench_grid, bench_metric, bench_partition):
        spec = ProblemSpec(bench_metric, b4=0.5)
        consts = {}
        for alpha in (0.1, 1.0, 10.0):
            members = []
            for m in range(4):
                data = random_fourier_data(bench_grid, 13, m, 4)
                data = (alpha * data[0], alpha * data[1])
                p = sample_brownian(13, m, bench_grid.nt, bench_grid.dt)
                members.append((data, solve(data, spec, p)))
            rep = verify_observability(members, spec, bench_partition, "boundary")
            consts[alpha] = rep.empirical_constant
        assert abs(consts[0.1] - consts[1.0]) <= 1e-8 * consts[1.0]
        assert abs(consts[10.0] - consts[1.0]) <= 1e-8 * consts[1.0]


class TestUniqueContinuation:
    def test_zero_trajectory_holds(self, zero_traj, bench_partition):
        rep = unique_continuation_probe(zero_traj, bench_partition, tol=1e-8)
        assert rep.held and rep.antecedent

    def test_standing_wave_vacuous(self, wave_traj, bench_partition):
        rep = unique_continuation_probe(wave_traj, bench_partition, tol=1e-8)
        assert rep.held and not rep.antecedent

    def test_zeroed_observation_flags_violation(self, wave_traj, bench_partition):
        rep = unique_continuation_probe(
            wave_traj, bench_partition, tol=1e-8, trace_norm_override=0.0
        )
        assert rep.antecedent and not rep.held


class TestBoundaryFlux:
    def test_standing_wave_flux(self, wave_traj, bench_grid):
        flux = boundary_flux_series(wave_traj.z, bench_grid)
        exact = 2.0 * np.pi**2 * np.cos(np.pi * bench_grid.times()) ** 2
        assert np.abs(flux - exact).max() <= 0.05 * np.pi**2
