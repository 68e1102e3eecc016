import numpy as np
import pytest

from obswave.errors import DegenerateMetric, EmptyGamma0, NonPositiveWeight
from obswave.geometry import (
    Grid,
    MetricField,
    QuadraticWeight,
    TabulatedWeight,
    cfl_number,
    check_observation_window,
    check_weight_condition,
    compute_observation_boundary,
    dilate_weight,
)


def grid1d(nx=101, T=10.0, nt=1500):
    return Grid(lo=(0.0,), hi=(1.0,), nx=(nx,), T=T, nt=nt)


class TestGrid:
    def test_spacing_exact(self):
        g = grid1d(nx=51)
        assert g.h[0] == (1.0 - 0.0) / 50
        assert g.dt == 10.0 / 1500

    def test_validation(self):
        with pytest.raises(ValueError):
            Grid(lo=(0.0,), hi=(1.0,), nx=(2,), T=1.0, nt=10)
        with pytest.raises(ValueError):
            Grid(lo=(0.0,), hi=(1.0,), nx=(11,), T=1.0, nt=1)
        with pytest.raises(ValueError):
            Grid(lo=(0.0,), hi=(1.0,), nx=(11,), T=-1.0, nt=10)
        with pytest.raises(ValueError):
            Grid(lo=(1.0,), hi=(0.0,), nx=(11,), T=1.0, nt=10)

    def test_quadrature_weights_sum_to_volume(self):
        g = Grid(lo=(0.0, 0.0), hi=(2.0, 3.0), nx=(11, 16), T=1.0, nt=10)
        assert np.isclose(g.quad_weights().sum(), 6.0)
        assert np.isclose(g.time_quad_weights().sum(), 1.0)


class TestMetric:
    def test_identity_eigen_range(self):
        g = grid1d()
        m = MetricField.identity(g, s0=0.5)
        assert m.eigen_range() == (1.0, 1.0)

    def test_degenerate_raises(self):
        g = grid1d(nx=21)
        x = g.axes()[0]
        m = MetricField.from_nodes(g, (0.3 + 0.5 * x,), s0=0.5)
        with pytest.raises(DegenerateMetric):
            m.validate()

    def test_symmetry_by_storage(self):
        g = Grid(lo=(0.0, 0.0), hi=(1.0, 1.0), nx=(9, 9), T=1.0, nt=10)
        m = MetricField.constant(g, [[2.0, 0.3], [0.3, 1.0]], s0=0.5)
        mats = m.matrices()
        assert np.array_equal(mats[..., 0, 1], mats[..., 1, 0])

    def test_cfl(self):
        g = grid1d(nx=101, T=10.0, nt=1000)
        m = MetricField.identity(g, s0=0.5)
        assert np.isclose(cfl_number(g, m), g.dt / g.h[0])


class TestWeightCondition:
    def test_unit_quadratic_1d(self):
        # d = (x+1)^2: form reduces to 2 d'' = 4, gradient min is 2 at x=0
        g = grid1d()
        m = MetricField.identity(g, s0=0.5)
        rep = check_weight_condition(m, QuadraticWeight(1.0, (-1.0,)), g)
        assert abs(rep.mu0 - 4.0) < 1e-10
        assert abs(rep.min_grad - 2.0) < 1e-12
        assert rep.ok

    def test_benchmark_mu0(self, bench_grid, bench_metric):
        rep = check_weight_condition(
            bench_metric, QuadraticWeight(4.0, (-1.0,)), bench_grid
        )
        assert abs(rep.mu0 - 16.0) < 1e-6
        assert abs(rep.min_grad - 8.0) < 1e-10

    def test_2d_shifted_square_distance(self):
        g = Grid(lo=(0.0, 0.0), hi=(1.0, 1.0), nx=(21, 21), T=10.0, nt=200)
        m = MetricField.identity(g, s0=0.5)
        rep = check_weight_condition(m, QuadraticWeight(1.0, (-1.0, -1.0)), g)
        assert abs(rep.mu0 - 4.0) < 1e-8
        assert rep.ok

    def test_numeric_matches_analytic_scaling(self):
        # generalized eigenvalue equals 4a for identity metric and d = a|x-x0|^2
        g = grid1d(nx=51)
        m = MetricField.identity(g, s0=0.5)
        for a in (0.5, 2.0, 7.5):
            rep = check_weight_condition(m, QuadraticWeight(a, (-1.0,)), g)
            assert abs(rep.mu0 - 4.0 * a) <= 1e-8 * 4.0 * a

    def test_constant_weight_not_ok(self):
        g = grid1d(nx=31)
        m = MetricField.identity(g, s0=0.5)
        tw = TabulatedWeight(grid=g, values=np.full(g.nx, 2.0))
        rep = check_weight_condition(m, tw, g)
        assert rep.min_grad == 0.0
        assert not rep.ok

    def test_nonpositive_weight_raises(self):
        g = grid1d(nx=31)
        m = MetricField.identity(g, s0=0.5)
        with pytest.raises(NonPositiveWeight):
            check_weight_condition(m, QuadraticWeight(1.0, (0.5,), shift=-0.1), g)

    def test_nonconstant_metric_certificate(self):
        # variable 1-D metric: certificate must stay positive for the
        # quadratic weight with a far-away center
        g = grid1d(nx=81)
        x = g.axes()[0]
        m = MetricField.from_nodes(g, (1.0 + 0.25 * x,), s0=0.5)
        rep = check_weight_condition(m, QuadraticWeight(1.0, (-4.0,)), g)
        assert rep.ok


class TestDilation:
    def test_scales_mu0_linearly(self, bench_grid, bench_metric):
        w = QuadraticWeight(1.0, (-1.0,))
        check_weight_condition(bench_metric, w, bench_grid)
        w4 = dilate_weight(w, 4.0, 0.0, bench_grid)
        rep = check_weight_condition(bench_metric, w4, bench_grid)
        assert abs(rep.mu0 - 4.0 * 4.0) <= 1e-10 * 16.0
        assert abs(w4.mu0 - rep.mu0) <= 1e-10 * 16.0

    def test_identity_dilation(self, bench_grid):
        w = QuadraticWeight(2.0, (-1.0,), shift=0.5)
        out = dilate_weight(w, 1.0, 0.0, bench_grid)
        assert out.scale == w.scale and out.shift == w.shift

    def test_negative_shift_raises(self, bench_grid):
        w = QuadraticWeight(1.0, (-1.0,))
        with pytest.raises(NonPositiveWeight):
            dilate_weight(w, 1.0, -2.0, bench_grid)

    def test_rejects_shrinking(self, bench_grid):
        with pytest.raises(ValueError):
            dilate_weight(QuadraticWeight(1.0, (-1.0,)), 0.5, 0.0, bench_grid)

    def test_gamma0_invariant_under_dilation(self, bench_grid, bench_metric):
        w = QuadraticWeight(1.0, (-1.0,))
        wd = dilate_weight(w, 3.0, 0.5, bench_grid)
        p1 = compute_observation_boundary(w, bench_metric, bench_grid, 0.2)
        p2 = compute_observation_boundary(wd, bench_metric, bench_grid, 0.2)
        for f1, f2 in zip(p1.faces, p2.faces):
            assert np.array_equal(f1.gamma0, f2.gamma0)


class TestObservationWindow:
    def test_benchmark_values(self, bench_window):
        assert bench_window.R0 == pytest.approx(2.0, abs=1e-12)
        assert bench_window.R1 == pytest.approx(4.0, abs=1e-12)
        assert bench_window.T0 == pytest.approx(8.0, abs=1e-12)
        assert bench_window.flags == (True, True, True, True)
        assert bench_window.ok

    def test_short_time_fails_flag2(self, bench_metric):
        g = grid1d(T=6.0, nt=900)
        m = MetricField.identity(g, s0=0.5)
        w = QuadraticWeight(4.0, (-1.0,))
        check_weight_condition(m, w, g)
        rep = check_observation_window(w, m, g, 1.0, 0.7)
        assert not rep.flags[1]
        assert rep.flags[0]

    def test_small_c1_fails_flag3(self, bench_grid, bench_metric, bench_weight):
        rep = check_observation_window(
            bench_weight, bench_metric, bench_grid, 1.0, 0.5
        )
        assert not rep.flags[2]  # 0.5 < (2*4/10)^2 = 0.64

    def test_R0_le_R1(self, bench_window):
        assert bench_window.R0 <= bench_window.R1


class TestGamma0:
    def test_1d_right_end_only(self, bench_partition):
        pts = bench_partition.gamma0_points()
        assert pts.shape == (1, 1)
        assert pts[0, 0] == 1.0

    def test_2d_top_and_right(self):
        g = Grid(lo=(0.0, 0.0), hi=(1.0, 1.0), nx=(17, 17), T=10.0, nt=200)
        m = MetricField.identity(g, s0=0.5)
        w = QuadraticWeight(1.0, (-1.0, -1.0))
        part = compute_observation_boundary(w, m, g, delta=0.2)
        by_face = {(f.axis, f.side): f.gamma0 for f in part.faces}
        assert by_face[(0, 1)].all() and by_face[(1, 1)].all()  # x=1, y=1
        assert not by_face[(0, 0)].any() and not by_face[(1, 0)].any()

    def test_inward_gradient_raises(self):
        g = grid1d(nx=41)
        m = MetricField.identity(g, s0=0.5)
        x = g.axes()[0]
        tw = TabulatedWeight(grid=g, values=2.0 - (x - 0.5) ** 2)
        with pytest.raises(EmptyGamma0):
            compute_observation_boundary(tw, m, g, delta=0.1)

    def test_collar_nodes_within_delta(self, bench_partition, bench_grid):
        pts = bench_grid.points()[bench_partition.collar_mask]
        gpts = bench_partition.gamma0_points()
        for p in pts:
            assert min(np.linalg.norm(p - q) for q in gpts) <= 0.2 + 1e-9

    def test_collar_is_right_band(self, bench_partition, bench_grid):
        x = bench_grid.axes()[0]
        expected = x >= 0.8 - 1e-12
        assert np.array_equal(bench_partition.collar_mask, expected)
