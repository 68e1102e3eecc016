import numpy as np
import pytest

from obswave.carleman import (
    CarlemanWeight,
    assemble_coefficients,
    bisect_lambda0,
    build_carleman_weight,
    composite_refinement_slope,
    constant_vector_field,
    flux_identity_residual,
    gradient_form_certificate,
    pointwise_identity_residual,
    polynomial_field,
    quadratic_variation_check,
    sample_interior_points,
    standing_wave_field,
    velocity_coefficient_nodal,
    zero_order_leading_coeff,
    zero_order_lower_bound,
    SmoothField,
)
from obswave.errors import InvalidParameters
from obswave.geometry import Grid, MetricField, QuadraticWeight

LAM, C0, C1 = 2.0, 1.0, 0.7


@pytest.fixture(scope="module")
def cw(bench_weight, bench_metric, bench_grid, bench_window):
    return build_carleman_weight(
        bench_weight, bench_metric, bench_grid, LAM, C0, C1, window=bench_window
    )


@pytest.fixture(scope="module")
def points(bench_grid):
    return sample_interior_points(bench_grid, 100, seed=314)


class TestBuild:
    def test_midtime_value(self, cw, bench_grid):
        x = bench_grid.points()
        l_mid = LAM * 4.0 * (x[..., 0] + 1.0) ** 2
        got = np.array(
            [cw.l(bench_grid.T / 2.0, xi) for xi in x.reshape(-1, 1)]
        )
        assert np.max(np.abs(got - l_mid)) <= 1e-12 * np.max(np.abs(l_mid))

    def test_time_curvature_by_differences(self, cw):
        # l is exactly quadratic in t, so the second difference is exact at
        # any step; a large one avoids cancellation noise
        dt = 0.5
        x = np.array([0.4])
        t = 3.3
        num = (cw.l(t + dt, x) - 2.0 * cw.l(t, x) + cw.l(t - dt, x)) / dt**2
        assert abs(num - (-2.0 * LAM * C1)) <= 1e-8 * abs(2.0 * LAM * C1)

    def test_requires_positive_lambda(self, bench_weight, bench_metric, bench_grid):
        with pytest.raises(InvalidParameters):
            build_carleman_weight(bench_weight, bench_metric, bench_grid, 0.0, C0, C1)

    def test_requires_admissible_window(self, bench_metric):
        g = Grid(lo=(0.0,), hi=(1.0,), nx=(51,), T=6.0, nt=900)  # T < T0 = 8
        m = MetricField.identity(g, s0=0.5)
        with pytest.raises(InvalidParameters):
            build_carleman_weight(QuadraticWeight(4.0, (-1.0,)), m, g, 2.0, C0, C1)

    def test_theta_range(self, cw, bench_grid):
        # exp(-lam c1 T^2/4 + lam min d) <= theta <= exp(lam max d) on the cylinder
        lo = np.exp(-LAM * C1 * bench_grid.T**2 / 4.0 + LAM * 4.0)
        hi = np.exp(LAM * 16.0)
        for t in np.linspace(0, bench_grid.T, 9):
            for xv in np.linspace(0, 1, 11):
                th = cw.theta(t, np.array([xv]))
                assert lo * (1 - 1e-12) <= th <= hi * (1 + 1e-12)


class TestVelocityCoefficient:
    def test_equals_lam_c0(self, cw):
        coeff = velocity_coefficient_nodal(cw)
        assert np.max(np.abs(coeff - LAM * C0)) == 0.0


class TestPointwiseIdentity:
    def test_standing_wave_roundoff(self, cw, points):
        for p in points:
            res, scale = pointwise_identity_residual(standing_wave_field(1), cw, p)
            assert abs(res) <= 1e-8 * scale

    def test_polynomial_roundoff(self, cw, points):
        for p in points:
            res, scale = pointwise_identity_residual(polynomial_field(1), cw, p)
            assert abs(res) <= 1e-8 * scale

    def test_zero_field_exact(self, cw):
        zero = SmoothField(
            value=lambda t, x: 0.0,
            dt=lambda t, x: 0.0,
            dtt=lambda t, x: 0.0,
            dx=lambda t, x: np.zeros(1),
            dxt=lambda t, x: np.zeros(1),
            dxx=lambda t, x: np.zeros((1, 1)),
        )
        res, _ = pointwise_identity_residual(zero, cw, (2.0, np.array([0.5])))
        assert res == 0.0

    def test_composite_refinement_order2(self, cw, points):
        slope, medians = composite_refinement_slope(
            standing_wave_field(1), cw, points[:20], [0.02, 0.01, 0.005, 0.0025]
        )
        assert 1.8 <= slope <= 2.2
        assert medians[-1] < medians[0]

    def test_nodal_metric_rejected(self, bench_grid, bench_weight):
        x = bench_grid.axes()[0]
        m = MetricField.from_nodes(bench_grid, (1.0 + 0.1 * x,), s0=0.5)
        cw_var = CarlemanWeight(
            weight=bench_weight, metric=m, grid=bench_grid, lam=LAM, c0=C0, c1=C1
        )
        with pytest.raises(InvalidParameters):
            pointwise_identity_residual(
                standing_wave_field(1), cw_var, (1.0, np.array([0.5]))
            )


class TestFluxIdentity:
    def test_constant_direction_roundoff(self, bench_metric, points):
        u = standing_wave_field(1)
        h = constant_vector_field([1.0])
        for p in points:
            res, scale = flux_identity_residual(u, h, bench_metric, p)
            assert abs(res) <= 1e-8 * scale

    def test_zero_field(self, bench_metric):
        zero = SmoothField(
            value=lambda t, x: 0.0,
            dt=lambda t, x: 0.0,
            dtt=lambda t, x: 0.0,
            dx=lambda t, x: np.zeros(1),
            dxt=lambda t, x: np.zeros(1),
            dxx=lambda t, x: np.zeros((1, 1)),
        )
        res, _ = flux_identity_residual(
            zero, constant_vector_field([1.0]), bench_metric, (1.0, np.array([0.5]))
        )
        assert res == 0.0

    def test_zero_direction(self, bench_metric):
        res, scale = flux_identity_residual(
            standing_wave_field(1),
            constant_vector_field([0.0]),
            bench_metric,
            (1.0, np.array([0.5])),
        )
        assert res == 0.0 and scale == 1e-300  # both sides identically zero

    def test_time_dependent_direction(self, bench_metric, points):
        from obswave.carleman import SmoothVectorField

        h = SmoothVectorField(
            value=lambda t, x: np.array([np.cos(t) * (1.0 + x[0])]),
            dt=lambda t, x: np.array([-np.sin(t) * (1.0 + x[0])]),
            dx=lambda t, x: np.array([[np.cos(t)]]),
        )
        u = standing_wave_field(1)
        for p in points[:30]:
            res, scale = flux_identity_residual(u, h, bench_metric, p)
            assert abs(res) <= 1e-8 * scale


class TestCoefficientFields:
    def test_degenerate_constant_weight_algebra(self, bench_grid):
        # constant d with c1 = 0: every l-derivative vanishes, so per the
        # defining formulas A = lam*c0 and B = A*Psi = -(lam*c0)^2
        m = MetricField.identity(bench_grid, s0=0.5)
        const_w = QuadraticWeight(scale=0.0, center=(-1.0,), shift=1.0)
        cw0 = CarlemanWeight(
            weight=const_w, metric=m, grid=bench_grid, lam=3.0, c0=C0, c1=0.0
        )
        fields = assemble_coefficients(cw0, times=np.array([0.0, 5.0]))
        assert np.allclose(fields.aux, 3.0 * C0)
        assert np.allclose(fields.zero_order, -((3.0 * C0) ** 2))

    def test_certificate_at_lambda_20(
        self, bench_weight, bench_metric, bench_grid, bench_window
    ):
        cw20 = build_carleman_weight(
            bench_weight, bench_metric, bench_grid, 20.0, C0, C1, window=bench_window
        )
        fields = assemble_coefficients(cw20, times=np.linspace(0, 10, 41))
        assert fields.zero_order.min() >= zero_order_lower_bound(cw20, bench_window)

    def test_lambda0_bisect(self, bench_weight, bench_metric, bench_grid, bench_window):
        lam0 = bisect_lambda0(
            bench_weight, bench_metric, bench_grid, C0, C1, window=bench_window
        )
        assert 0.0 < lam0 < 20.0

    def test_cubic_fit_matches_leading_coeff(
        self, bench_weight, bench_metric, bench_grid, bench_window
    ):
        times = np.array([0.0, 2.5, 5.0])
        lams = np.array([10.0, 20.0, 40.0, 80.0])
        fields = [
            assemble_coefficients(
                build_carleman_weight(
                    bench_weight, bench_metric, bench_grid, lam, C0, C1,
                    window=bench_window,
                ),
                times=times,
            ).zero_order
            for lam in lams
        ]
        stacked = np.stack(fields).reshape(len(lams), -1)
        cubic = np.polyfit(lams, stacked, 3)[0]
        lead = zero_order_leading_coeff(
            build_carleman_weight(
                bench_weight, bench_metric, bench_grid, 10.0, C0, C1,
                window=bench_window,
            ),
            times=times,
        ).reshape(-1)
        assert np.max(np.abs(cubic - lead) / np.abs(lead)) <= 0.05

    def test_gradient_form_certificate(self, cw, bench_weight):
        assert gradient_form_certificate(cw, bench_weight.mu0) >= -1e-10


@pytest.fixture(scope="module")
def qv_weight():
    g = Grid(lo=(0.0,), hi=(1.0,), nx=(51,), T=1.0, nt=200)
    m = MetricField.identity(g, s0=0.5)
    return CarlemanWeight(
        weight=QuadraticWeight(4.0, (-1.0,)), metric=m, grid=g,
        lam=0.5, c0=C0, c1=C1,
    )


class TestQuadraticVariation:
    def test_zero_sigma(self, qv_weight):
        rep = quadratic_variation_check(
            lambda x: np.zeros_like(x), lambda x: (np.zeros_like(x),),
            qv_weight, n_paths=100, master_seed=1,
        )
        assert rep.mc_value == 0.0 and rep.closed_form == 0.0

    def test_sine_profile_within_monte_carlo_error(self, qv_weight):
        rep = quadratic_variation_check(
            lambda x: np.sin(np.pi * x),
            lambda x: (np.pi * np.cos(np.pi * x),),
            qv_weight, n_paths=4000, master_seed=5,
        )
        assert abs(rep.mc_value - rep.closed_form) <= 3.0 * rep.std_error

    def test_doubling_paths_shrinks_stderr(self, qv_weight):
        kw = dict(master_seed=9)
        r1 = quadratic_variation_check(
            lambda x: np.sin(np.pi * x),
            lambda x: (np.pi * np.cos(np.pi * x),),
            qv_weight, n_paths=2000, **kw,
        )
        r2 = quadratic_variation_check(
            lambda x: np.sin(np.pi * x),
            lambda x: (np.pi * np.cos(np.pi * x),),
            qv_weight, n_paths=4000, **kw,
        )
        assert 0.6 <= r2.std_error / r1.std_error <= 0.82
