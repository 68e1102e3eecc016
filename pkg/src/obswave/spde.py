"""Time stepping for the stochastic wave equation with multiplicative noise.

The update is velocity-Verlet in time (algebraically identical to leapfrog
for the second-order wave part), flux-form centered differences for the
divergence operator, explicit lower-order terms, and an Euler-Maruyama noise
increment applied to the velocity with the diffusion coefficient frozen at
the left endpoint of the step.

States carry (z, z_t) on the full node set with homogeneous Dirichlet values
pinned to zero at every level. All kernels accept a leading batch axis so a
whole ensemble of noise paths advances in lockstep.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from .errors import CflViolation, NonFiniteState
from .geometry import Grid, MetricField, cfl_number

__all__ = [
    "BrownianPath",
    "sample_brownian",
    "brownian_increments",
    "random_fourier_data",
    "Coefficient",
    "NonlinearDynamics",
    "ProblemSpec",
    "StateSnapshot",
    "Trajectory",
    "step",
    "solve",
    "solve_ensemble",
    "energy",
    "state_energy",
    "EnergyReport",
    "verify_energy_estimate",
    "grad_full",
    "grad_interior",
    "div_form",
    "zero_boundary",
    "SnapshotRecorder",
    "EnergyRecorder",
]

_DATA_SALT = 0x9E3779B97F4A7C15  # distinct Philox key stream for initial data


# ---------------------------------------------------------------------------
# Noise and initial-data sampling


@dataclass(frozen=True)
class BrownianPath:
    """One realization of the driving Brownian motion on the time grid.

    Increments are a pure function of (master_seed, path_index, nt):
    regenerating with the same arguments is bit-identical.
    """

    master_seed: int
    path_index: int
    nt: int
    dt: float
    increments: np.ndarray  # shape (nt,), N(0, dt) each

    def values(self) -> np.ndarray:
        """B at the nt+1 time levels, starting from 0."""
        out = np.empty(self.nt + 1)
        out[0] = 0.0
        np.cumsum(self.increments, out=out[1:])
        return out


def brownian_increments(
    master_seed: int, path_index: int, nt: int, dt: float
) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=[master_seed, path_index]))
    return gen.standard_normal(nt) * math.sqrt(dt)


def sample_brownian(
    master_seed: int, path_index: int, nt: int, dt: float
) -> BrownianPath:
    if nt < 1 or dt <= 0:
        raise ValueError("need nt >= 1 and dt > 0")
    return BrownianPath(
        master_seed=master_seed,
        path_index=path_index,
        nt=nt,
        dt=dt,
        increments=brownian_increments(master_seed, path_index, nt, dt),
    )


def zero_path(nt: int, dt: float) -> BrownianPath:
    """All-zero increments; turns the stochastic solve into the mean-field one."""
    return BrownianPath(
        master_seed=0, path_index=-1, nt=nt, dt=dt, increments=np.zeros(nt)
    )


def random_fourier_data(
    grid: Grid, master_seed: int, data_index: int, modes: int = 5
) -> tuple[np.ndarray, np.ndarray]:
    """Truncated Fourier initial data with unit-normal mode coefficients.

    Modes are products of half-wave sines vanishing on the boundary; both the
    displacement and the velocity get independent coefficient draws.
    """
    gen = np.random.Generator(
        np.random.Philox(key=[master_seed ^ _DATA_SALT, data_index])
    )
    axes = grid.axes()
    xi = [
        (ax - lo) / (hi - lo) for ax, lo, hi in zip(axes, grid.lo, grid.hi)
    ]
    if grid.dim == 1:
        basis = [np.sin(m * np.pi * xi[0]) for m in range(1, modes + 1)]
    else:
        basis = [
            np.outer(np.sin(m * np.pi * xi[0]), np.sin(k * np.pi * xi[1]))
            for m in range(1, modes + 1)
            for k in range(1, modes + 1)
        ]
    coeff = gen.standard_normal((2, len(basis)))
    z0 = np.asarray(sum(c * b for c, b in zip(coeff[0], basis)))
    zt0 = np.asarray(sum(c * b for c, b in zip(coeff[1], basis)))
    # sin(m*pi) is only zero to round-off; pin the Dirichlet values exactly
    zero_boundary(z0, grid)
    zero_boundary(zt0, grid)
    return z0, zt0


# ---------------------------------------------------------------------------
# Coefficient fields


class Coefficient:
    """Scalar coefficient of (t, x) normalized to nodal arrays.

    Accepts None (zero), a constant, a nodal array, or a callable
    f(t, *coords) returning a nodal array. Time-independent inputs are
    evaluated once and cached.
    """

    def __init__(self, raw, grid: Grid):
        self.grid = grid
        self.raw = raw
        self._cached = None
        if raw is None:
            self._cached = 0.0
            self.time_dependent = False
        elif callable(raw):
            self.time_dependent = True
        elif np.isscalar(raw):
            self._cached = float(raw)
            self.time_dependent = False
        else:
            arr = np.asarray(raw, dtype=float)
            if arr.shape != grid.nx:
                raise ValueError("coefficient array shape does not match grid")
            self._cached = arr
            self.time_dependent = False

    @property
    def is_zero(self) -> bool:
        return (not self.time_dependent) and np.isscalar(self._cached) and self._cached == 0.0

    def at(self, t: float):
        if not self.time_dependent:
            return self._cached
        return np.asarray(self.raw(t, *self.grid.coords()), dtype=float)

    def nodal(self, t: float) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.at(t), dtype=float), self.grid.nx)

    def sup_norm(self, times=None) -> float:
        if not self.time_dependent:
            return float(np.max(np.abs(self._cached)))
        times = self.grid.times() if times is None else times
        return max(float(np.max(np.abs(self.nodal(t)))) for t in times)

    def lp_sup_norm(self, p: float, times=None) -> float:
        """max over t of the spatial L^p norm (p = inf gives the sup norm)."""
        if not np.isfinite(p):
            return self.sup_norm(times)
        w = self.grid.quad_weights()
        times = self.grid.times() if times is None else times
        if not self.time_dependent:
            vals = np.abs(self.nodal(0.0)) ** p
            return float(np.sum(w * vals) ** (1.0 / p))
        return max(
            float(np.sum(w * np.abs(self.nodal(t)) ** p) ** (1.0 / p))
            for t in times
        )

    def describe(self) -> str:
        raw = self.raw
        if callable(raw):
            return f"callable:{getattr(raw, '__qualname__', repr(raw))}"
        if isinstance(raw, np.ndarray):
            return "array:" + hashlib.sha256(raw.tobytes()).hexdigest()[:16]
        return repr(raw)


@dataclass
class NonlinearDynamics:
    """Semilinear right side: drift F(w, w_t, grad w) and diffusion K(w).

    Derivative callables are needed for adjoint gradients: dF returns the
    triple of partials (F_eta, F_rho, F_zeta) evaluated pointwise, dK the
    scalar derivative. Both receive the same argument layout as F/K.
    """

    F: callable
    K: callable
    dF: callable | None = None
    dK: callable | None = None
    lipschitz: float = 1.0


class ProblemSpec:
    """Dynamics description: metric plus lower-order terms or nonlinearities.

    Linear mode uses the coefficient fields b1..b4 and forcings f, g;
    nonlinear mode replaces all of them with F and K. The coefficient norms
    r1, r2 are always recomputed from the fields, never taken from the user.
    """

    def __init__(
        self,
        metric: MetricField,
        b1=None,
        b2=None,
        b3=None,
        b4=None,
        f=None,
        g=None,
        p: float = np.inf,
        nonlinear: NonlinearDynamics | None = None,
    ):
        self.metric = metric
        self.grid = metric.grid
        self.nonlinear = nonlinear
        if nonlinear is not None:
            if any(c is not None for c in (b1, b2, b3, b4, f, g)):
                raise ValueError(
                    "nonlinear mode replaces the linear coefficients entirely"
                )
        grid = self.grid
        self.b1 = Coefficient(b1, grid)
        if b2 is None:
            b2 = [None] * grid.dim
        elif np.isscalar(b2) or callable(b2):
            b2 = [b2] + [None] * (grid.dim - 1) if grid.dim > 1 else [b2]
        self.b2 = [Coefficient(c, grid) for c in b2]
        if len(self.b2) != grid.dim:
            raise ValueError("b2 needs one component per axis")
        self.b3 = Coefficient(b3, grid)
        self.b4 = Coefficient(b4, grid)
        self.f = Coefficient(f, grid)
        self.g = Coefficient(g, grid)
        if not (np.isinf(p) or p >= grid.dim):
            raise ValueError(f"norm exponent p must be >= dim, got {p}")
        self.p = float(p)

    @property
    def is_linear(self) -> bool:
        return self.nonlinear is None

    def r1(self) -> float:
        b2_sup = max(c.sup_norm() for c in self.b2)
        return b2_sup + max(self.b1.sup_norm(), self.b4.sup_norm())

    def r2(self) -> float:
        return self.b3.lp_sup_norm(self.p)

    def energy_zsq_coef(self) -> float:
        """Coefficient of z^2 in the energy functional: r2^(2/(2 - n/p))."""
        r2 = self.r2()
        if r2 == 0.0:
            return 0.0
        n_over_p = 0.0 if np.isinf(self.p) else self.grid.dim / self.p
        return r2 ** (2.0 / (2.0 - n_over_p))

    def gronwall_rate(self) -> float:
        """r1^2 + r2^(1/(2 - n/p)) + 1, the Gronwall exponent rate."""
        r2 = self.r2()
        n_over_p = 0.0 if np.isinf(self.p) else self.grid.dim / self.p
        r2_term = 0.0 if r2 == 0.0 else r2 ** (1.0 / (2.0 - n_over_p))
        return self.r1() ** 2 + r2_term + 1.0

    def observability_rate(self) -> float:
        """r1^2 + r2^(1/(3/2 - n/p)) + 1, the observability exponent rate."""
        r2 = self.r2()
        n_over_p = 0.0 if np.isinf(self.p) else self.grid.dim / self.p
        r2_term = 0.0 if r2 == 0.0 else r2 ** (1.0 / (1.5 - n_over_p))
        return self.r1() ** 2 + r2_term + 1.0

    def without_noise(self) -> "ProblemSpec":
        """Mean-field companion: drops b4 and g (the Ito term has zero mean)."""
        if not self.is_linear:
            raise ValueError("mean-field companion defined for linear mode only")
        out = ProblemSpec(self.metric, p=self.p)
        out.b1, out.b2, out.b3, out.f = self.b1, self.b2, self.b3, self.f
        return out

    def fingerprint(self) -> str:
        parts = [
            f"dim={self.grid.dim}",
            f"nx={self.grid.nx}",
            f"nt={self.grid.nt}",
            f"T={self.grid.T!r}",
            "metric="
            + hashlib.sha256(
                b"".join(np.ascontiguousarray(c).tobytes() for c in self.metric.comps)
            ).hexdigest()[:16],
        ]
        if self.is_linear:
            parts += [
                "b1=" + self.b1.describe(),
                "b2=" + ",".join(c.describe() for c in self.b2),
                "b3=" + self.b3.describe(),
                "b4=" + self.b4.describe(),
                "f=" + self.f.describe(),
                "g=" + self.g.describe(),
                f"p={self.p!r}",
            ]
        else:
            nl = self.nonlinear
            parts.append(
                "nonlinear="
                + ";".join(
                    getattr(fn, "__qualname__", repr(fn)) if fn else "none"
                    for fn in (nl.F, nl.K, nl.dF, nl.dK)
                )
            )
        return hashlib.sha256("|".join(parts).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# State containers


@dataclass
class StateSnapshot:
    """(z, z_t) on the grid at one time level."""

    z: np.ndarray
    zt: np.ndarray
    k: int = 0

    def copy(self) -> "StateSnapshot":
        return StateSnapshot(self.z.copy(), self.zt.copy(), self.k)


@dataclass
class Trajectory:
    """Full time history of one pathwise solve."""

    grid: Grid
    z: np.ndarray  # (nt+1, *nx)
    zt: np.ndarray
    path: BrownianPath
    spec_hash: str

    def snapshot(self, k: int) -> StateSnapshot:
        return StateSnapshot(self.z[k], self.zt[k], k)

    @property
    def levels(self) -> int:
        return self.z.shape[0]


# ---------------------------------------------------------------------------
# Spatial operators (batched: state arrays have shape (..., *nx))


def _sp_axis(arr: np.ndarray, grid: Grid, k: int) -> int:
    return arr.ndim - grid.dim + k


def _diff_any(arr: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.empty_like(arr)
    v = np.moveaxis(arr, axis, 0)
    o = np.moveaxis(out, axis, 0)
    o[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
    o[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
    o[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
    return out


def grad_full(z: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Gradient on every node: centered inside, one-sided 3-point on the boundary."""
    return [
        _diff_any(z, grid.h[k], _sp_axis(z, grid, k)) for k in range(grid.dim)
    ]


def grad_interior(z: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Centered gradient with zeros on the boundary rows (enough for drift terms)."""
    out = []
    for k in range(grid.dim):
        g = np.zeros_like(z)
        axis = _sp_axis(z, grid, k)
        v = np.moveaxis(z, axis, 0)
        o = np.moveaxis(g, axis, 0)
        o[1:-1] = (v[2:] - v[:-2]) / (2.0 * grid.h[k])
        out.append(g)
    return out


def zero_boundary(arr: np.ndarray, grid: Grid) -> np.ndarray:
    for k in range(grid.dim):
        axis = _sp_axis(arr, grid, k)
        v = np.moveaxis(arr, axis, 0)
        v[0] = 0.0
        v[-1] = 0.0
    return arr


class _DivForm:
    """Flux-form discretization of sum_j d_j(b^ij d_i z); midpoint coefficients
    are precomputed once per (metric, grid)."""

    def __init__(self, metric: MetricField, grid: Grid):
        self.grid = grid
        self.dim = grid.dim
        if self.dim == 1:
            b = metric.comps[0]
            self.bm = 0.5 * (b[:-1] + b[1:])
        else:
            b11, b12, b22 = metric.comps
            self.bm0 = 0.5 * (b11[:-1, :] + b11[1:, :])
            self.bm1 = 0.5 * (b22[:, :-1] + b22[:, 1:])
            self.b12 = b12
            self.has_mixed = bool(np.any(b12 != 0.0))

    def __call__(self, z: np.ndarray) -> np.ndarray:
        grid = self.grid
        out = np.zeros_like(z)
        if self.dim == 1:
            h2 = grid.h[0] ** 2
            bm = self.bm
            out[..., 1:-1] = (
                bm[1:] * (z[..., 2:] - z[..., 1:-1])
                - bm[:-1] * (z[..., 1:-1] - z[..., :-2])
            ) / h2
            return out
        h0, h1 = grid.h
        out[..., 1:-1, :] += (
            self.bm0[1:, :] * (z[..., 2:, :] - z[..., 1:-1, :])
            - self.bm0[:-1, :] * (z[..., 1:-1, :] - z[..., :-2, :])
        ) / h0**2
        out[..., :, 1:-1] += (
            self.bm1[:, 1:] * (z[..., :, 2:] - z[..., :, 1:-1])
            - self.bm1[:, :-1] * (z[..., :, 1:-1] - z[..., :, :-2])
        ) / h1**2
        if self.has_mixed:
            gy = np.zeros_like(z)
            gy[..., :, 1:-1] = (z[..., :, 2:] - z[..., :, :-2]) / (2.0 * h1)
            gx = np.zeros_like(z)
            gx[..., 1:-1, :] = (z[..., 2:, :] - z[..., :-2, :]) / (2.0 * h0)
            wy = self.b12 * gy
            wx = self.b12 * gx
            out[..., 1:-1, 1:-1] += (
                wy[..., 2:, 1:-1] - wy[..., :-2, 1:-1]
            ) / (2.0 * h0)
            out[..., 1:-1, 1:-1] += (
                wx[..., 1:-1, 2:] - wx[..., 1:-1, :-2]
            ) / (2.0 * h1)
        zero_boundary(out, grid)
        return out


def div_form(z: np.ndarray, metric: MetricField, grid: Grid) -> np.ndarray:
    return _DivForm(metric, grid)(z)


# ---------------------------------------------------------------------------
# Stepping


class _Stepper:
    """Bound kernel advancing (z, zt) one level; reused across steps/paths."""

    def __init__(self, spec: ProblemSpec, grid: Grid):
        if grid is not spec.grid and grid.nx != spec.grid.nx:
            raise ValueError("grid mismatch between spec and solver")
        self.spec = spec
        self.grid = grid
        self.L = _DivForm(spec.metric, grid)
        self.dt = grid.dt
        self.cfl = cfl_number(grid, spec.metric)

    def check_cfl(self):
        if self.cfl > 1.0:
            raise CflViolation(
                f"CFL number {self.cfl:.4f} exceeds 1; refine dt or coarsen h"
            )

    def accel(self, z, zt, t):
        a = self.L(z)
        spec = self.spec
        if spec.is_linear:
            if not spec.b1.is_zero:
                a = a + spec.b1.at(t) * zt
            if any(not c.is_zero for c in spec.b2):
                gz = grad_interior(z, self.grid)
                for k in range(self.grid.dim):
                    if not spec.b2[k].is_zero:
                        a = a + spec.b2[k].at(t) * gz[k]
            if not spec.b3.is_zero:
                a = a + spec.b3.at(t) * z
            if not spec.f.is_zero:
                a = a + spec.f.at(t)
        else:
            gz = grad_interior(z, self.grid)
            a = a + spec.nonlinear.F(z, zt, tuple(gz))
        return a

    def diffusion(self, z, t):
        spec = self.spec
        if spec.is_linear:
            out = 0.0
            if not spec.b4.is_zero:
                out = spec.b4.at(t) * z
            if not spec.g.is_zero:
                out = out + spec.g.at(t)
            return out
        return spec.nonlinear.K(z)

    def advance(self, z, zt, k, dB):
        """One step from level k; dB is the Brownian increment (scalar or
        batch-shaped for broadcasting)."""
        dt = self.dt
        t0 = k * dt
        t1 = (k + 1) * dt
        a0 = self.accel(z, zt, t0)
        z1 = z + dt * zt + 0.5 * dt**2 * a0
        zero_boundary(z1, self.grid)
        a1 = self.accel(z1, zt, t1)
        noise = self.diffusion(z, t0)
        zt1 = zt + 0.5 * dt * (a0 + a1)
        if not (np.isscalar(noise) and noise == 0.0):
            zt1 = zt1 + dB * noise
        zero_boundary(zt1, self.grid)
        return z1, zt1


def step(
    state: StateSnapshot, spec: ProblemSpec, path: BrownianPath, k: int
) -> StateSnapshot:
    """Advance one time level. The noise increment multiplies the diffusion
    term evaluated at level k (Ito/left-endpoint convention)."""
    stepper = _Stepper(spec, spec.grid)
    stepper.check_cfl()
    z1, zt1 = stepper.advance(state.z, state.zt, k, path.increments[k])
    if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(zt1))):
        raise NonFiniteState(f"state became non-finite at level {k + 1}")
    return StateSnapshot(z1, zt1, k + 1)


def _as_pair(initial) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(initial, StateSnapshot):
        return initial.z, initial.zt
    z0, zt0 = initial
    return np.asarray(z0, dtype=float), np.asarray(zt0, dtype=float)


def solve(initial, spec: ProblemSpec, path: BrownianPath) -> Trajectory:
    """Full trajectory for one noise path; snapshot count is nt+1 and the
    first snapshot equals the supplied initial data (boundary zeroed)."""
    grid = spec.grid
    if path.nt != grid.nt:
        raise ValueError("path length does not match the time grid")
    stepper = _Stepper(spec, grid)
    stepper.check_cfl()
    z0, zt0 = _as_pair(initial)
    z_hist = np.empty((grid.nt + 1,) + grid.nx)
    zt_hist = np.empty_like(z_hist)
    z_hist[0] = zero_boundary(z0.copy(), grid)
    zt_hist[0] = zero_boundary(zt0.copy(), grid)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.nt):
            z1, zt1 = stepper.advance(
                z_hist[k], zt_hist[k], k, path.increments[k]
            )
            if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(zt1))):
                raise NonFiniteState(
                    f"state became non-finite at level {k + 1}"
                )
            z_hist[k + 1] = z1
            zt_hist[k + 1] = zt1
    return Trajectory(
        grid=grid, z=z_hist, zt=zt_hist, path=path, spec_hash=spec.fingerprint()
    )


# ---------------------------------------------------------------------------
# Ensemble solves with recorders (no full-history storage)


class SnapshotRecorder:
    """Keeps (z, zt) at the requested time levels, batched over paths."""

    def __init__(self, levels):
        self.levels = sorted(set(int(k) for k in levels))
        self.z = {}
        self.zt = {}

    def on_level(self, k, z, zt):
        if k in self.levels:
            self.z[k] = z.copy()
            self.zt[k] = zt.copy()


class EnergyRecorder:
    """Per-path energy integrand at every level: int(zt^2+|grad z|^2+c z^2)."""

    def __init__(self, grid: Grid, zsq_coef: float = 0.0):
        self.grid = grid
        self.zsq_coef = zsq_coef
        self.series = None

    def on_start(self, batch, levels):
        self.series = np.empty((batch, levels))

    def on_level(self, k, z, zt):
        w = self.grid.quad_weights()
        gz = grad_full(z, self.grid)
        integrand = zt**2 + sum(g**2 for g in gz)
        if self.zsq_coef:
            integrand = integrand + self.zsq_coef * z**2
        self.series[:, k] = np.sum(
            integrand * w, axis=tuple(range(-self.grid.dim, 0))
        )


def solve_ensemble(initial, spec: ProblemSpec, paths, recorders) -> None:
    """Advance a batch of paths in lockstep, feeding each recorder per level.

    ``initial`` may be shared (shape nx) or per-path (shape (B, *nx)).
    Recorder outputs are indexed by path position, so reductions made later
    are independent of any execution ordering.
    """
    grid = spec.grid
    B = len(paths)
    inc = np.stack([p.increments for p in paths], axis=0)  # (B, nt)
    z0, zt0 = _as_pair(initial)
    shape = (B,) + grid.nx
    z = np.empty(shape)
    zt = np.empty(shape)
    z[:] = z0
    zt[:] = zt0
    zero_boundary(z, grid)
    zero_boundary(zt, grid)

    stepper = _Stepper(spec, grid)
    stepper.check_cfl()
    db_shape = (B,) + (1,) * grid.dim

    for rec in recorders:
        if hasattr(rec, "on_start"):
            rec.on_start(B, grid.nt + 1)
    for rec in recorders:
        rec.on_level(0, z, zt)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(grid.nt):
            dB = inc[:, k].reshape(db_shape)
            z, zt = stepper.advance(z, zt, k, dB)
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(zt))):
                raise NonFiniteState(
                    f"ensemble state became non-finite at level {k + 1}"
                )
            for rec in recorders:
                rec.on_level(k + 1, z, zt)


# ---------------------------------------------------------------------------
# Energy functional and the Gronwall-type estimate


def state_energy(
    z: np.ndarray, zt: np.ndarray, grid: Grid, zsq_coef: float = 0.0
) -> float:
    w = grid.quad_weights()
    gz = grad_full(z, grid)
    integrand = zt**2 + sum(g**2 for g in gz)
    if zsq_coef:
        integrand = integrand + zsq_coef * z**2
    return float(np.sum(integrand * w))

def energy(
    state: StateSnapshot,
    grid: Grid,
    r2: float = 0.0,
    p: float = np.inf,
    n: int | None = None,
) -> float:
    """Single-path energy integrand int_G (zt^2 + |grad z|^2 + r2^(2/(2-n/p)) z^2).

    Trapezoid quadrature, centered gradients inside and one-sided 3-point
    stencils on the boundary. Taking the ensemble expectation is the caller's
    business.
    """
    n = grid.dim if n is None else n
    if r2 == 0.0:
        coef = 0.0
    else:
        n_over_p = 0.0 if np.isinf(p) else n / p
        coef = r2 ** (2.0 / (2.0 - n_over_p))
    return state_energy(state.z, state.zt, grid, coef)


@dataclass(frozen=True)
class EnergyReport:
    lhs: float
    rhs: float
    ratio: float
    ok: bool
    empirical_C: float
    C: float
    s: float
    t: float


def _forcing_sq_integral(spec: ProblemSpec) -> float:
    """int_0^T int_G (f^2 + g^2), trapezoid in both variables."""
    if spec.f.is_zero and spec.g.is_zero:
        return 0.0
    grid = spec.grid
    w = grid.quad_weights()
    wt = grid.time_quad_weights()
    total = 0.0
    for k, t in enumerate(grid.times()):
        acc = 0.0
        if not spec.f.is_zero:
            acc = acc + np.sum(spec.f.nodal(t) ** 2 * w)
        if not spec.g.is_zero:
            acc = acc + np.sum(spec.g.nodal(t) ** 2 * w)
        total += wt[k] * float(acc)
    return total


def _smallest_energy_constant(
    lhs: float, e_s: float, forcing: float, rate: float, T: float
) -> float:
    if lhs <= 0.0:
        return 0.0

    def shortfall(C):
        return C * (math.exp(C * rate * T) * e_s + forcing) - lhs

    hi = 1.0
    while shortfall(hi) < 0.0 and hi < 1e6:
        hi *= 2.0
    if shortfall(hi) < 0.0:
        return math.inf
    return float(brentq(shortfall, 0.0, hi, xtol=1e-12, rtol=1e-12))


def energy_estimate_report(
    e_t: float,
    e_s: float,
    forcing_sq: float,
    rate: float,
    T: float,
    C: float,
    s: float,
    t: float,
) -> EnergyReport:
    rhs = C * math.exp(C * rate * T) * e_s + C * forcing_sq
    ratio = e_t / rhs if rhs > 0 else (0.0 if e_t == 0.0 else math.inf)
    return EnergyReport(
        lhs=e_t,
        rhs=rhs,
        ratio=ratio,
        ok=ratio <= 1.0,
        empirical_C=_smallest_energy_constant(e_t, e_s, forcing_sq, rate, T),
        C=C,
        s=s,
        t=t,
    )


def verify_energy_estimate(
    ensemble, spec: ProblemSpec, s: float, t: float, C: float = 10.0
) -> EnergyReport:
    """Check E int(zt(t)^2+|grad z(t)|^2) against the Gronwall-type bound with
    a supplied constant C; also records the smallest empirical constant.
    """
    grid = spec.grid
    ks = int(round(s / grid.dt))
    kt = int(round(t / grid.dt))
    e_t = float(
        np.mean([state_energy(tr.z[kt], tr.zt[kt], grid) for tr in ensemble])
    )
    e_s = float(
        np.mean([state_energy(tr.z[ks], tr.zt[ks], grid) for tr in ensemble])
    )
    return energy_estimate_report(
        e_t,
        e_s,
        _forcing_sq_integral(spec),
        spec.gronwall_rate(),
        grid.T,
        C,
        s,
        t,
    )
