"""Initial-data recovery from boundary or internal observations.

The forward map is solve-then-observe along a known noise path. Linear mode
runs conjugate gradients on the normal equations of the affine trace map;
semilinear mode runs damped gradient descent with re-linearization at each
iterate. Gradients come from the exact transpose of the discrete time step
(reverse sweep with trace-residual injection), so the adjoint dot-product
test holds to round-off, and both the gradient and the CG iteration live in
the discrete H^1_0 x L^2 inner product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DegenerateEnsemble, IllPosedGeometry, NoConvergence
from .geometry import BoundaryPartition, Grid
from .observability import (
    _boundary_values,
    _gamma0_weight_vector,
    collar_quad_weights,
    initial_norm_sq,
)
from .spde import (
    BrownianPath,
    ProblemSpec,
    _Stepper,
    grad_interior,
    zero_boundary,
)

__all__ = [
    "InverseProblem",
    "ReconstructionResult",
    "forward_map",
    "objective",
    "gradient",
    "reconstruct",
    "stability_probe",
    "adjoint_dot_test",
    "DataSpace",
]


# ---------------------------------------------------------------------------
# Inner product on the unknown (w0, w1)


class DataSpace:
    """Discrete H^1_0 x L^2 inner product with its Riesz solves.

    The H^1_0 block is the cell-difference stiffness Gram (SPD on interior
    nodes); the L^2 block is the diagonal trapezoid mass.
    """

    def __init__(self, grid: Grid):
        self.grid = grid
        self.mass = grid.quad_weights()
        self.interior = grid.interior_mask()
        self._stiff = self._build_stiffness(grid)
        self._solve = spla.factorized(self._stiff.tocsc())

    @staticmethod
    def _build_stiffness(grid: Grid) -> sp.spmatrix:
        vol = grid.cell_volume()
        if grid.dim == 1:
            n = grid.nx[0] - 2
            h = grid.h[0]
            main = np.full(n, 2.0 * vol / h**2)
            off = np.full(n - 1, -vol / h**2)
            return sp.diags([off, main, off], [-1, 0, 1], format="csc")
        nx, ny = grid.nx
        nix, niy = nx - 2, ny - 2
        hx, hy = grid.h
        ex = sp.diags(
            [np.full(nix - 1, -1.0), np.full(nix, 2.0), np.full(nix - 1, -1.0)],
            [-1, 0, 1],
        ) / hx**2
        ey = sp.diags(
            [np.full(niy - 1, -1.0), np.full(niy, 2.0), np.full(niy - 1, -1.0)],
            [-1, 0, 1],
        ) / hy**2
        lap = sp.kron(ex, sp.eye(niy)) + sp.kron(sp.eye(nix), ey)
        return (vol * lap).tocsc()

    def _interior_vec(self, arr: np.ndarray) -> np.ndarray:
        if self.grid.dim == 1:
            return arr[1:-1].ravel()
        return arr[1:-1, 1:-1].ravel()

    def _from_interior(self, vec: np.ndarray) -> np.ndarray:
        out = np.zeros(self.grid.nx)
        if self.grid.dim == 1:
            out[1:-1] = vec
        else:
            out[1:-1, 1:-1] = vec.reshape(
                self.grid.nx[0] - 2, self.grid.nx[1] - 2
            )
        return out

    def apply_gram(self, w0: np.ndarray, w1: np.ndarray):
        g0 = self._from_interior(self._stiff @ self._interior_vec(w0))
        g1 = self.mass * w1
        zero_boundary(g1, self.grid)
        return g0, g1

    def riesz_inv(self, g0: np.ndarray, g1: np.ndarray):
        w0 = self._from_interior(self._solve(self._interior_vec(g0)))
        w1 = np.zeros_like(g1)
        w1[self.interior] = g1[self.interior] / self.mass[self.interior]
        return w0, w1

    def inner(self, a, b) -> float:
        ga0, ga1 = self.apply_gram(a[0], a[1])
        return float(np.sum(ga0 * b[0]) + np.sum(ga1 * b[1]))

    def norm(self, a) -> float:
        return math.sqrt(max(self.inner(a, a), 0.0))


# ---------------------------------------------------------------------------
# Observation operators as exact linear maps


class _BoundaryObs:
    def __init__(self, partition: BoundaryPartition):
        self.partition = partition
        self.weights = _gamma0_weight_vector(partition)
        self.size = self.weights.size

    def apply(self, z: np.ndarray) -> np.ndarray:
        return _boundary_values(z, self.partition)

    def transpose(self, y: np.ndarray) -> np.ndarray:
        grid = self.partition.grid
        out = np.zeros(grid.nx)
        col = 0
        for face in self.partition.faces:
            n_tag = int(np.count_nonzero(face.gamma0))
            if n_tag == 0:
                continue
            seg = y[col : col + n_tag]
            col += n_tag
            h = grid.h[face.axis]
            v = np.moveaxis(out, face.axis, -1)
            sl = face.gamma0
            idx = (-1, -2, -3) if face.side == 1 else (0, 1, 2)
            for i, c in zip(idx, (3.0, -4.0, 1.0)):
                if grid.dim == 1:
                    v[..., i] += c * seg[0] / (2.0 * h)
                else:
                    row = v[..., i]
                    row[sl] += c * seg / (2.0 * h)
        return out

    def residual_sq(self, res: np.ndarray) -> np.ndarray:
        return np.sum(res**2 * self.weights, axis=-1)

    def weighted(self, res: np.ndarray) -> np.ndarray:
        return res * self.weights

    def dot(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.sum(a * b * self.weights, axis=-1)


def _diff_any_transpose(y: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Exact transpose of the centered-interior / one-sided-boundary stencil."""
    out = np.zeros_like(y)
    yv = np.moveaxis(y, axis, 0)
    ov = np.moveaxis(out, axis, 0)
    c = 1.0 / (2.0 * h)
    ov[2:] += yv[1:-1] * c
    ov[:-2] -= yv[1:-1] * c
    ov[0] += -3.0 * c * yv[0]
    ov[1] += 4.0 * c * yv[0]
    ov[2] += -c * yv[0]
    ov[-1] += 3.0 * c * yv[-1]
    ov[-2] += -4.0 * c * yv[-1]
    ov[-3] += c * yv[-1]
    return out


class _InternalObs:
    def __init__(self, partition: BoundaryPartition):
        self.partition = partition
        self.weights = collar_quad_weights(partition)
        self.mask = partition.collar_mask
        grid = partition.grid
        self.size = int(np.count_nonzero(self.mask)) * grid.dim

    def apply(self, z: np.ndarray) -> np.ndarray:
        grid = self.partition.grid
        from .spde import grad_full

        gz = grad_full(z, grid)
        return np.stack([g[..., self.mask] for g in gz], axis=-1)

    def transpose(self, y: np.ndarray) -> np.ndarray:
        grid = self.partition.grid
        out = np.zeros(grid.nx)
        for k in range(grid.dim):
            scat = np.zeros(grid.nx)
            scat[self.mask] = y[..., k]
            out += _diff_any_transpose(scat, grid.h[k], k)
        return out

    def residual_sq(self, res: np.ndarray) -> np.ndarray:
        return np.sum(np.sum(res**2, axis=-1) * self.weights, axis=-1)

    def weighted(self, res: np.ndarray) -> np.ndarray:
        return res * self.weights[..., None]

    def dot(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.sum(np.sum(a * b, axis=-1) * self.weights, axis=-1)


def _make_obs(partition: BoundaryPartition, mode: str):
    if mode == "boundary":
        return _BoundaryObs(partition)
    if mode == "internal":
        return _InternalObs(partition)
    raise ValueError(f"unknown observation mode {mode!r}")


# ---------------------------------------------------------------------------
# Problem container


@dataclass
class InverseProblem:
    """Pathwise inverse problem: recover (w0, w1) from a trace target."""

    spec: ProblemSpec
    partition: BoundaryPartition
    mode: str
    target: np.ndarray
    path: BrownianPath
    regularization: float = 0.0
    max_iter: int = 200
    grad_tol: float = 1e-8
    obj_tol: float = 0.0
    raise_on_cap: bool = False

    def __post_init__(self):
        if self.partition.gamma0_points().shape[0] == 0:
            raise IllPosedGeometry("observation boundary is empty")
        if self.mode not in ("boundary", "internal"):
            raise ValueError(f"unknown observation mode {self.mode!r}")
        grid = self.spec.grid
        if self.path.nt != grid.nt:
            raise ValueError("noise path length does not match the grid")
        obs = _make_obs(self.partition, self.mode)
        want = (grid.nt + 1,) + (
            (obs.size,)
            if self.mode == "boundary"
            else (obs.size // grid.dim, grid.dim)
        )
        if self.target.shape != want:
            raise ValueError(
                f"target shape {self.target.shape} does not match {want}"
            )

    @property
    def grid(self) -> Grid:
        return self.spec.grid


# ---------------------------------------------------------------------------
# Forward / objective / gradient engine


class _Engine:
    """Bound state for repeated forward and adjoint sweeps on one problem."""

    def __init__(self, problem: InverseProblem):
        self.problem = problem
        self.grid = problem.grid
        self.spec = problem.spec
        self.obs = _make_obs(problem.partition, problem.mode)
        self.space = DataSpace(self.grid)
        self.wt = self.grid.time_quad_weights()
        self.stepper = _Stepper(self.spec, self.grid)
        self.stepper.check_cfl()
        if self.spec.is_linear:
            homo = ProblemSpec(
                self.spec.metric,
                p=self.spec.p,
            )
            homo.b1, homo.b2, homo.b3, homo.b4 = (
                self.spec.b1,
                self.spec.b2,
                self.spec.b3,
                self.spec.b4,
            )
            self.stepper_homo = _Stepper(homo, self.grid)
            self.spec_homo = homo
        else:
            if self.spec.nonlinear.dF is None or self.spec.nonlinear.dK is None:
                raise ValueError(
                    "semilinear gradients need dF and dK derivative callables"
                )

    # -- forward sweeps -----------------------------------------------------

    def forward_trace(self, w0, w1, stepper=None, keep_states=False):
        grid = self.grid
        stepper = self.stepper if stepper is None else stepper
        inc = self.problem.path.increments
        z = zero_boundary(np.asarray(w0, dtype=float).copy(), grid)
        zt = zero_boundary(np.asarray(w1, dtype=float).copy(), grid)
        trace = np.empty((grid.nt + 1,) + self.problem.target.shape[1:])
        trace[0] = self.obs.apply(z)
        states = None
        if keep_states:
            states = (
                np.empty((grid.nt + 1,) + grid.nx),
                np.empty((grid.nt + 1,) + grid.nx),
            )
            states[0][0] = z
            states[1][0] = zt
        for k in range(grid.nt):
            z, zt = stepper.advance(z, zt, k, inc[k])
            trace[k + 1] = self.obs.apply(z)
            if keep_states:
                states[0][k + 1] = z
                states[1][k + 1] = zt
        return (trace, states) if keep_states else trace

    def objective_from_trace(self, trace, w_pair=None) -> float:
        res = trace - self.problem.target
        J = float(np.sum(self.obs.residual_sq(res) * self.wt))
        if self.problem.regularization > 0.0 and w_pair is not None:
            J += self.problem.regularization * self.space.inner(w_pair, w_pair)
        return J

    # -- linear-mode operator pieces -----------------------------------------

    def _apply_L_sym(self, y):
        out = self.stepper.L(zero_boundary(y.copy(), self.grid))
        return out  # flux form is symmetric on interior; boundary rows zero

    def _apply_D_transpose(self, y, t, coeffs=None):
        """Transpose of z -> L z + b2.grad z + b3 z (or its linearization)."""
        grid = self.grid
        out = self._apply_L_sym(y)
        spec = self.spec
        if coeffs is None:
            if not spec.b3.is_zero:
                out = out + spec.b3.at(t) * y
            for k in range(grid.dim):
                if not spec.b2[k].is_zero:
                    u = spec.b2[k].at(t) * y
                    out = out + self._grad_interior_transpose(u, k)
        else:
            f_eta, f_zeta = coeffs
            out = out + f_eta * y
            for k in range(grid.dim):
                out = out + self._grad_interior_transpose(f_zeta[k] * y, k)
        return out

    def _grad_interior_transpose(self, u, axis_k):
        grid = self.grid
        out = np.zeros_like(u)
        axis = u.ndim - grid.dim + axis_k
        uv = np.moveaxis(u, axis, 0)
        ov = np.moveaxis(out, axis, 0)
        c = 1.0 / (2.0 * grid.h[axis_k])
        ov[2:] += uv[1:-1] * c
        ov[:-2] -= uv[1:-1] * c
        return out

    def adjoint_sweep(self, injections, states=None):
        """Reverse sweep with per-level injections dJ/dz^k (Euclidean).

        ``injections`` maps level k -> nodal array. For semilinear problems
        the forward states must be supplied for re-linearization. Returns the
        Euclidean gradient pair at level 0.
        """
        grid = self.grid
        dt = grid.dt
        inc = self.problem.path.increments
        spec = self.spec
        linear = spec.is_linear

        p = zero_boundary(injections(grid.nt).copy(), grid)
        q = np.zeros(grid.nx)
        for k in range(grid.nt - 1, -1, -1):
            t0 = k * dt
            t1 = (k + 1) * dt
            if linear:
                coeffs0 = coeffs1 = None
                m1_0 = 0.0 if spec.b1.is_zero else spec.b1.at(t0)
                m1_1 = 0.0 if spec.b1.is_zero else spec.b1.at(t1)
                n_diag = (
                    0.0
                    if spec.b4.is_zero
                    else inc[k] * spec.b4.at(t0)
                )
            else:
                z_k = states[0][k]
                zt_k = states[1][k]
                z_k1 = states[0][k + 1]
                nl = spec.nonlinear
                gz0 = grad_interior(z_k, grid)
                gz1 = grad_interior(z_k1, grid)
                fe0, fr0, fz0 = nl.dF(z_k, zt_k, tuple(gz0))
                fe1, fr1, fz1 = nl.dF(z_k1, zt_k, tuple(gz1))
                coeffs0 = (np.asarray(fe0, dtype=float), [np.asarray(c) for c in fz0])
                coeffs1 = (np.asarray(fe1, dtype=float), [np.asarray(c) for c in fz1])
                m1_0 = np.asarray(fr0, dtype=float)
                m1_1 = np.asarray(fr1, dtype=float)
                n_diag = inc[k] * np.asarray(nl.dK(z_k), dtype=float)

            qp = zero_boundary(q.copy(), grid)
            wadj = p + 0.5 * dt * self._apply_D_transpose(qp, t1, coeffs1)
            zero_boundary(wadj, grid)

            new_q = dt * wadj + qp
            if not (np.isscalar(m1_0) and m1_0 == 0.0):
                new_q = new_q + 0.5 * dt**2 * m1_0 * wadj + 0.5 * dt * m1_0 * qp
            if not (np.isscalar(m1_1) and m1_1 == 0.0):
                new_q = new_q + 0.5 * dt * m1_1 * qp

            new_p = (
                wadj
                + 0.5 * dt**2 * self._apply_D_transpose(wadj, t0, coeffs0)
                + 0.5 * dt * self._apply_D_transpose(qp, t0, coeffs0)
            )
            if not (np.isscalar(n_diag) and n_diag == 0.0):
                new_p = new_p + n_diag * qp

            p = zero_boundary(new_p, grid) + zero_boundary(
                injections(k).copy(), grid
            )
            q = zero_boundary(new_q, grid)
        return p, q

    def trace_adjoint(self, y, states=None):
        """Euclidean gradient of <trace(.), y>_Y at the initial pair."""

        def injections(k):
            return self.obs.transpose(self.obs.weighted(y[k]) * self.wt[k])

        return self.adjoint_sweep(injections, states=states)

    def xgrad_from_trace_residual(self, res, w_pair=None, states=None):
        """Gradient of J in the data-space metric: 2 R^-1 A^T W res (+ reg)."""
        g0, g1 = self.trace_adjoint(res, states=states)
        s0, s1 = self.space.riesz_inv(2.0 * g0, 2.0 * g1)
        if self.problem.regularization > 0.0 and w_pair is not None:
            s0 = s0 + 2.0 * self.problem.regularization * w_pair[0]
            s1 = s1 + 2.0 * self.problem.regularization * w_pair[1]
        return s0, s1


# ---------------------------------------------------------------------------
# Public operations


def forward_map(initial, problem: InverseProblem) -> np.ndarray:
    """Solve along the problem's noise path and observe; returns the trace
    series shaped like the target."""
    eng = _Engine(problem)
    w0, w1 = initial
    return eng.forward_trace(np.asarray(w0, dtype=float), np.asarray(w1, dtype=float))


def objective(candidate, problem: InverseProblem) -> float:
    """Squared trace-space misfit plus the optional Tikhonov term."""
    eng = _Engine(problem)
    w0 = zero_boundary(np.asarray(candidate[0], dtype=float).copy(), eng.grid)
    w1 = zero_boundary(np.asarray(candidate[1], dtype=float).copy(), eng.grid)
    trace = eng.forward_trace(w0, w1)
    return eng.objective_from_trace(trace, (w0, w1))


def gradient(candidate, problem: InverseProblem):
    """Gradient of the objective w.r.t. (w0, w1) in the H^1_0 x L^2 metric,
    exact for the discrete objective (adjoint of the discrete scheme)."""
    eng = _Engine(problem)
    w0 = zero_boundary(np.asarray(candidate[0], dtype=float).copy(), eng.grid)
    w1 = zero_boundary(np.asarray(candidate[1], dtype=float).copy(), eng.grid)
    if problem.spec.is_linear:
        trace = eng.forward_trace(w0, w1)
        res = trace - problem.target
        return eng.xgrad_from_trace_residual(res, (w0, w1))
    trace, states = eng.forward_trace(w0, w1, keep_states=True)
    res = trace - problem.target
    return eng.xgrad_from_trace_residual(res, (w0, w1), states=states)


@dataclass
class ReconstructionResult:
    w0: np.ndarray
    w1: np.ndarray
    objective_history: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)
    final_residual: float = 0.0
    iterations: int = 0
    converged: bool = False
    rel_error: float | None = None
    diagnostics: dict = field(default_factory=dict)


def _relative_error(w_pair, truth, grid: Grid) -> float:
    d0 = w_pair[0] - truth[0]
    d1 = w_pair[1] - truth[1]
    num = initial_norm_sq(d0, d1, grid)
    den = initial_norm_sq(np.asarray(truth[0]), np.asarray(truth[1]), grid)
    return math.sqrt(num / den) if den > 0 else math.sqrt(num)


def _reconstruct_linear(problem: InverseProblem, initial_guess, truth):
    """CGLS on the normal equations of the affine trace map, iterated in the
    data-space inner product; the misfit is monotone nonincreasing."""
    eng = _Engine(problem)
    grid = eng.grid
    reg = problem.regularization
    zero_pair = (np.zeros(grid.nx), np.zeros(grid.nx))
    w0 = zero_boundary(np.asarray(initial_guess[0], dtype=float).copy(), grid)
    w1 = zero_boundary(np.asarray(initial_guess[1], dtype=float).copy(), grid)

    # affine split: target residual b = target - M(0); A acts homogeneously
    m0 = eng.forward_trace(*zero_pair)
    b = problem.target - m0

    def A(u):
        return eng.forward_trace(u[0], u[1], stepper=eng.stepper_homo)

    def A_star(y):
        g0, g1 = eng.trace_adjoint(y)
        return eng.space.riesz_inv(g0, g1)

    def ynorm_sq(y):
        return float(np.sum(eng.obs.residual_sq(y) * eng.wt))

    u = (w0, w1)
    r_y = b - A(u)
    s = A_star(r_y)
    if reg > 0.0:
        s = (s[0] - reg * u[0], s[1] - reg * u[1])
    p = (s[0].copy(), s[1].copy())
    gamma = eng.space.inner(s, s)
    g0_norm = math.sqrt(max(gamma, 0.0))

    J = ynorm_sq(r_y) + (reg * eng.space.inner(u, u) if reg > 0 else 0.0)
    history = [J]
    gnorms = [2.0 * g0_norm]
    converged = gamma == 0.0
    it = 0
    for it in range(1, problem.max_iter + 1):
        q = A(p)
        delta = ynorm_sq(q) + (reg * eng.space.inner(p, p) if reg > 0 else 0.0)
        if delta <= 0.0:
            converged = True
            it -= 1
            break
        alpha = gamma / delta
        u = (u[0] + alpha * p[0], u[1] + alpha * p[1])
        r_y = r_y - alpha * q
        s = A_star(r_y)
        if reg > 0.0:
            s = (s[0] - reg * u[0], s[1] - reg * u[1])
        gamma_new = eng.space.inner(s, s)
        J = ynorm_sq(r_y) + (reg * eng.space.inner(u, u) if reg > 0 else 0.0)
        history.append(J)
        gnorms.append(2.0 * math.sqrt(max(gamma_new, 0.0)))
        if J <= problem.obj_tol or math.sqrt(max(gamma_new, 0.0)) <= problem.grad_tol * max(
            g0_norm, 1e-300
        ):
            converged = True
            break
        beta = gamma_new / gamma
        p = (s[0] + beta * p[0], s[1] + beta * p[1])
        gamma = gamma_new

    result = ReconstructionResult(
        w0=u[0],
        w1=u[1],
        objective_history=history,
        gradient_norms=gnorms,
        final_residual=history[-1],
        iterations=it,
        converged=converged,
        rel_error=None if truth is None else _relative_error(u, truth, grid),
        diagnostics={"mode": problem.mode, "regularization": reg},
    )
    if not converged and problem.raise_on_cap:
        raise NoConvergence(
            f"CG cap {problem.max_iter} reached with gradient above tolerance",
            result=result,
            diagnostics={
                "final_gradient_norm": gnorms[-1],
                "final_objective": history[-1],
            },
        )
    return result


def _reconstruct_semilinear(problem: InverseProblem, initial_guess, truth):
    """Gradient descent with backtracking line search, re-linearizing the
    dynamics about each iterate."""
    eng = _Engine(problem)
    grid = eng.grid
    u = (
        zero_boundary(np.asarray(initial_guess[0], dtype=float).copy(), grid),
        zero_boundary(np.asarray(initial_guess[1], dtype=float).copy(), grid),
    )

    def evaluate(u_pair, keep=False):
        out = eng.forward_trace(u_pair[0], u_pair[1], keep_states=keep)
        trace, states = out if keep else (out, None)
        return eng.objective_from_trace(trace, u_pair), trace, states

    J, trace, states = evaluate(u, keep=True)
    history = [J]
    gnorms = []
    converged = False
    armijo = 1e-4
    step0 = 1.0
    it = 0
    for it in range(1, problem.max_iter + 1):
        res = trace - problem.target
        g = eng.xgrad_from_trace_residual(res, u, states=states)
        gnorm_sq = eng.space.inner(g, g)
        gnorms.append(math.sqrt(max(gnorm_sq, 0.0)))
        if gnorms[-1] <= problem.grad_tol * max(gnorms[0], 1e-300) or J <= problem.obj_tol:
            converged = True
            break
        step = step0
        accepted = False
        for _ in range(40):
            cand = (u[0] - step * g[0], u[1] - step * g[1])
            J_new, trace_new, states_new = evaluate(cand, keep=True)
            if J_new <= J - armijo * step * gnorm_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        u, J, trace, states = cand, J_new, trace_new, states_new
        history.append(J)
        step0 = min(step * 2.0, 1e6)

    result = ReconstructionResult(
        w0=u[0],
        w1=u[1],
        objective_history=history,
        gradient_norms=gnorms,
        final_residual=history[-1],
        iterations=it,
        converged=converged,
        rel_error=None if truth is None else _relative_error(u, truth, grid),
        diagnostics={"mode": problem.mode},
    )
    if not converged and problem.raise_on_cap:
        raise NoConvergence(
            f"descent cap {problem.max_iter} reached",
            result=result,
            diagnostics={"final_objective": history[-1]},
        )
    return result


def reconstruct(
    problem: InverseProblem, initial_guess=None, truth=None
) -> ReconstructionResult:
    """Minimize the trace misfit over initial pairs.

    Linear dynamics use conjugate gradients on the normal equations;
    semilinear dynamics use damped gradient descent. ``truth``, when given,
    only fills the reported relative error.
    """
    grid = problem.grid
    if initial_guess is None:
        initial_guess = (np.zeros(grid.nx), np.zeros(grid.nx))
    if problem.spec.is_linear:
        return _reconstruct_linear(problem, initial_guess, truth)
    return _reconstruct_semilinear(problem, initial_guess, truth)


def stability_probe(pairs, problem: InverseProblem):
    """Empirical stability constant over an ensemble of distinct data pairs:
    max of |data difference|_{H^1_0 x L^2} / |trace difference|."""
    eng = _Engine(problem)
    grid = eng.grid
    ratios = []
    for (wa, wb) in pairs:
        da = (np.asarray(wa[0], dtype=float), np.asarray(wa[1], dtype=float))
        db = (np.asarray(wb[0], dtype=float), np.asarray(wb[1], dtype=float))
        diff_sq = initial_norm_sq(da[0] - db[0], da[1] - db[1], grid)
        if diff_sq == 0.0:
            raise ValueError("stability pairs must be distinct")
        ta = eng.forward_trace(*da)
        tb = eng.forward_trace(*db)
        obs_sq = float(np.sum(eng.obs.residual_sq(ta - tb) * eng.wt))
        if obs_sq == 0.0:
            raise DegenerateEnsemble(
                "observation difference vanished for distinct data",
                diagnostics={"data_diff_sq": diff_sq},
            )
        ratios.append(math.sqrt(diff_sq / obs_sq))
    return max(ratios), ratios


def adjoint_dot_test(problem: InverseProblem, seed: int = 0) -> float:
    """Relative mismatch of <A u, y>_Y vs <u, A* y>_X for random u, y."""
    eng = _Engine(problem)
    grid = eng.grid
    gen = np.random.Generator(np.random.Philox(key=[seed, 1]))
    u = (
        zero_boundary(gen.standard_normal(grid.nx), grid),
        zero_boundary(gen.standard_normal(grid.nx), grid),
    )
    y = gen.standard_normal(problem.target.shape)
    if not problem.spec.is_linear:
        raise ValueError("dot test is defined for the linear forward map")
    Au = eng.forward_trace(u[0], u[1], stepper=eng.stepper_homo)
    lhs = float(np.sum(eng.obs.dot(Au, y) * eng.wt))
    g = eng.trace_adjoint(y)
    s = eng.space.riesz_inv(*g)
    rhs = eng.space.inner(s, u)
    scale = max(abs(lhs), abs(rhs), 1e-300)
    return abs(lhs - rhs) / scale
