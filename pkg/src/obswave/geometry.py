"""Grids, metric fields, weight functions, and observation geometry.

The weight function d drives everything downstream: its convexity-type
matrix certificate (mu0), the absence of critical points, the admissible
observation time window, and the outgoing-flux portion of the boundary
where observation happens.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DegenerateMetric, EmptyGamma0, NonPositiveWeight

__all__ = [
    "Grid",
    "MetricField",
    "QuadraticWeight",
    "TabulatedWeight",
    "BoundaryFace",
    "BoundaryPartition",
    "WeightConditionReport",
    "ObservationWindowReport",
    "check_weight_condition",
    "dilate_weight",
    "check_observation_window",
    "compute_observation_boundary",
    "cfl_number",
    "nodal_gradient",
    "nodal_partials",
]


# ---------------------------------------------------------------------------
# Grid


@dataclass(frozen=True)
class Grid:
    """Rectangular spatial mesh (dim 1 or 2) with a uniform time partition.

    Spacing satisfies h[k] = (hi[k] - lo[k]) / (nx[k] - 1) exactly; node k=0
    and k=nx-1 lie on the boundary.
    """

    lo: tuple[float, ...]
    hi: tuple[float, ...]
    nx: tuple[int, ...]
    T: float
    nt: int

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"grid dimension must be 1 or 2, got {self.dim}")
        if len(self.hi) != self.dim or len(self.nx) != self.dim:
            raise ValueError("lo/hi/nx length mismatch")
        if any(n < 3 for n in self.nx):
            raise ValueError("need at least 3 nodes per axis")
        if self.nt < 2:
            raise ValueError("need at least 2 time steps")
        if not (self.T > 0):
            raise ValueError("final time must be positive")
        if any(not (b > a) for a, b in zip(self.lo, self.hi)):
            raise ValueError("extent_hi must exceed extent_lo")

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def h(self) -> tuple[float, ...]:
        return tuple(
            (b - a) / (n - 1) for a, b, n in zip(self.lo, self.hi, self.nx)
        )

    @property
    def dt(self) -> float:
        return self.T / self.nt

    @property
    def shape(self) -> tuple[int, ...]:
        return self.nx

    def axes(self) -> list[np.ndarray]:
        return [
            np.linspace(a, b, n)
            for a, b, n in zip(self.lo, self.hi, self.nx)
        ]

    def coords(self) -> list[np.ndarray]:
        """Nodal coordinate arrays, each of shape ``nx``."""
        if self.dim == 1:
            return [self.axes()[0]]
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def points(self) -> np.ndarray:
        """All node coordinates stacked as shape ``(*nx, dim)``."""
        return np.stack(self.coords(), axis=-1)

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.nt + 1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.nx, dtype=bool)
        for axis in range(self.dim):
            sl_lo = [slice(None)] * self.dim
            sl_hi = [slice(None)] * self.dim
            sl_lo[axis] = 0
            sl_hi[axis] = -1
            mask[tuple(sl_lo)] = True
            mask[tuple(sl_hi)] = True
        return mask

    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask()

    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    def quad_weights(self) -> np.ndarray:
        """Trapezoid quadrature weights over the spatial nodes."""
        w = np.ones(self.nx[0])
        w[0] = w[-1] = 0.5
        w = w * self.h[0]
        if self.dim == 1:
            return w
        w1 = np.ones(self.nx[1])
        w1[0] = w1[-1] = 0.5
        w1 = w1 * self.h[1]
        return np.outer(w, w1)

    def time_quad_weights(self) -> np.ndarray:
        wt = np.full(self.nt + 1, self.dt)
        wt[0] = wt[-1] = 0.5 * self.dt
        return wt


# ---------------------------------------------------------------------------
# Finite-difference helpers on nodal fields (second order; one-sided at the
# boundary so boundary nodes carry usable values too)


def _diff_axis(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.empty_like(values)
    v = np.moveaxis(values, axis, 0)
    o = np.moveaxis(out, axis, 0)
    o[1:-1] = (v[2:] - v[:-2]) / (2.0 * h)
    o[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h)
    o[-1] = (3.0 * v[-1] - 4.0 * v[-2] + v[-3]) / (2.0 * h)
    return out


def nodal_gradient(values: np.ndarray, grid: Grid) -> list[np.ndarray]:
    """Second-order gradient of a nodal field, one component per axis."""
    return [_diff_axis(values, grid.h[k], k) for k in range(grid.dim)]


def nodal_partials(fields, grid: Grid):
    """Partials of a collection of nodal fields: result[k][m] = d fields[m]/dx_k."""
    return [
        [_diff_axis(f, grid.h[k], k) for f in fields] for k in range(grid.dim)
    ]


# ---------------------------------------------------------------------------
# Metric


@dataclass
class MetricField:
    """Symmetric positive-definite coefficient matrix b^ij on the grid nodes.

    Only the upper triangle is stored (comps), so symmetry holds exactly.
    ``constant_matrix`` is set when the field is spatially constant, in which
    case all spatial derivatives of the metric vanish identically.
    """

    grid: Grid
    comps: tuple[np.ndarray, ...]  # dim 1: (b,); dim 2: (b11, b12, b22)
    s0: float
    constant_matrix: np.ndarray | None = None

    @classmethod
    def identity(cls, grid: Grid, s0: float = 1.0) -> "MetricField":
        return cls.constant(grid, np.eye(grid.dim), s0=s0)

    @classmethod
    def constant(cls, grid: Grid, matrix, s0: float = None) -> "MetricField":
        matrix = np.asarray(matrix, dtype=float)
        if matrix.shape != (grid.dim, grid.dim):
            raise ValueError("matrix shape does not match grid dimension")
        if not np.allclose(matrix, matrix.T):
            raise ValueError("metric matrix must be symmetric")
        if grid.dim == 1:
            comps = (np.full(grid.nx, matrix[0, 0]),)
        else:
            comps = (
                np.full(grid.nx, matrix[0, 0]),
                np.full(grid.nx, matrix[0, 1]),
                np.full(grid.nx, matrix[1, 1]),
            )
        if s0 is None:
            s0 = 0.9 * float(np.min(np.linalg.eigvalsh(matrix)))
        return cls(grid=grid, comps=comps, s0=s0, constant_matrix=matrix)

    @classmethod
    def from_nodes(cls, grid: Grid, comps, s0: float) -> "MetricField":
        comps = tuple(np.asarray(c, dtype=float) for c in comps)
        expect = 1 if grid.dim == 1 else 3
        if len(comps) != expect:
            raise ValueError(f"expected {expect} component arrays")
        for c in comps:
            if c.shape != grid.nx:
                raise ValueError("component shape does not match grid")
        return cls(grid=grid, comps=comps, s0=s0)

    @property
    def dim(self) -> int:
        return self.grid.dim

    def matrices(self) -> np.ndarray:
        """Per-node matrices, shape ``(*nx, dim, dim)``."""
        if self.dim == 1:
            return self.comps[0][..., None, None]
        b11, b12, b22 = self.comps
        m = np.empty(self.grid.nx + (2, 2))
        m[..., 0, 0] = b11
        m[..., 0, 1] = b12
        m[..., 1, 0] = b12
        m[..., 1, 1] = b22
        return m

    def eigen_range(self) -> tuple[float, float]:
        """(min, max) eigenvalue over all nodes."""
        if self.dim == 1:
            b = self.comps[0]
            return float(b.min()), float(b.max())
        b11, b12, b22 = self.comps
        mean = 0.5 * (b11 + b22)
        rad = np.sqrt(0.25 * (b11 - b22) ** 2 + b12**2)
        return float((mean - rad).min()), float((mean + rad).max())

    def validate(self) -> None:
        lo, _ = self.eigen_range()
        if lo < self.s0:
            raise DegenerateMetric(
                f"metric eigenvalue {lo:.6g} falls below the floor s0={self.s0:.6g}"
            )

    def partial_fields(self):
        """dP[k][i][j] = spatial partial of b^ij along axis k, as nodal arrays.

        Exactly zero for constant metrics; centered differences otherwise.
        """
        n = self.dim
        if self.constant_matrix is not None:
            zero = np.zeros(self.grid.nx)
            return [[[zero for _ in range(n)] for _ in range(n)] for _ in range(n)]
        mats = self.matrices()
        out = []
        for k in range(n):
            dk = _diff_axis(mats, self.grid.h[k], k)
            out.append([[dk[..., i, j] for j in range(n)] for i in range(n)])
        return out

    def apply(self, vec_fields) -> list[np.ndarray]:
        """Contract the metric with a vector of nodal fields: (b v)^j."""
        if self.dim == 1:
            return [self.comps[0] * vec_fields[0]]
        b11, b12, b22 = self.comps
        v0, v1 = vec_fields
        return [b11 * v0 + b12 * v1, b12 * v0 + b22 * v1]


def cfl_number(grid: Grid, metric: MetricField) -> float:
    """dt * sqrt(max metric eigenvalue) * sqrt(sum 1/h_k^2).

    Explicit leapfrog stepping is stable for values <= 1.
    """
    _, lam_max = metric.eigen_range()
    return grid.dt * np.sqrt(lam_max) * np.sqrt(sum(1.0 / h**2 for h in grid.h))


# ---------------------------------------------------------------------------
# Weights


@dataclass
class QuadraticWeight:
    """Weight d(x) = scale * |x - center|^2 + shift with analytic derivatives.

    ``center`` must lie outside the closed domain so d has no critical point
    inside. mu0 and min_grad are filled in by check_weight_condition.
    """

    scale: float
    center: tuple[float, ...]
    shift: float = 0.0
    mu0: float | None = None
    min_grad: float | None = None

    analytic = True

    def value_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        diff = pts - np.asarray(self.center)
        return self.scale * np.sum(diff**2, axis=-1) + self.shift

    def gradient_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return 2.0 * self.scale * (pts - np.asarray(self.center))

    def hessian_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        n = pts.shape[-1]
        h = 2.0 * self.scale * np.eye(n)
        return np.broadcast_to(h, pts.shape[:-1] + (n, n)).copy()

    def third_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        n = pts.shape[-1]
        return np.zeros(pts.shape[:-1] + (n, n, n))

    def fourth_at(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        n = pts.shape[-1]
        return np.zeros(pts.shape[:-1] + (n, n, n, n))

    # Nodal views -----------------------------------------------------------

    def nodal_value(self, grid: Grid) -> np.ndarray:
        return self.value_at(grid.points())

    def nodal_gradient(self, grid: Grid) -> list[np.ndarray]:
        g = self.gradient_at(grid.points())
        return [g[..., k] for k in range(grid.dim)]

    def nodal_hessian(self, grid: Grid):
        n = grid.dim
        h = self.hessian_at(grid.points())
        return [[h[..., i, j] for j in range(n)] for i in range(n)]


@dataclass
class TabulatedWeight:
    """Weight given by nodal values only; derivatives by centered differences.

    Usable for the grid certificates but not for the analytic identity checks
    (those need exact derivatives).
    """

    grid: Grid
    values: np.ndarray
    mu0: float | None = None
    min_grad: float | None = None

    analytic = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.nx:
            raise ValueError("tabulated values shape does not match grid")

    def nodal_value(self, grid: Grid) -> np.ndarray:
        self._check_grid(grid)
        return self.values

    def nodal_gradient(self, grid: Grid) -> list[np.ndarray]:
        self._check_grid(grid)
        return nodal_gradient(self.values, grid)

    def nodal_hessian(self, grid: Grid):
        self._check_grid(grid)
        grads = self.nodal_gradient(grid)
        return [
            [_diff_axis(grads[i], grid.h[j], j) for j in range(grid.dim)]
            for i in range(grid.dim)
        ]

    def _check_grid(self, grid: Grid) -> None:
        if grid.nx != self.grid.nx or grid.lo != self.grid.lo or grid.hi != self.grid.hi:
            raise ValueError("tabulated weight is bound to its own grid")


def dilate_weight(weight, a: float, b: float, grid: Grid):
    """Replace d by a*d + b (a >= 1). The certificate scales as mu0 -> a*mu0.

    Positivity of the shifted weight is checked on the grid nodes; the tagged
    observation boundary is unchanged since the flux sign is scale-invariant.
    """
    if a < 1.0:
        raise ValueError(f"dilation factor must be >= 1, got {a}")
    mu0 = None if weight.mu0 is None else a * weight.mu0
    min_grad = None if weight.min_grad is None else a * weight.min_grad
    if isinstance(weight, QuadraticWeight):
        out = replace(
            weight,
            scale=a * weight.scale,
            shift=a * weight.shift + b,
            mu0=mu0,
            min_grad=min_grad,
        )
    elif isinstance(weight, TabulatedWeight):
        out = TabulatedWeight(
            grid=weight.grid,
            values=a * weight.values + b,
            mu0=mu0,
            min_grad=min_grad,
        )
    else:
        raise TypeError(f"unsupported weight type {type(weight)!r}")
    lowest = float(np.min(out.nodal_value(grid)))
    if lowest <= 0.0:
        raise NonPositiveWeight(
            f"dilated weight reaches {lowest:.6g} on the domain"
        )
    return out


# ---------------------------------------------------------------------------
# Certificates


@dataclass(frozen=True)
class WeightConditionReport:
    mu0: float
    min_grad: float
    ok: bool


def _convexity_matrix(metric: MetricField, weight, grid: Grid):
    """M^ij = sum_{i'j'} [2 b^{ij'} (b^{i'j} d_{i'})_{j'} - b^{ij}_{j'} b^{i'j'} d_{i'}].

    Returned as nested lists of nodal arrays, symmetrized (only the quadratic
    form matters).
    """
    n = grid.dim
    dg = weight.nodal_gradient(grid)
    dh = weight.nodal_hessian(grid)
    b = metric.comps
    bm = metric.matrices()
    dP = metric.partial_fields()

    def bij(i, j):
        return bm[..., i, j]

    # V^j = sum_i' b^{i'j} d_{i'} and its partials W[j', j]
    V = [sum(bij(i2, j) * dg[i2] for i2 in range(n)) for j in range(n)]
    W = [
        [
            sum(
                dP[j2][i2][j] * dg[i2] + bij(i2, j) * dh[i2][j2]
                for i2 in range(n)
            )
            for j in range(n)
        ]
        for j2 in range(n)
    ]

    M = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            term1 = sum(2.0 * bij(i, j2) * W[j2][j] for j2 in range(n))
            term2 = sum(dP[j2][i][j] * V[j2] for j2 in range(n))
            M[i][j] = term1 - term2
    # symmetrize
    Ms = [[0.5 * (M[i][j] + M[j][i]) for j in range(n)] for i in range(n)]
    return Ms


def _min_generalized_eig(Ms, metric: MetricField, grid: Grid) -> np.ndarray:
    """Nodewise smallest mu with M >= mu * b (generalized eigenvalue)."""
    n = grid.dim
    if n == 1:
        return Ms[0][0] / metric.comps[0]
    m11, m12, m22 = Ms[0][0], Ms[0][1], Ms[1][1]
    b11, b12, b22 = metric.comps
    detb = b11 * b22 - b12**2
    # det(M - mu b) = 0: detb*mu^2 - (m11 b22 + m22 b11 - 2 m12 b12) mu + detM = 0
    mid = m11 * b22 + m22 * b11 - 2.0 * m12 * b12
    detm = m11 * m22 - m12**2
    disc = np.maximum(mid**2 - 4.0 * detb * detm, 0.0)
    return (mid - np.sqrt(disc)) / (2.0 * detb)


def check_weight_condition(
    metric: MetricField, weight, grid: Grid
) -> WeightConditionReport:
    """Certify the convexity-type matrix bound and the no-critical-point bound.

    mu0 is the nodewise minimum generalized eigenvalue of (M(x), b(x)); the
    continuum condition is pointwise, so the certificate is exact on nodes
    and tightens under refinement.
    """
    d = weight.nodal_value(grid)
    if np.min(d) <= 0.0:
        raise NonPositiveWeight(
            f"weight minimum {np.min(d):.6g} is not strictly positive"
        )
    metric.validate()

    Ms = _convexity_matrix(metric, weight, grid)
    mu_nodes = _min_generalized_eig(Ms, metric, grid)
    mu0 = float(np.min(mu_nodes))

    dg = weight.nodal_gradient(grid)
    grad_norm = np.sqrt(sum(g**2 for g in dg))
    min_grad = float(np.min(grad_norm))

    ok = (mu0 > 0.0) and (min_grad > 0.0)
    weight.mu0 = mu0
    weight.min_grad = min_grad
    return WeightConditionReport(mu0=mu0, min_grad=min_grad, ok=ok)


@dataclass(frozen=True)
class ObservationWindowReport:
    R0: float
    R1: float
    T0: float
    flags: tuple[bool, bool, bool, bool]
    ok: bool


def check_observation_window(
    weight, metric: MetricField, grid: Grid, c0: float, c1: float
) -> ObservationWindowReport:
    """Check the four admissibility flags tying d, c0, c1 and T together.

    (1) min over nodes of (1/4) sum b^ij d_i d_j >= R1^2 = max d,
    (2) T > 2 R1,
    (3) (2 R1 / T)^2 < c1 < 2 R1 / T,
    (4) mu0 - 4 c1 - c0 > 0.
    """
    d = weight.nodal_value(grid)
    R1 = float(np.sqrt(np.max(d)))
    R0 = float(np.sqrt(np.min(d)))
    T0 = 2.0 * R1

    dg = weight.nodal_gradient(grid)
    bdg = metric.apply(dg)
    quarter_form = 0.25 * sum(bdg[k] * dg[k] for k in range(grid.dim))
    tol = 1e-12 * max(1.0, R1**2)
    flag1 = bool(np.min(quarter_form) >= R1**2 - tol)
    flag2 = bool(grid.T > T0)
    ratio = 2.0 * R1 / grid.T
    flag3 = bool(ratio**2 < c1 < ratio)
    mu0 = weight.mu0
    if mu0 is None:
        mu0 = check_weight_condition(metric, weight, grid).mu0
    flag4 = bool(mu0 - 4.0 * c1 - c0 > 0.0)
    flags = (flag1, flag2, flag3, flag4)
    return ObservationWindowReport(
        R0=R0, R1=R1, T0=T0, flags=flags, ok=all(flags)
    )


# ---------------------------------------------------------------------------
# Observation boundary


@dataclass
class BoundaryFace:
    """One face of the rectangular boundary: all nodes with fixed axis index."""

    axis: int
    side: int  # 0 = low end, 1 = high end
    normal: np.ndarray  # outward unit normal, shape (dim,)
    indices: tuple  # advanced index selecting the face nodes in a nodal array
    points: np.ndarray  # (n_face, dim) coordinates
    gamma0: np.ndarray  # (n_face,) bool


@dataclass
class BoundaryPartition:
    grid: Grid
    faces: list[BoundaryFace]
    delta: float
    collar_mask: np.ndarray  # bool over grid nodes

    def gamma0_points(self) -> np.ndarray:
        pts = [f.points[f.gamma0] for f in self.faces]
        pts = [p for p in pts if len(p)]
        if not pts:
            return np.empty((0, self.grid.dim))
        return np.concatenate(pts, axis=0)

    def gamma0_face_count(self) -> int:
        return sum(int(np.any(f.gamma0)) for f in self.faces)

    def collar_count(self) -> int:
        return int(np.count_nonzero(self.collar_mask))


def _boundary_faces(grid: Grid):
    faces = []
    pts = grid.points()
    for axis in range(grid.dim):
        for side in (0, 1):
            normal = np.zeros(grid.dim)
            normal[axis] = -1.0 if side == 0 else 1.0
            idx = [slice(None)] * grid.dim
            idx[axis] = 0 if side == 0 else grid.nx[axis] - 1
            idx = tuple(idx)
            face_pts = pts[idx].reshape(-1, grid.dim)
            faces.append((axis, side, normal, idx, face_pts))
    return faces


def compute_observation_boundary(
    weight, metric: MetricField, grid: Grid, delta: float
) -> BoundaryPartition:
    """Tag boundary nodes with strictly outgoing metric-weighted flux of grad d,
    and build the interior collar of width delta around the tagged set.

    Tagging uses the machine sign with no tolerance: nodes with exactly zero
    flux are excluded.
    """
    dg = weight.nodal_gradient(grid)
    bdg = metric.apply(dg)  # (b grad d)^j per axis

    faces = []
    any_tagged = False
    for axis, side, normal, idx, face_pts in _boundary_faces(grid):
        flux = sum(bdg[j][idx] * normal[j] for j in range(grid.dim))
        flux = np.asarray(flux).reshape(-1)
        tagged = flux > 0.0
        any_tagged = any_tagged or bool(np.any(tagged))
        faces.append(
            BoundaryFace(
                axis=axis,
                side=side,
                normal=normal,
                indices=idx,
                points=face_pts,
                gamma0=tagged,
            )
        )
    if not any_tagged:
        raise EmptyGamma0(
            "no boundary node has outgoing flux; observation geometry unusable"
        )

    gamma_pts = np.concatenate(
        [f.points[f.gamma0] for f in faces if np.any(f.gamma0)], axis=0
    )
    pts = grid.points().reshape(-1, grid.dim)
    min_dist = np.full(len(pts), np.inf)
    # loop over tagged boundary nodes to keep memory flat
    for gp in gamma_pts:
        d2 = np.sum((pts - gp) ** 2, axis=1)
        np.minimum(min_dist, d2, out=min_dist)
    collar = (np.sqrt(min_dist) <= delta + 1e-12).reshape(grid.nx)

    return BoundaryPartition(
        grid=grid, faces=faces, delta=delta, collar_mask=collar
    )
