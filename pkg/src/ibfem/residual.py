"""Assembly of the combined immersed-boundary loss for Poisson problems.

The loss has three parts: the squared norm of the Galerkin residual over
the masked background grid (normalized by the cell measure so its weight
is resolution-consistent), a penalty tying interpolated field values at
the boundary cloud points to their prescribed data, and a penalty pinning
nodes inside the object to a fill value. For Poisson the loss is
quadratic in the nodal values, so the assembled sparse operators yield
exact gradients and a direct normal-equation solve of the minimizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ibfem.geometry import BoundaryPointCloud
from ibfem.grid import (
    BackgroundGrid,
    NodalField,
    QuadratureRule,
    gauss_rule,
    shape_gradients_many,
    shape_values_many,
)
from ibfem.occupancy import INACTIVE, OccupancyField, gauss_point_mask

WALL_SIDES = ("left", "right", "bottom", "top")


@dataclass
class PdeProblem:
    """Problem data: PDE kind, forcing, boundary data and coefficients.

    ``walls`` maps a side name to Dirichlet data (scalar or callable of
    x, y arrays), to None for a natural wall; a bare scalar applies to all
    four sides. For Navier-Stokes the per-side data is a pair (u_x, u_y)
    of scalars/callables. ``bc_value`` is the Robin data g on the object
    boundary; ``interior_value`` the fill value inside the object
    (defaults to g for constant Dirichlet data).
    """

    kind: str = "poisson"
    forcing: object = 0.0
    alpha: float = 1.0
    beta: float = 0.0
    bc_value: object = 0.0
    walls: object = None
    nu: float | None = None
    interior_value: float | None = None
    pressure_stab: float = 1.0

    def __post_init__(self):
        if self.kind not in ("poisson", "navier_stokes"):
            raise ValueError(f"unknown PDE kind {self.kind!r}")
        if self.alpha == 0.0 and self.beta == 0.0:
            raise ValueError("boundary operator requires (alpha, beta) != (0, 0)")
        if self.kind == "navier_stokes" and (self.nu is None or self.nu <= 0):
            raise ValueError("Navier-Stokes requires a positive viscosity")
        if self.walls is None:
            self.walls = {}
        elif not isinstance(self.walls, dict):
            self.walls = {side: self.walls for side in WALL_SIDES}
        if self.interior_value is None:
            self.interior_value = (
                self.bc_value if np.isscalar(self.bc_value) else 0.0
            )

    @property
    def n_dof(self) -> int:
        return 1 if self.kind == "poisson" else 3


@dataclass(frozen=True)
class LossWeights:
    """Penalty weights lambda1 (boundary) and lambda2 (exterior); with
    ``h_scaling`` both scale as 1/h for sharper boundary layers."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    h_scaling: bool = False

    def effective(self, grid: BackgroundGrid) -> tuple[float, float]:
        if self.h_scaling:
            h = float(min(grid.h))
            return self.lambda1 / h, self.lambda2 / h
        return self.lambda1, self.lambda2


@dataclass
class LossBreakdown:
    """The three loss terms of one evaluation plus their weighted total."""

    pde_term: float
    boundary_term: float
    exterior_term: float
    total: float
    lambda1: float
    lambda2: float


def _evaluate(data, x, y):
    """Scalar-or-callable problem data evaluated at coordinate arrays."""
    if callable(data):
        return np.broadcast_to(np.asarray(data(x, y), dtype=float), x.shape)
    return np.full(x.shape, float(data))


def wall_dirichlet(
    grid: BackgroundGrid, prob: PdeProblem
) -> tuple[np.ndarray, np.ndarray]:
    """Outer-wall Dirichlet node indices and values (scalar problems).

    Sides are visited in the fixed order left, right, bottom, top; a
    corner node shared by two Dirichlet sides takes the later value.
    """
    idx: dict[int, float] = {}
    for side in WALL_SIDES:
        data = prob.walls.get(side)
        if data is None:
            continue
        nodes = grid.wall_nodes(side)
        xy = grid.node_coords[nodes]
        vals = _evaluate(data, xy[:, 0], xy[:, 1])
        for n, v in zip(nodes, vals):
            idx[int(n)] = float(v)
    if not idx:
        return np.array([], dtype=int), np.array([])
    nodes = np.array(sorted(idx), dtype=int)
    return nodes, np.array([idx[n] for n in nodes])


def boundary_operator(
    grid: BackgroundGrid, cloud: BoundaryPointCloud, alpha: float, beta: float
) -> sp.csr_matrix:
    """Sparse rows mapping nodal values to alpha u + beta grad u . n at the
    cloud points."""
    inside = grid.contains(cloud.points)
    if not inside.all():
        bad = int(np.flatnonzero(~inside)[0])
        raise ValueError(
            f"cloud point {bad} at {cloud.points[bad]} lies outside the grid"
        )
    elems = grid.element_of(cloud.points)
    local = grid.local_coords(elems, cloud.points)
    corners = grid.element_corners[elems]
    entries = np.zeros((cloud.n, 4))
    if alpha != 0.0:
        entries += alpha * shape_values_many(local)
    if beta != 0.0:
        G = shape_gradients_many(local, grid.h)  # (m, 4, 2)
        entries += beta * np.einsum("mcg,mg->mc", G, cloud.normals)
    rows = np.repeat(np.arange(cloud.n), 4)
    return sp.csr_matrix(
        (entries.ravel(), (rows, corners.ravel())), shape=(cloud.n, grid.n_nodes)
    )


class PoissonSystem:
    """Precomputed sparse operators of the Poisson loss.

    residual(U) = A U - b, with stiffness rows masked by the occupancy,
    outer-wall Dirichlet rows replaced by collocated (U_i - g_i), and
    object-interior rows zeroed. The loss adds lambda1 |C U - g|^2 at the
    cloud points and lambda2 |U_j - g_in|^2 at object-interior nodes.
    Outer-wall values are imposed strongly during minimization: those
    nodes are fixed and excluded from the free unknowns.

    The pde term is |R|^2 / (hx hy): the cell-measure normalization keeps
    the residual's weight resolution-consistent. Without it the weak-form
    rows shrink like h^2 and refinement lets the minimizer trade the PDE
    away against the point penalties (the disk benchmark then diverges
    from the analytic solution as the grid is refined).
    """

    def __init__(
        self,
        grid: BackgroundGrid,
        occ: OccupancyField,
        prob: PdeProblem,
        cloud: BoundaryPointCloud | None = None,
        weights: LossWeights = LossWeights(),
        rule: QuadratureRule | None = None,
    ):
        if prob.kind != "poisson":
            raise ValueError("PoissonSystem requires a poisson problem")
        occ.require_classified()
        self.grid = grid
        self.occ = occ
        self.prob = prob
        self.cloud = cloud
        self.weights = weights
        self.rule = rule if rule is not None else gauss_rule(2)
        self.lambda1, self.lambda2 = weights.effective(grid)
        self.pde_scale = 1.0 / float(grid.h[0] * grid.h[1])

        self.dirichlet_nodes, self.dirichlet_values = wall_dirichlet(grid, prob)
        self.exterior_nodes = np.flatnonzero(occ.node_interior)
        # wall data wins over the interior fill on overlapping nodes
        self.exterior_nodes = np.setdiff1d(
            self.exterior_nodes, self.dirichlet_nodes, assume_unique=True
        )
        self._assemble()

    def _assemble(self):
        grid, occ, prob = self.grid, self.occ, self.prob
        rule = self.rule
        mask = gauss_point_mask(occ, rule)  # (n_el, n_g)
        mask[occ.element_labels == INACTIVE] = False
        corners = grid.element_corners
        B = shape_values_many(rule.points)  # (n_g, 4)
        G = shape_gradients_many(rule.points, grid.h)  # (n_g, 4, 2)
        wj = rule.weights * grid.cell_jacobian
        centers = grid.element_centers
        half_h = grid.h / 2.0

        rows, cols, vals = [], [], []
        b = np.zeros(grid.n_nodes)
        for g in range(rule.n_points):
            els = np.flatnonzero(mask[:, g])
            if els.size == 0:
                continue
            K = wj[g] * (G[g] @ G[g].T)  # (4, 4) same for every element
            c = corners[els]
            rows.append(np.repeat(c, 4, axis=1).ravel())
            cols.append(np.tile(c, (1, 4)).ravel())
            vals.append(np.tile(K.ravel(), els.size))
            xg = centers[els] + half_h * rule.points[g]
            fg = _evaluate(prob.forcing, xg[:, 0], xg[:, 1])
            np.add.at(b, c, wj[g] * fg[:, None] * B[g][None, :])

        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(grid.n_nodes, grid.n_nodes),
        )

        # replace wall rows with collocated Dirichlet terms and zero the
        # object-interior rows (those nodes belong to the exterior penalty)
        keep = np.ones(grid.n_nodes)
        keep[self.dirichlet_nodes] = 0.0
        keep[self.exterior_nodes] = 0.0
        A = sp.diags(keep) @ A
        b *= keep
        if self.dirichlet_nodes.size:
            A = A + sp.csr_matrix(
                (
                    np.ones(self.dirichlet_nodes.size),
                    (self.dirichlet_nodes, self.dirichlet_nodes),
                ),
                shape=A.shape,
            )
            b[self.dirichlet_nodes] = self.dirichlet_values
        self.A = A.tocsr()
        self.b = b

        if self.cloud is not None:
            self.C = boundary_operator(grid, self.cloud, prob.alpha, prob.beta)
            xy = self.cloud.points
            self.g = _evaluate(prob.bc_value, xy[:, 0], xy[:, 1])
        else:
            self.C = None
            self.g = None

    # -- loss pieces ----------------------------------------------------

    def residual(self, U: np.ndarray) -> np.ndarray:
        return self.A @ U - self.b

    def boundary_residuals(self, U: np.ndarray) -> np.ndarray:
        if self.C is None:
            return np.zeros(0)
        return self.C @ U - self.g

    def exterior_residuals(self, U: np.ndarray) -> np.ndarray:
        return U[self.exterior_nodes] - self.prob.interior_value

    def loss(self, U: np.ndarray) -> LossBreakdown:
        r = self.residual(U)
        rb = self.boundary_residuals(U)
        re = self.exterior_residuals(U)
        pde = self.pde_scale * float(r @ r)
        bnd = self.lambda1 * float(rb @ rb)
        ext = self.lambda2 * float(re @ re)
        return LossBreakdown(pde, bnd, ext, pde + bnd + ext, self.lambda1, self.lambda2)

    def gradient(self, U: np.ndarray) -> np.ndarray:
        out = 2.0 * self.pde_scale * (self.A.T @ self.residual(U))
        if self.C is not None:
            out += 2.0 * self.lambda1 * (self.C.T @ self.boundary_residuals(U))
        np.add.at(
            out,
            self.exterior_nodes,
            2.0 * self.lambda2 * self.exterior_residuals(U),
        )
        return out

    # -- solving ---------------------------------------------------------

    @property
    def free_mask(self) -> np.ndarray:
        free = np.ones(self.grid.n_nodes, dtype=bool)
        free[self.dirichlet_nodes] = False
        return free

    def initial_values(self) -> np.ndarray:
        U = np.zeros(self.grid.n_nodes)
        U[self.dirichlet_nodes] = self.dirichlet_values
        return U

    def hessian(self) -> sp.csr_matrix:
        """Constant Hessian of the quadratic loss (2 x normal equations)."""
        H = 2.0 * self.pde_scale * (self.A.T @ self.A)
        if self.C is not None:
            H = H + 2.0 * self.lambda1 * (self.C.T @ self.C)
        if self.exterior_nodes.size:
            d = np.zeros(self.grid.n_nodes)
            d[self.exterior_nodes] = 2.0 * self.lambda2
            H = H + sp.diags(d)
        return H.tocsr()

    def solve_direct(self) -> NodalField:
        """Exact minimizer: sparse solve of the stationarity system on the
        free nodes with wall values imposed strongly."""
        H = self.hessian().tocsc()
        U = self.initial_values()
        grad0 = self.gradient(U)
        free = self.free_mask
        Hff = H[free][:, free]
        delta = spla.spsolve(Hff, -grad0[free])
        U[free] += delta
        return NodalField(self.grid, U)

    def callbacks(self):
        """(loss_fn, grad_fn, theta0, inject) over the free nodal values,
        for use with the optimizer module."""
        U0 = self.initial_values()
        free = self.free_mask

        def inject(theta: np.ndarray) -> np.ndarray:
            U = U0.copy()
            U[free] = theta
            return U

        def loss_fn(theta: np.ndarray) -> float:
            return self.loss(inject(theta)).total

        def grad_fn(theta: np.ndarray) -> np.ndarray:
            return self.gradient(inject(theta))[free]

        return loss_fn, grad_fn, U0[free].copy(), inject


# -- spec-surface operations ---------------------------------------------


def poisson_residual(
    U: NodalField,
    grid: BackgroundGrid,
    occ: OccupancyField,
    prob: PdeProblem,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Galerkin residual vector of the masked weak form (wall rows
    collocated, object-interior rows zero)."""
    if U.n_dof != 1:
        raise ValueError("poisson_residual requires a scalar field")
    system = PoissonSystem(grid, occ, prob, cloud=None, weights=weights)
    return system.residual(U.values)


def boundary_penalty(
    U: NodalField,
    cloud: BoundaryPointCloud,
    prob: PdeProblem,
) -> tuple[float, np.ndarray]:
    """Unweighted boundary penalty: sum_i |alpha u + beta grad u . n - g|^2
    at the cloud points, plus the per-point residuals.

    For Navier-Stokes fields the penalty applies the Dirichlet data to
    both velocity components (residuals stacked u_x first).
    """
    grid = U.grid
    if U.n_dof == 1:
        C = boundary_operator(grid, cloud, prob.alpha, prob.beta)
        xy = cloud.points
        g = _evaluate(prob.bc_value, xy[:, 0], xy[:, 1])
        r = C @ U.values - g
    else:
        C = boundary_operator(grid, cloud, 1.0, 0.0)
        xy = cloud.points
        if np.isscalar(prob.bc_value):
            gx = gy = _evaluate(prob.bc_value, xy[:, 0], xy[:, 1])
        else:
            gx = _evaluate(prob.bc_value[0], xy[:, 0], xy[:, 1])
            gy = _evaluate(prob.bc_value[1], xy[:, 0], xy[:, 1])
        r = np.concatenate([C @ U.component(0) - gx, C @ U.component(1) - gy])
    return float(r @ r), r


def exterior_penalty(
    U: NodalField, occ: OccupancyField, g_in: float
) -> float:
    """Unweighted fill penalty over object-interior nodes (all dofs)."""
    idx = np.flatnonzero(occ.node_interior)
    total = 0.0
    for c in range(U.n_dof):
        r = U.component(c)[idx] - g_in
        total += float(r @ r)
    return total


def total_loss(
    U: NodalField,
    grid: BackgroundGrid,
    occ: OccupancyField,
    cloud: BoundaryPointCloud | None,
    prob: PdeProblem,
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """The combined loss: squared residual norm plus weighted penalties."""
    if prob.kind == "poisson":
        system = PoissonSystem(grid, occ, prob, cloud=cloud, weights=weights)
        return system.loss(U.values)
    from ibfem.ns import NavierStokesSystem

    system = NavierStokesSystem(grid, occ, prob, cloud=cloud, weights=weights)
    return system.loss(U.values)


def loss_gradient(
    U: NodalField,
    grid: BackgroundGrid,
    occ: OccupancyField,
    cloud: BoundaryPointCloud | None,
    prob: PdeProblem,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Exact analytic gradient of :func:`total_loss` with respect to the
    nodal values."""
    if prob.kind == "poisson":
        system = PoissonSystem(grid, occ, prob, cloud=cloud, weights=weights)
        return system.gradient(U.values)
    from ibfem.ns import NavierStokesSystem

    system = NavierStokesSystem(grid, occ, prob, cloud=cloud, weights=weights)
    return system.gradient(U.values)


def masked_l2_norm(
    field: NodalField,
    occ: OccupancyField,
    exact=None,
    rule: QuadratureRule | None = None,
) -> float:
    """L2 norm over the active region via the assembly quadrature.

    With ``exact`` (callable of x, y arrays) the norm of u^h - exact is
    returned; otherwise the norm of the field itself. Scalar fields only.
    """
    if field.n_dof != 1:
        raise ValueError("masked_l2_norm expects a scalar field")
    grid = field.grid
    if rule is None:
        rule = gauss_rule(2)
    mask = gauss_point_mask(occ, rule)
    B = shape_values_many(rule.points)
    wj = rule.weights * grid.cell_jacobian
    corners = grid.element_corners
    centers = grid.element_centers
    half_h = grid.h / 2.0
    vals_c = field.values[corners]  # (n_el, 4)
    total = 0.0
    for g in range(rule.n_points):
        els = np.flatnonzero(mask[:, g])
        if els.size == 0:
            continue
        u = vals_c[els] @ B[g]
        if exact is not None:
            xg = centers[els] + half_h * rule.points[g]
            u = u - np.asarray(exact(xg[:, 0], xg[:, 1]), dtype=float)
        total += wj[g] * float(u @ u)
    return float(np.sqrt(total))
