"""Steady incompressible Navier-Stokes residual and solver on the masked
background grid.

Unknowns per node are (u_x, u_y, p), stored blockwise in a single vector
of length 3N. The weak momentum residual per velocity test function is

    int  B_i (u . grad) u_c  +  nu grad B_i . grad u_c  -  p d_c B_i
         -  B_i f_c

(pressure integrated by parts; do-nothing outflow), and the continuity
residual per pressure test function is

    int  B_i div u  +  eps_p grad B_i . grad p,

where the eps_p = c h^2 pressure Laplacian stabilizes the equal-order
bilinear velocity/pressure pairing (checkerboard modes otherwise).
Gauss points inside the object are masked exactly as for Poisson, and
the pde loss term carries the same cell-measure normalization.
Wall/inlet velocities are imposed strongly; object no-slip enters
through the boundary penalty; the exterior penalty pins all three dofs
of object-interior nodes to the fill value.
"""

from __future__ import annotations

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
from ibfem.occupancy import OccupancyField, gauss_point_mask
from ibfem.residual import LossBreakdown, LossWeights, PdeProblem, WALL_SIDES, _evaluate, boundary_operator


def _wall_velocity_dofs(grid: BackgroundGrid, prob: PdeProblem):
    """Strongly imposed velocity dofs: (dof indices, values) in the 3N
    layout. Sides are visited left, right, bottom, top; later sides win
    on shared corner nodes."""
    n = grid.n_nodes
    assign: dict[int, float] = {}
    for side in WALL_SIDES:
        data = prob.walls.get(side)
        if data is None:
            continue
        nodes = grid.wall_nodes(side)
        xy = grid.node_coords[nodes]
        for comp in (0, 1):
            vals = _evaluate(data[comp], xy[:, 0], xy[:, 1])
            for node, v in zip(nodes, vals):
                assign[comp * n + int(node)] = float(v)
    if not assign:
        return np.array([], dtype=int), np.array([])
    dofs = np.array(sorted(assign), dtype=int)
    return dofs, np.array([assign[d] for d in dofs])


class NavierStokesSystem:
    """Residual, exact Jacobian and loss machinery for the steady NS
    problem; solved by damped Gauss-Newton on the stacked least squares."""

    def __init__(
        self,
        grid: BackgroundGrid,
        occ: OccupancyField,
        prob: PdeProblem,
        cloud: BoundaryPointCloud | None = None,
        weights: LossWeights = LossWeights(),
        rule: QuadratureRule | None = None,
        div_stab: float = 0.0,
        grad_div: float = 1.0,
    ):
        if prob.kind != "navier_stokes":
            raise ValueError("NavierStokesSystem requires a navier_stokes problem")
        occ.require_classified()
        self.grid = grid
        self.occ = occ
        self.prob = prob
        self.cloud = cloud
        self.weights = weights
        self.rule = rule if rule is not None else gauss_rule(2)
        self.lambda1, self.lambda2 = weights.effective(grid)
        self.n = grid.n_nodes
        self.eps_p = prob.pressure_stab * float(min(grid.h)) ** 2
        self.pde_scale = 1.0 / float(grid.h[0] * grid.h[1])
        # optional least-squares control of the pointwise divergence at
        # the Gauss points (used by the loss path)
        self.div_stab = div_stab
        # grad-div stabilization inside the momentum rows: the weak
        # continuity rows alone leave oscillatory divergence modes
        # uncontrolled on the equal-order pairing. A scalar applies
        # uniformly; a per-element array localizes the weight (e.g. to
        # the band around the object where the divergence noise lives).
        self.grad_div = (
            np.full(grid.n_elements, float(grad_div))
            if np.isscalar(grad_div)
            else np.asarray(grad_div, dtype=float)
        )

        self.mask = gauss_point_mask(occ, self.rule)  # (n_el, n_g)
        self.B = shape_values_many(self.rule.points)
        self.G = shape_gradients_many(self.rule.points, grid.h)
        self.wj = self.rule.weights * grid.cell_jacobian
        self.corners = grid.element_corners

        self.dirichlet_dofs, self.dirichlet_values = _wall_velocity_dofs(grid, prob)
        interior = np.flatnonzero(occ.node_interior)
        # the object interior inherits the no-slip value for the velocity
        # components only: pressure has no boundary data on the object, so
        # its interior dofs receive a tiny ridge (below) instead of a fill
        ext_dofs = np.concatenate([c * self.n + interior for c in range(2)])
        self.exterior_dofs = np.setdiff1d(ext_dofs, self.dirichlet_dofs)
        self.pressure_ridge_dofs = 2 * self.n + interior
        self.pressure_ridge = 1e-6
        # rows replaced after volume assembly: strong walls + masked interior
        self._row_keep = np.ones(3 * self.n)
        self._row_keep[self.dirichlet_dofs] = 0.0
        self._row_keep[np.concatenate([c * self.n + interior for c in range(3)])] = 0.0

        if cloud is not None:
            Cb = boundary_operator(grid, cloud, 1.0, 0.0)
            zero = sp.csr_matrix((cloud.n, self.n))
            self.Cv = sp.vstack(
                [sp.hstack([Cb, zero, zero]), sp.hstack([zero, Cb, zero])]
            ).tocsr()
            if np.isscalar(prob.bc_value):
                gb = np.full(cloud.n, float(prob.bc_value))
                self.gv = np.concatenate([gb, gb])
            else:
                xy = cloud.points
                self.gv = np.concatenate(
                    [
                        _evaluate(prob.bc_value[0], xy[:, 0], xy[:, 1]),
                        _evaluate(prob.bc_value[1], xy[:, 0], xy[:, 1]),
                    ]
                )
        else:
            self.Cv = None
            self.gv = None

    # -- residual and Jacobian -------------------------------------------

    def residual(self, U: np.ndarray) -> np.ndarray:
        n = self.n
        ux, uy, p = U[:n], U[n : 2 * n], U[2 * n :]
        corners = self.corners
        R = np.zeros(3 * n)
        centers = self.grid.element_centers
        half_h = self.grid.h / 2.0
        ux_c, uy_c, p_c = ux[corners], uy[corners], p[corners]
        for g in range(self.rule.n_points):
            els = np.flatnonzero(self.mask[:, g])
            if els.size == 0:
                continue
            B, G, w = self.B[g], self.G[g], self.wj[g]
            uxg = ux_c[els] @ B
            uyg = uy_c[els] @ B
            pg = p_c[els] @ B
            gux = ux_c[els] @ G  # (m, 2)
            guy = uy_c[els] @ G
            gp = p_c[els] @ G
            conv_x = uxg * gux[:, 0] + uyg * gux[:, 1]
            conv_y = uxg * guy[:, 0] + uyg * guy[:, 1]
            div = gux[:, 0] + guy[:, 1]
            xg = centers[els] + half_h * self.rule.points[g]
            if np.isscalar(self.prob.forcing):
                fx = fy = np.full(els.size, float(self.prob.forcing))
            else:
                fx = _evaluate(self.prob.forcing[0], xg[:, 0], xg[:, 1])
                fy = _evaluate(self.prob.forcing[1], xg[:, 0], xg[:, 1])
            visc_x = self.prob.nu * (gux @ G.T)  # (m, 4)
            visc_y = self.prob.nu * (guy @ G.T)
            gd = self.grad_div[els] * div
            rx = w * (
                np.outer(conv_x - fx, B)
                + visc_x
                + (gd - pg)[:, None] * G[:, 0][None, :]
            )
            ry = w * (
                np.outer(conv_y - fy, B)
                + visc_y
                + (gd - pg)[:, None] * G[:, 1][None, :]
            )
            rp = w * (np.outer(div, B) + self.eps_p * (gp @ G.T))
            c = corners[els]
            np.add.at(R, c, rx)
            np.add.at(R, n + c, ry)
            np.add.at(R, 2 * n + c, rp)
        R *= self._row_keep
        if self.dirichlet_dofs.size:
            R[self.dirichlet_dofs] = U[self.dirichlet_dofs] - self.dirichlet_values
        return R

    def jacobian(self, U: np.ndarray) -> sp.csr_matrix:
        """Exact sparse Jacobian dR/dU."""
        n = self.n
        ux, uy = U[:n], U[n : 2 * n]
        corners = self.corners
        ux_c, uy_c = ux[corners], uy[corners]
        rows, cols, vals = [], [], []
        for g in range(self.rule.n_points):
            els = np.flatnonzero(self.mask[:, g])
            if els.size == 0:
                continue
            B, G, w = self.B[g], self.G[g], self.wj[g]
            m = els.size
            uxg = ux_c[els] @ B
            uyg = uy_c[els] @ B
            gux = ux_c[els] @ G
            guy = uy_c[els] @ G
            c = corners[els]  # (m, 4)

            visc = self.prob.nu * (G @ G.T)  # (4, 4)
            pstab = self.eps_p * (G @ G.T)
            gde = self.grad_div[els][:, None, None]
            gdxx = gde * np.outer(G[:, 0], G[:, 0])[None, :, :]
            gdxy = gde * np.outer(G[:, 0], G[:, 1])[None, :, :]
            gdyx = gde * np.outer(G[:, 1], G[:, 0])[None, :, :]
            gdyy = gde * np.outer(G[:, 1], G[:, 1])[None, :, :]
            # convection advected by the test-point velocity: u . grad B_j
            ugradB = uxg[:, None] * G[:, 0][None, :] + uyg[:, None] * G[:, 1][None, :]

            def scatter(row_block, col_block, local):
                rows.append((row_block * n + np.repeat(c, 4, axis=1)).ravel())
                cols.append((col_block * n + np.tile(c, (1, 4))).ravel())
                vals.append(local.reshape(m, 16).ravel())

            # momentum-x rows
            dxx = w * (
                np.einsum("i,j->ij", B, B)[None, :, :]
                * (gux[:, 0])[:, None, None]
                + np.einsum("i,mj->mij", B, ugradB)
                + visc[None, :, :]
                + gdxx
            )
            dxy = w * (
                np.einsum("i,j->ij", B, B)[None, :, :] * gux[:, 1][:, None, None]
                + gdxy
            )
            dxp = -w * np.einsum("i,j->ij", G[:, 0], B)[None, :, :] * np.ones(
                (m, 1, 1)
            )
            scatter(0, 0, dxx)
            scatter(0, 1, dxy)
            scatter(0, 2, dxp)
            # momentum-y rows
            dyy = w * (
                np.einsum("i,j->ij", B, B)[None, :, :]
                * (guy[:, 1])[:, None, None]
                + np.einsum("i,mj->mij", B, ugradB)
                + visc[None, :, :]
                + gdyy
            )
            dyx = w * (
                np.einsum("i,j->ij", B, B)[None, :, :] * guy[:, 0][:, None, None]
                + gdyx
            )
            dyp = -w * np.einsum("i,j->ij", G[:, 1], B)[None, :, :] * np.ones(
                (m, 1, 1)
            )
            scatter(1, 1, dyy)
            scatter(1, 0, dyx)
            scatter(1, 2, dyp)
            # continuity rows
            dpx = w * np.einsum("i,j->ij", B, G[:, 0])[None, :, :] * np.ones((m, 1, 1))
            dpy = w * np.einsum("i,j->ij", B, G[:, 1])[None, :, :] * np.ones((m, 1, 1))
            dpp = w * pstab[None, :, :] * np.ones((m, 1, 1))
            scatter(2, 0, dpx)
            scatter(2, 1, dpy)
            scatter(2, 2, dpp)

        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(3 * n, 3 * n),
        )
        J = sp.diags(self._row_keep) @ J
        if self.dirichlet_dofs.size:
            J = J + sp.csr_matrix(
                (
                    np.ones(self.dirichlet_dofs.size),
                    (self.dirichlet_dofs, self.dirichlet_dofs),
                ),
                shape=J.shape,
            )
        return J.tocsr()

    def _div_operator(self) -> sp.csr_matrix:
        """Stacked rows sqrt(w |J|) * div u evaluated at the unmasked Gauss
        points (grad-div stabilization block); cached."""
        if getattr(self, "_div_op", None) is not None:
            return self._div_op
        n = self.n
        rows, cols, vals = [], [], []
        row0 = 0
        for g in range(self.rule.n_points):
            els = np.flatnonzero(self.mask[:, g])
            if els.size == 0:
                continue
            G = self.G[g]
            c = self.corners[els]
            sw = np.sqrt(self.wj[g])
            r = row0 + np.arange(els.size)
            for comp in (0, 1):
                rows.append(np.repeat(r, 4))
                cols.append((comp * n + c).ravel())
                vals.append(np.tile(sw * G[:, comp], els.size))
            row0 += els.size
        op = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, 3 * n),
        )
        self._div_op = op
        return op

    def div_residuals(self, U: np.ndarray) -> np.ndarray:
        return self._div_operator() @ U

    # -- loss -------------------------------------------------------------

    def boundary_residuals(self, U: np.ndarray) -> np.ndarray:
        if self.Cv is None:
            return np.zeros(0)
        return self.Cv @ U - self.gv

    def exterior_residuals(self, U: np.ndarray) -> np.ndarray:
        return U[self.exterior_dofs] - self.prob.interior_value

    def loss(self, U: np.ndarray) -> LossBreakdown:
        r = self.residual(U)
        rb = self.boundary_residuals(U)
        re = self.exterior_residuals(U)
        rd = self.div_residuals(U)
        # divergence stabilization and the interior-pressure ridge are
        # accounted with the pde term
        pde = (
            self.pde_scale * float(r @ r)
            + self.div_stab * float(rd @ rd)
            + self.pressure_ridge * float(U[self.pressure_ridge_dofs] @ U[self.pressure_ridge_dofs])
        )
        bnd = self.lambda1 * float(rb @ rb)
        ext = self.lambda2 * float(re @ re)
        return LossBreakdown(pde, bnd, ext, pde + bnd + ext, self.lambda1, self.lambda2)

    def gradient(self, U: np.ndarray) -> np.ndarray:
        out = 2.0 * self.pde_scale * (self.jacobian(U).T @ self.residual(U))
        D = self._div_operator()
        out += 2.0 * self.div_stab * (D.T @ (D @ U))
        np.add.at(
            out,
            self.pressure_ridge_dofs,
            2.0 * self.pressure_ridge * U[self.pressure_ridge_dofs],
        )
        if self.Cv is not None:
            out += 2.0 * self.lambda1 * (self.Cv.T @ self.boundary_residuals(U))
        np.add.at(
            out, self.exterior_dofs, 2.0 * self.lambda2 * self.exterior_residuals(U)
        )
        return out

    # -- solve -----------------------------------------------------------

    @property
    def free_mask(self) -> np.ndarray:
        free = np.ones(3 * self.n, dtype=bool)
        free[self.dirichlet_dofs] = False
        return free

    def initial_values(self) -> np.ndarray:
        """Inlet profile extended across the channel, stilled inside the
        object; zero vertical velocity and pressure."""
        U = np.zeros(3 * self.n)
        inlet = self.prob.walls.get("left")
        if inlet is not None:
            xy = self.grid.node_coords
            U[: self.n] = _evaluate(inlet[0], xy[:, 0], xy[:, 1])
        U[: self.n][self.occ.node_interior] = self.prob.interior_value
        U[self.dirichlet_dofs] = self.dirichlet_values
        return U

    def solve_newton(
        self,
        U0: np.ndarray | None = None,
        max_iters: int = 40,
        tol: float = 1e-10,
        verbose: bool = False,
    ) -> tuple[NodalField, dict]:
        """Damped Newton solve of the penalized-Galerkin square system

            G(U) = R(U) + lambda1 Cv^T (Cv U - g)
                   + lambda2 (fill residuals) + pressure ridge = 0.

        Solving the weak equations exactly (rather than trading them in a
        least-squares balance) preserves mass conservation through the
        obstacle region; this is the solve the flow harness uses.
        Backtracking damps the Newton steps on |G|.
        """
        U = self.initial_values() if U0 is None else U0.copy()
        lam1, lam2 = self.lambda1, self.lambda2

        def G_of(U):
            G = self.residual(U)
            if self.Cv is not None:
                G += lam1 * (self.Cv.T @ self.boundary_residuals(U))
            np.add.at(G, self.exterior_dofs, lam2 * self.exterior_residuals(U))
            np.add.at(
                G,
                self.pressure_ridge_dofs,
                self.pressure_ridge * U[self.pressure_ridge_dofs],
            )
            return G

        extra = sp.csr_matrix((3 * self.n, 3 * self.n))
        if self.Cv is not None:
            extra = extra + lam1 * (self.Cv.T @ self.Cv)
        d = np.zeros(3 * self.n)
        d[self.exterior_dofs] += lam2
        d[self.pressure_ridge_dofs] += self.pressure_ridge
        extra = (extra + sp.diags(d)).tocsr()

        history = []
        for it in range(max_iters):
            G = G_of(U)
            gnorm = float(np.linalg.norm(G))
            history.append(gnorm)
            if verbose:
                print(f"  newton iter {it}: |G| = {gnorm:.3e}")
            if gnorm <= tol:
                break
            JG = (self.jacobian(U) + extra).tocsc()
            delta = spla.spsolve(JG, -G)
            step = 1.0
            for _ in range(30):
                U_try = U + step * delta
                g_try = float(np.linalg.norm(G_of(U_try)))
                if np.isfinite(g_try) and g_try < gnorm:
                    U = U_try
                    break
                step *= 0.5
            else:
                break
        diag = {
            "iterations": len(history),
            "final_system_norm": history[-1] if history else np.nan,
        }
        return NodalField(self.grid, U, n_dof=3), diag

    def solve(
        self,
        U0: np.ndarray | None = None,
        max_iters: int = 40,
        grad_tol: float = 1e-9,
        verbose: bool = False,
    ) -> tuple[NodalField, dict]:
        """Damped Gauss-Newton minimization of the stacked least squares.

        Returns the solution field and a convergence record (iterations,
        final loss, final gradient norm).
        """
        U = self.initial_values() if U0 is None else U0.copy()
        free = self.free_mask
        lam1, lam2 = self.lambda1, self.lambda2
        damping = 1e-8
        history = []
        sq = np.sqrt(self.pde_scale)
        sqd = np.sqrt(self.div_stab)
        D = self._div_operator()
        ridge = sp.csr_matrix(
            (
                np.full(self.pressure_ridge_dofs.size, np.sqrt(self.pressure_ridge)),
                (np.arange(self.pressure_ridge_dofs.size), self.pressure_ridge_dofs),
            ),
            shape=(self.pressure_ridge_dofs.size, 3 * self.n),
        )
        for it in range(max_iters):
            r = self.residual(U)
            J = self.jacobian(U)
            stacked_r = [sq * r, sqd * (D @ U), ridge @ U]
            stacked_J = [sq * J, sqd * D, ridge]
            if self.Cv is not None:
                stacked_r.append(np.sqrt(lam1) * self.boundary_residuals(U))
                stacked_J.append(np.sqrt(lam1) * self.Cv)
            if self.exterior_dofs.size:
                sel = sp.csr_matrix(
                    (
                        np.full(self.exterior_dofs.size, np.sqrt(lam2)),
                        (np.arange(self.exterior_dofs.size), self.exterior_dofs),
                    ),
                    shape=(self.exterior_dofs.size, 3 * self.n),
                )
                stacked_r.append(np.sqrt(lam2) * self.exterior_residuals(U))
                stacked_J.append(sel)
            r_all = np.concatenate(stacked_r)
            J_all = sp.vstack(stacked_J).tocsr()
            loss = float(r_all @ r_all)
            grad = 2.0 * (J_all.T @ r_all)
            gnorm = float(np.abs(grad[free]).max())
            history.append((loss, gnorm))
            if verbose:
                print(f"  gn iter {it}: loss {loss:.3e} grad {gnorm:.3e}")
            if gnorm <= grad_tol:
                break
            Jf = J_all[:, free]
            H = (Jf.T @ Jf).tocsc()
            rhs = -(Jf.T @ r_all)
            accepted = False
            for _ in range(12):
                delta = spla.spsolve(
                    H + damping * sp.eye(H.shape[0], format="csc"), rhs
                )
                U_try = U.copy()
                U_try[free] += delta
                loss_try = self._stacked_loss(U_try)
                if np.isfinite(loss_try) and loss_try < loss:
                    U = U_try
                    damping = max(damping / 3.0, 1e-12)
                    accepted = True
                    break
                damping *= 10.0
            if not accepted:
                break
        diag = {
            "iterations": len(history),
            "final_loss": history[-1][0] if history else np.nan,
            "final_grad_inf": history[-1][1] if history else np.nan,
        }
        return NodalField(self.grid, U, n_dof=3), diag

    def _stacked_loss(self, U: np.ndarray) -> float:
        return self.loss(U).total


def ns_residual(
    U: NodalField,
    grid: BackgroundGrid,
    occ: OccupancyField,
    prob: PdeProblem,
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Weak-form steady NS residual vector (momentum and continuity rows,
    strong wall rows collocated, object-interior rows zero)."""
    if U.n_dof != 3:
        raise ValueError("ns_residual requires a 3-dof field (u_x, u_y, p)")
    system = NavierStokesSystem(grid, occ, prob, cloud=None, weights=weights)
    return system.residual(U.values)


def solve_navier_stokes(
    grid: BackgroundGrid,
    occ: OccupancyField,
    cloud: BoundaryPointCloud | None,
    prob: PdeProblem,
    weights: LossWeights = LossWeights(),
    **kwargs,
) -> tuple[NodalField, dict]:
    system = NavierStokesSystem(grid, occ, prob, cloud=cloud, weights=weights)
    return system.solve(**kwargs)
