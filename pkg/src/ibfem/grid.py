"""Bilinear finite-element kernel on a uniform axis-aligned background grid.

Nodes are numbered row-major with x fastest; element-local corners run
counterclockwise from the lower-left corner. All operations are pure
functions of immutable inputs and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

# Reference-element corner coordinates, counterclockwise from lower-left.
CORNER_XI = np.array([-1.0, 1.0, 1.0, -1.0])
CORNER_ETA = np.array([-1.0, -1.0, 1.0, 1.0])

_LOCAL_TOL = 1e-12

# 1D Gauss-Legendre nodes/weights on [-1, 1]; order p is exact through
# polynomial degree 2p - 1.
_GAUSS_1D = {
    1: (np.array([0.0]), np.array([2.0])),
    2: (np.array([-1.0, 1.0]) / np.sqrt(3.0), np.array([1.0, 1.0])),
    3: (
        np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)]),
        np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0]),
    ),
}


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor-product Gauss rule on the reference element [-1, 1]^d."""

    points: np.ndarray  # (n_points, d) local coordinates
    weights: np.ndarray  # (n_points,) positive weights

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        wts = np.asarray(self.weights, dtype=float)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)
        if np.any(wts <= 0):
            raise ValueError("quadrature weights must be positive")
        measure = 2.0 ** pts.shape[1]
        if abs(wts.sum() - measure) > 1e-12 * measure:
            raise ValueError(
                f"quadrature weights sum to {wts.sum()}, expected {measure}"
            )

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def gauss_rule(order: int, dim: int = 2) -> QuadratureRule:
    """Tensor-product Gauss-Legendre rule of the given 1D order.

    Supported orders are 1, 2 and 3; anything else raises ValueError.
    """
    if order not in _GAUSS_1D:
        raise ValueError(f"unsupported Gauss order {order} (supported: 1, 2, 3)")
    pts1, wts1 = _GAUSS_1D[order]
    if dim == 1:
        return QuadratureRule(pts1[:, None], wts1)
    grids = np.meshgrid(*([pts1] * dim), indexing="ij")
    pts = np.stack([g.ravel(order="F") for g in grids], axis=1)  # x fastest
    wgrids = np.meshgrid(*([wts1] * dim), indexing="ij")
    wts = np.prod(np.stack([g.ravel(order="F") for g in wgrids], axis=1), axis=1)
    return QuadratureRule(pts, wts)


def _check_local(local: np.ndarray) -> np.ndarray:
    local = np.asarray(local, dtype=float)
    if np.any(np.abs(local) > 1.0 + _LOCAL_TOL):
        raise ValueError(f"local coordinates {local} outside reference element")
    return local


def shape_values(local: Sequence[float]) -> np.ndarray:
    """Bilinear basis values at a reference-element point; sums to 1."""
    local = _check_local(local)
    xi, eta = local
    return 0.25 * (1.0 + CORNER_XI * xi) * (1.0 + CORNER_ETA * eta)


def shape_gradients(local: Sequence[float], h: Sequence[float]) -> np.ndarray:
    """Physical-space basis gradients (4 x 2) on a cell of size h.

    Rows sum to the zero vector (gradient of the partition of unity).
    """
    local = _check_local(local)
    xi, eta = local
    hx, hy = np.asarray(h, dtype=float)
    dxi = 0.25 * CORNER_XI * (1.0 + CORNER_ETA * eta) * (2.0 / hx)
    deta = 0.25 * CORNER_ETA * (1.0 + CORNER_XI * xi) * (2.0 / hy)
    return np.stack([dxi, deta], axis=1)


def shape_values_many(local: np.ndarray) -> np.ndarray:
    """Basis values at many reference points: (m, 2) -> (m, 4)."""
    local = np.asarray(local, dtype=float)
    xi = local[:, 0:1]
    eta = local[:, 1:2]
    return 0.25 * (1.0 + CORNER_XI[None, :] * xi) * (1.0 + CORNER_ETA[None, :] * eta)


def shape_gradients_many(local: np.ndarray, h: Sequence[float]) -> np.ndarray:
    """Physical basis gradients at many reference points: (m, 2) -> (m, 4, 2)."""
    local = np.asarray(local, dtype=float)
    hx, hy = np.asarray(h, dtype=float)
    xi = local[:, 0:1]
    eta = local[:, 1:2]
    dxi = 0.25 * CORNER_XI[None, :] * (1.0 + CORNER_ETA[None, :] * eta) * (2.0 / hx)
    deta = 0.25 * CORNER_ETA[None, :] * (1.0 + CORNER_XI[None, :] * xi) * (2.0 / hy)
    return np.stack([dxi, deta], axis=2)


@dataclass(frozen=True)
class BackgroundGrid:
    """Uniform axis-aligned grid of bilinear elements over a box.

    ``cells`` is the element count per axis (an int applies to both axes);
    ``bounds`` is ((x0, x1), (y0, y1)) and defaults to the unit square.
    """

    cells: tuple[int, int]
    bounds: tuple[tuple[float, float], tuple[float, float]] = (
        (0.0, 1.0),
        (0.0, 1.0),
    )

    def __post_init__(self):
        cells = self.cells
        if np.isscalar(cells):
            cells = (int(cells), int(cells))
        cells = (int(cells[0]), int(cells[1]))
        if cells[0] < 1 or cells[1] < 1:
            raise ValueError(f"cell counts must be positive, got {cells}")
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        for lo, hi in bounds:
            if not hi > lo:
                raise ValueError(f"degenerate domain bounds {bounds}")
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "bounds", bounds)

    @property
    def dim(self) -> int:
        return 2

    @property
    def nx(self) -> int:
        return self.cells[0]

    @property
    def ny(self) -> int:
        return self.cells[1]

    @cached_property
    def h(self) -> np.ndarray:
        return np.array(
            [
                (self.bounds[0][1] - self.bounds[0][0]) / self.nx,
                (self.bounds[1][1] - self.bounds[1][0]) / self.ny,
            ]
        )

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def cell_jacobian(self) -> float:
        """|J| of the reference-to-physical map, (hx/2)(hy/2)."""
        return float(self.h[0] * self.h[1] / 4.0)

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(N, 2) node coordinates, row-major with x fastest."""
        x = np.linspace(self.bounds[0][0], self.bounds[0][1], self.nx + 1)
        y = np.linspace(self.bounds[1][0], self.bounds[1][1], self.ny + 1)
        X, Y = np.meshgrid(x, y)  # Y slowest, matching node ordering
        return np.stack([X.ravel(), Y.ravel()], axis=1)

    @cached_property
    def element_corners(self) -> np.ndarray:
        """(n_el, 4) node indices per element, CCW from lower-left."""
        ei, ej = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        ei = ei.ravel()
        ej = ej.ravel()
        n00 = ej * (self.nx + 1) + ei
        return np.stack(
            [n00, n00 + 1, n00 + self.nx + 2, n00 + self.nx + 1], axis=1
        )

    @cached_property
    def element_centers(self) -> np.ndarray:
        corners = self.element_corners
        return self.node_coords[corners].mean(axis=1)

    def node_index(self, i: int, j: int) -> int:
        return j * (self.nx + 1) + i

    def element_index(self, ei: int, ej: int) -> int:
        return ej * self.nx + ei

    def contains(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        (x0, x1), (y0, y1) = self.bounds
        return (
            (points[:, 0] >= x0)
            & (points[:, 0] <= x1)
            & (points[:, 1] >= y0)
            & (points[:, 1] <= y1)
        )

    def element_of(self, points: np.ndarray) -> np.ndarray:
        """Owning element of each physical point (half-open cells, the last
        element along each axis also owning its closing face)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        inside = self.contains(points)
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise ValueError(
                f"point {points[bad]} lies outside the grid domain {self.bounds}"
            )
        (x0, _), (y0, _) = self.bounds
        ei = np.floor((points[:, 0] - x0) / self.h[0]).astype(int)
        ej = np.floor((points[:, 1] - y0) / self.h[1]).astype(int)
        ei = np.clip(ei, 0, self.nx - 1)
        ej = np.clip(ej, 0, self.ny - 1)
        return ej * self.nx + ei

    def local_coords(self, elements: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Reference coordinates of physical points within given elements."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        centers = self.element_centers[np.atleast_1d(elements)]
        return np.clip(2.0 * (points - centers) / self.h, -1.0, 1.0)

    def wall_nodes(self, side: str) -> np.ndarray:
        """Node indices on one outer wall: 'left', 'right', 'bottom', 'top'."""
        i = np.arange(self.nx + 1)
        j = np.arange(self.ny + 1)
        if side == "left":
            return j * (self.nx + 1)
        if side == "right":
            return j * (self.nx + 1) + self.nx
        if side == "bottom":
            return i
        if side == "top":
            return self.ny * (self.nx + 1) + i
        raise ValueError(f"unknown wall side {side!r}")


@dataclass
class NodalField:
    """Per-node unknowns on a background grid.

    For ``n_dof > 1`` components are stored blockwise: component c of node i
    lives at ``values[c * n_nodes + i]``.
    """

    grid: BackgroundGrid
    values: np.ndarray
    n_dof: int = 1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        expected = self.grid.n_nodes * self.n_dof
        if self.values.size != expected:
            raise ValueError(
                f"field has {self.values.size} values, expected {expected}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def zeros(cls, grid: BackgroundGrid, n_dof: int = 1) -> "NodalField":
        return cls(grid, np.zeros(grid.n_nodes * n_dof), n_dof)

    @classmethod
    def from_function(
        cls, grid: BackgroundGrid, fn: Callable, n_dof: int = 1
    ) -> "NodalField":
        """Sample ``fn(x, y)`` at the nodes; for n_dof > 1 fn returns a
        tuple/array of per-component arrays."""
        xy = grid.node_coords
        out = fn(xy[:, 0], xy[:, 1])
        if n_dof == 1:
            values = np.broadcast_to(np.asarray(out, dtype=float), (grid.n_nodes,))
        else:
            values = np.concatenate(
                [np.broadcast_to(np.asarray(c, float), (grid.n_nodes,)) for c in out]
            )
        return cls(grid, values.copy(), n_dof)

    def component(self, c: int) -> np.ndarray:
        n = self.grid.n_nodes
        return self.values[c * n : (c + 1) * n]

    def copy(self) -> "NodalField":
        return NodalField(self.grid, self.values.copy(), self.n_dof)


def _corner_values(field: NodalField, elements: np.ndarray) -> np.ndarray:
    """(m, 4, n_dof) corner values for the given elements."""
    corners = field.grid.element_corners[elements]  # (m, 4)
    cols = [field.component(c)[corners] for c in range(field.n_dof)]
    return np.stack(cols, axis=2)


def interpolate_many(field: NodalField, points: np.ndarray) -> np.ndarray:
    """u^h at many physical points: (m, 2) -> (m,) or (m, n_dof)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    elems = field.grid.element_of(points)
    local = field.grid.local_coords(elems, points)
    B = shape_values_many(local)  # (m, 4)
    vals = np.einsum("mc,mcd->md", B, _corner_values(field, elems))
    return vals[:, 0] if field.n_dof == 1 else vals


def interpolate(field: NodalField, p: Sequence[float]):
    """u^h(p) at a single physical point (scalar for n_dof == 1)."""
    out = interpolate_many(field, np.asarray(p, dtype=float)[None, :])
    return float(out[0]) if field.n_dof == 1 else out[0]


def interpolate_gradient_many(field: NodalField, points: np.ndarray) -> np.ndarray:
    """grad u^h at many points: (m, 2) -> (m, 2) or (m, n_dof, 2).

    The gradient is piecewise-defined; each point reports its owning
    element's value.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    elems = field.grid.element_of(points)
    local = field.grid.local_coords(elems, points)
    G = shape_gradients_many(local, field.grid.h)  # (m, 4, 2)
    grads = np.einsum("mcg,mcd->mdg", G, _corner_values(field, elems))
    return grads[:, 0, :] if field.n_dof == 1 else grads


def interpolate_gradient(field: NodalField, p: Sequence[float]) -> np.ndarray:
    out = interpolate_gradient_many(field, np.asarray(p, dtype=float)[None, :])
    return out[0]


def integrate_masked(
    grid: BackgroundGrid,
    active_elements,
    integrand: Callable[[int, np.ndarray], float],
    rule: QuadratureRule | None = None,
) -> float:
    """Sum of w * |J| * integrand(element, gauss point) over active elements.

    ``active_elements`` is an iterable of element ids or a boolean mask.
    Per-element contributions commute, so parallel evaluation with an
    order-independent reduction is legal; floating-point totals may then
    differ across thread counts by <= 1e-10 relative.
    """
    if rule is None:
        rule = gauss_rule(2, dim=2)
    active = np.asarray(list(active_elements) if not isinstance(
        active_elements, np.ndarray) else active_elements)
    if active.dtype == bool:
        active = np.flatnonzero(active)
    detj = grid.cell_jacobian
    centers = grid.element_centers
    half_h = grid.h / 2.0
    total = 0.0
    for e in active:
        center = centers[e]
        for pt, w in zip(rule.points, rule.weights):
            x = center + half_h * pt
            total += w * detj * integrand(int(e), x)
    return total
