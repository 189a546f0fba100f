"""Immersed-boundary finite-element PDE solving on regular background grids.

PDEs on irregular domains are solved by minimizing a finite-element loss
over nodal fields on a uniform grid; geometry enters as an oriented,
area-weighted boundary point cloud classified by generalized winding
numbers or an Eikonal signed-distance field.
"""

from ibfem.grid import (
    BackgroundGrid,
    NodalField,
    QuadratureRule,
    gauss_rule,
    integrate_masked,
    interpolate,
    interpolate_gradient,
    interpolate_gradient_many,
    interpolate_many,
    shape_gradients,
    shape_values,
)
from ibfem.geometry import (
    BoundaryPointCloud,
    SplineShapeSpec,
    circle_cloud,
    closed_spline_cloud,
    read_cloud,
    sample_spline_shape,
    write_cloud,
)
from ibfem.occupancy import (
    ACTIVE,
    CUT,
    INACTIVE,
    OccupancyField,
    classify_elements,
    eikonal_sdf,
    occupancy_grid,
    winding_number,
    winding_numbers,
)
from ibfem.residual import (
    LossBreakdown,
    LossWeights,
    PdeProblem,
    PoissonSystem,
    boundary_penalty,
    exterior_penalty,
    loss_gradient,
    masked_l2_norm,
    poisson_residual,
    total_loss,
)
from ibfem.ns import NavierStokesSystem, ns_residual, solve_navier_stokes

__version__ = "0.1.0"
