import numpy as np
import pytest

from ibfem.geometry import circle_cloud
from ibfem.grid import BackgroundGrid, NodalField, interpolate_many
from ibfem.occupancy import (
    ACTIVE,
    CUT,
    INACTIVE,
    OccupancyField,
    classify_elements,
    eikonal_sdf,
    gauss_point_mask,
    occupancy_grid,
    winding_number,
    winding_numbers,
)

CENTER = (0.5, 0.5)
R = 0.25


class TestWindingNumber:
    def test_disk_center(self):
        cloud = circle_cloud(CENTER, R, 1000)
        # dense-sampling oracle: the discretized contour integral of a
        # closed curve around an interior point tends to exactly 1
        oracle = winding_number(circle_cloud(CENTER, R, 10000), CENTER)
        assert abs(oracle - 1.0) < 1e-6
        assert abs(winding_number(cloud, CENTER) - 1.0) < 5e-3

    def test_far_outside(self):
        cloud = circle_cloud(CENTER, R, 1000)
        assert abs(winding_number(cloud, (0.99, 0.99))) < 5e-3

    def test_on_boundary_half(self):
        cloud = circle_cloud(CENTER, R, 1000)
        # query on the circle midway between two adjacent samples; a point
        # on a smooth boundary subtends half the full angle
        theta = np.pi * (2 * 0 + 1) / 1000
        q = np.array(CENTER) + R * np.array([np.cos(theta), np.sin(theta)])
        oracle = winding_number(circle_cloud(CENTER, R, 10000), q)
        assert abs(oracle - 0.5) < 0.05
        assert abs(winding_number(cloud, q) - 0.5) < 0.05

    def test_translation_equivariance(self):
        cloud = circle_cloud(CENTER, R, 200)
        q = np.array([0.6, 0.7])
        shift = np.array([1.7, -2.3])
        a = winding_number(cloud, q)
        b = winding_number(cloud.translated(shift), q + shift)
        assert abs(a - b) < 1e-12

    def test_scale_invariance(self):
        cloud = circle_cloud(CENTER, R, 200)
        q = np.array([0.58, 0.55])
        s = 3.7
        scaled_q = cloud.centroid + s * (q - cloud.centroid)
        a = winding_number(cloud, q)
        b = winding_number(cloud.scaled(s), scaled_q)
        assert abs(a - b) < 1e-10

    def test_3d_solid_angle_kernel(self):
        # Fibonacci sphere sample with uniform Voronoi-area shares; the
        # solid-angle sum at the center is exactly 1.
        n = 4000
        k = np.arange(n)
        z = 1 - 2 * (k + 0.5) / n
        r = np.sqrt(1 - z**2)
        phi = np.pi * (1 + np.sqrt(5)) * k
        pts = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
        from ibfem.geometry import BoundaryPointCloud

        cloud = BoundaryPointCloud(pts, pts.copy(), np.full(n, 4 * np.pi / n))
        assert abs(winding_number(cloud, (0.0, 0.0, 0.0)) - 1.0) < 1e-10
        assert abs(winding_number(cloud, (3.0, 0.0, 0.0))) < 1e-3

    def test_coincident_query_clamped(self):
        cloud = circle_cloud(CENTER, R, 100)
        val = winding_number(cloud, cloud.points[0])
        assert np.isfinite(val)


class TestOccupancyGrid:
    def test_disk_membership(self):
        grid = BackgroundGrid(64)
        cloud = circle_cloud(CENTER, R, 1000)
        occ = occupancy_grid(cloud, grid)
        dist = np.linalg.norm(grid.node_coords - CENTER, axis=1)
        analytic = dist < R
        disagreements = int(np.sum(occ.node_interior != analytic))
        assert disagreements <= 4 * 64

    def test_chi_plateaus_outside_band(self):
        grid = BackgroundGrid(64)
        cloud = circle_cloud(CENTER, R, 1000)
        occ = occupancy_grid(cloud, grid)
        dist = np.linalg.norm(grid.node_coords - CENTER, axis=1)
        h = grid.h[0]
        inside = dist < R - h
        outside = dist > R + h
        assert np.all(occ.chi[inside] > 0.95) and np.all(occ.chi[inside] < 1.05)
        assert np.all(occ.chi[outside] > -0.05) and np.all(occ.chi[outside] < 0.05)

    def test_tiny_cloud_no_interior(self):
        grid = BackgroundGrid(8)  # h = 0.125
        # R < h/2 disk centered mid-cell encloses no node at all
        cloud = circle_cloud((0.5625, 0.5625), 0.05, 16)
        occ = occupancy_grid(cloud, grid)
        assert occ.node_interior.sum() == 0

    def test_radial_monotonicity_along_ray(self):
        grid = BackgroundGrid(64)
        cloud = circle_cloud(CENTER, R, 1000)
        occ = occupancy_grid(cloud, grid)
        # ray x = 0.5, y from center upward: chi non-increasing within noise
        i_mid = 32
        idx = [j * 65 + i_mid for j in range(32, 65)]
        chi = occ.chi[idx]
        assert np.all(np.diff(chi) <= 5e-3)

    def test_partition_of_nodes(self):
        grid = BackgroundGrid(16)
        occ = occupancy_grid(circle_cloud(CENTER, R, 200), grid)
        assert np.all(occ.node_interior ^ occ.node_exterior)


class TestClassifyElements:
    def test_small_disk_yields_inactive_element(self):
        # disk centered on an element center of the 4-cell grid, wide
        # enough (R=0.24 > corner distance 0.177) to cover all four of its
        # corners: that element must be inactive
        grid = BackgroundGrid(4)
        cloud = circle_cloud((0.375, 0.375), 0.24, 256)
        occ = occupancy_grid(cloud, grid)
        assert np.sum(occ.element_labels == INACTIVE) >= 1

    def test_no_cloud_all_active(self):
        grid = BackgroundGrid(8)
        occ = occupancy_grid(None, grid)
        assert np.all(occ.element_labels == ACTIVE)

    def test_cut_count_grows_linearly(self):
        counts = {}
        for n_c in (32, 64, 128):
            grid = BackgroundGrid(n_c)
            occ = occupancy_grid(circle_cloud(CENTER, R, 2000), grid)
            counts[n_c] = int(np.sum(occ.element_labels == CUT))
        assert 1.5 <= counts[64] / counts[32] <= 2.5
        assert 1.5 <= counts[128] / counts[64] <= 2.5

    def test_cut_iff_mixed_corners(self):
        grid = BackgroundGrid(16)
        occ = occupancy_grid(circle_cloud(CENTER, R, 500), grid)
        interior = occ.node_interior[grid.element_corners]
        mixed = (interior.any(axis=1)) & (~interior.all(axis=1))
        np.testing.assert_array_equal(occ.element_labels == CUT, mixed)

    def test_inverted_swaps_sides(self):
        grid = BackgroundGrid(16)
        occ = occupancy_grid(circle_cloud(CENTER, R, 500), grid)
        inv = occ.inverted()
        np.testing.assert_array_equal(inv.node_interior, occ.node_exterior)
        # cut elements stay cut; active and inactive swap
        np.testing.assert_array_equal(
            inv.element_labels == CUT, occ.element_labels == CUT
        )
        np.testing.assert_array_equal(
            inv.element_labels == ACTIVE, occ.element_labels == INACTIVE
        )

    def test_unclassified_raises(self):
        grid = BackgroundGrid(4)
        occ = OccupancyField(grid, np.zeros(grid.n_nodes))
        with pytest.raises(RuntimeError, match="classif"):
            occ.require_classified()


@pytest.fixture(scope="module")
def eikonal_circle():
    grid = BackgroundGrid(64)
    cloud = circle_cloud(CENTER, R, 1000)
    occ = eikonal_sdf(cloud, grid)
    return grid, cloud, occ


class TestEikonalSdf:
    def test_distance_at_probe_node(self, eikonal_circle):
        grid, cloud, occ = eikonal_circle
        # node (0.5, 0.9) sits 0.15 outside the circle
        idx = np.argmin(
            np.linalg.norm(grid.node_coords - np.array([0.5, 0.9]), axis=1)
        )
        assert abs(occ.phi[idx] - 0.15) < 0.02

    def test_max_error_against_analytic_distance(self, eikonal_circle):
        grid, cloud, occ = eikonal_circle
        r = np.linalg.norm(grid.node_coords - CENTER, axis=1)
        sd = r - R  # negative inside
        far = np.abs(sd) > grid.h[0]
        assert np.max(np.abs(occ.phi - sd)[far]) <= 0.02

    def test_zero_on_boundary(self, eikonal_circle):
        grid, cloud, occ = eikonal_circle
        vals = interpolate_many(NodalField(grid, occ.phi), cloud.points)
        assert np.abs(vals).max() < 0.01

    def test_sign_agreement_with_winding(self, eikonal_circle):
        grid, cloud, occ = eikonal_circle
        wind = occupancy_grid(cloud, grid)
        agreement = np.mean((occ.phi < 0) == wind.node_interior)
        assert agreement >= 0.98

    def test_gradient_norm_near_unity(self, eikonal_circle):
        from ibfem.grid import gauss_rule, shape_gradients_many

        grid, cloud, occ = eikonal_circle
        rule = gauss_rule(2)
        G = shape_gradients_many(rule.points, grid.h)
        active = occ.element_labels != INACTIVE
        phi_c = occ.phi[grid.element_corners[active]]
        norms = []
        for g in range(4):
            gv = phi_c @ G[g]
            norms.append(np.sqrt(np.einsum("ed,ed->e", gv, gv)))
        norms = np.concatenate(norms)
        assert np.mean((norms >= 0.8) & (norms <= 1.2)) >= 0.95

    def test_chi_convention_matches_winding(self, eikonal_circle):
        grid, cloud, occ = eikonal_circle
        np.testing.assert_array_equal(occ.chi, np.where(occ.phi < 0, 1.0, 0.0))

    def test_bad_tau_rejected(self):
        grid = BackgroundGrid(8)
        cloud = circle_cloud(CENTER, R, 64)
        with pytest.raises(ValueError):
            eikonal_sdf(cloud, grid, tau=0.9)

    def test_divergent_step_reported(self):
        grid = BackgroundGrid(16)
        cloud = circle_cloud(CENTER, R, 64)
        with pytest.raises(RuntimeError, match="diverged|increased"):
            eikonal_sdf(cloud, grid, iters=400, step=1e12)


class TestGaussPointMask:
    def test_mask_respects_labels(self):
        grid = BackgroundGrid(32)
        occ = occupancy_grid(circle_cloud(CENTER, R, 500), grid)
        mask = gauss_point_mask(occ)
        assert mask[occ.element_labels == ACTIVE].all()
        assert not mask[occ.element_labels == INACTIVE].any()
        cut = occ.element_labels == CUT
        assert mask[cut].any() and not mask[cut].all()
