"""Oriented boundary point clouds: generators, normals/areas, and file I/O.

Closed 2D boundaries are sampled counterclockwise with outward unit
normals and per-point area weights (the arclength share of each sample,
i.e. half the distance to each neighbor).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass
class BoundaryPointCloud:
    """Oriented, area-weighted points sampling a closed boundary.

    points : (n, d) sample positions
    normals : (n, d) outward unit normals
    areas : (n,) positive weights (arclength share in 2D, Voronoi area in 3D)
    """

    points: np.ndarray
    normals: np.ndarray
    areas: np.ndarray

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.normals = np.atleast_2d(np.asarray(self.normals, dtype=float))
        self.areas = np.asarray(self.areas, dtype=float).ravel()
        if self.points.shape != self.normals.shape:
            raise ValueError("points and normals must have matching shapes")
        if self.areas.shape[0] != self.points.shape[0]:
            raise ValueError("one area weight per point required")
        norms = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ValueError("normals must be unit vectors (within 1e-10)")
        if np.any(self.areas <= 0):
            raise ValueError("area weights must be positive")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def perimeter(self) -> float:
        """Total boundary measure, the sum of the area weights."""
        return float(self.areas.sum())

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def translated(self, offset) -> "BoundaryPointCloud":
        return BoundaryPointCloud(
            self.points + np.asarray(offset, float), self.normals, self.areas
        )

    def scaled(self, factor: float) -> "BoundaryPointCloud":
        """Scale about the centroid; area weights scale as factor^(d-1)."""
        c = self.centroid
        return BoundaryPointCloud(
            c + factor * (self.points - c),
            self.normals,
            self.areas * factor ** (self.dim - 1),
        )


@dataclass
class SplineShapeSpec:
    """Recipe for a random closed cubic B-spline blob.

    Control x-coordinates are uniformly spaced in [0, 1]; control
    y-coordinates are drawn uniformly from [0.2, 0.8].
    """

    n_control: int = 10
    seed: int = 0
    degree: int = 3
    samples: int = 1000
    y_range: tuple[float, float] = (0.2, 0.8)

    def __post_init__(self):
        if self.n_control < self.degree + 1:
            raise ValueError(
                f"need at least degree+1={self.degree + 1} control points"
            )
        if self.samples < 8:
            raise ValueError("at least 8 samples required")

    def control_points(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        x = np.linspace(0.0, 1.0, self.n_control)
        y = rng.uniform(*self.y_range, size=self.n_control)
        return np.stack([x, y], axis=1)


def circle_cloud(center, radius: float, n: int) -> BoundaryPointCloud:
    """Equally spaced circle samples with exact outward normals.

    Each point carries area weight 2*pi*R/n, so the weights sum to the
    exact perimeter by construction.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if n < 8:
        raise ValueError(f"need at least 8 boundary points, got {n}")
    center = np.asarray(center, dtype=float)
    theta = 2.0 * np.pi * np.arange(n) / n
    normals = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    points = center + radius * normals
    areas = np.full(n, 2.0 * np.pi * radius / n)
    return BoundaryPointCloud(points, normals, areas)


def _signed_polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _closed_loop_normals_areas(points: np.ndarray):
    """Outward normals (rotated central-difference tangents) and arclength
    shares for a counterclockwise closed sample loop."""
    tangents = np.roll(points, -1, axis=0) - np.roll(points, 1, axis=0)
    tangents /= np.linalg.norm(tangents, axis=1, keepdims=True)
    normals = np.stack([tangents[:, 1], -tangents[:, 0]], axis=1)
    seg = np.linalg.norm(np.roll(points, -1, axis=0) - points, axis=1)
    areas = 0.5 * (seg + np.roll(seg, 1))
    return normals, areas


def closed_spline_cloud(
    control_points: np.ndarray, degree: int = 3, samples: int = 1000
) -> BoundaryPointCloud:
    """Closed periodic uniform B-spline (all weights 1) through a control
    polygon, sampled into an oriented cloud.

    The control polygon is wrapped periodically to close the curve;
    self-intersecting outputs are not detected. The sample loop is
    reoriented counterclockwise if needed; normals come from
    finite-difference tangents, areas are half the distance to each
    neighboring sample.
    """
    ctrl = np.asarray(control_points, dtype=float)
    k = degree
    m = ctrl.shape[0]
    if m < k + 1:
        raise ValueError(f"need at least degree+1={k + 1} control points")
    # Periodic uniform B-spline: wrap the first k control points and use
    # integer knots; one traversal of the loop is s in [k, m + k).
    ctrl_ext = np.vstack([ctrl, ctrl[:k]])
    knots = np.arange(m + 2 * k + 1, dtype=float)
    spline = BSpline(knots, ctrl_ext, k, extrapolate=False)
    s = k + m * np.arange(samples) / samples
    points = spline(s)
    if _signed_polygon_area(points) < 0:
        points = points[::-1].copy()
    normals, areas = _closed_loop_normals_areas(points)
    return BoundaryPointCloud(points, normals, areas)


def sample_spline_shape(spec: SplineShapeSpec) -> BoundaryPointCloud:
    """Sample the random closed-blob recipe described by ``spec``."""
    return closed_spline_cloud(spec.control_points(), spec.degree, spec.samples)


def write_cloud(cloud: BoundaryPointCloud, path) -> None:
    """Write a cloud as plain text: one `x y nx ny a` row per point
    (seven columns in 3D)."""
    with open(path, "w") as fh:
        fh.write(f"# boundary point cloud: {cloud.n} points, dim {cloud.dim}\n")
        fh.write("# columns: position, outward normal, area weight\n")
        for p, nrm, a in zip(cloud.points, cloud.normals, cloud.areas):
            row = np.concatenate([p, nrm, [a]])
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_cloud(path) -> BoundaryPointCloud:
    """Read a cloud written by :func:`write_cloud`.

    Rows must carry 2d+1 whitespace-separated columns; `#` lines are
    ignored. Non-unit normals are renormalized with a warning.
    """
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            cols = stripped.split()
            if len(cols) not in (5, 7):
                raise ValueError(
                    f"{path}: line {lineno}: expected 5 (2D) or 7 (3D) columns,"
                    f" got {len(cols)}"
                )
            try:
                rows.append([float(c) for c in cols])
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: empty point cloud")
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"{path}: inconsistent column counts {sorted(widths)}")
    data = np.array(rows)
    d = (data.shape[1] - 1) // 2
    points = data[:, :d]
    normals = data[:, d : 2 * d]
    areas = data[:, 2 * d]
    lengths = np.linalg.norm(normals, axis=1)
    if np.any(lengths <= 0):
        bad = int(np.flatnonzero(lengths <= 0)[0]) + 1
        raise ValueError(f"{path}: zero-length normal in data row {bad}")
    if np.any(np.abs(lengths - 1.0) > 1e-10):
        warnings.warn(f"{path}: normalizing non-unit normals")
        normals = normals / lengths[:, None]
    return BoundaryPointCloud(points, normals, areas)
