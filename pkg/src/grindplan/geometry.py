"""Shape representation and the geometric cutting model.

The object is a heightfield over the unit work area: grid[i, j] is the
surface height at cell center x = (j + 0.5)/G, y = (i + 0.5)/G. A cutting
action (roll, pitch, z) defines the plane

    p(x, y) = z + tan(pitch) * (x - 0.5) + tan(roll) * (y - 0.5)

through the work-area center. Cutting replaces the shape by its part below
the plane (clamped at the floor h = 0, which models the uncuttable base
stock); the removed material is returned as a per-cell removal-depth grid.

All in-memory grids are float64 (the volume-conservation identity is kept
to machine precision); serialization uses float32, see serialio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .errors import ConfigError


@dataclass
class Heightfield:
    """G x G surface-height grid over the unit work area."""

    grid: np.ndarray
    h_max: float = 1.0

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.grid.shape[1]:
            raise ValueError(f"heightfield grid must be square, got {self.grid.shape}")

    @property
    def g(self) -> int:
        return self.grid.shape[0]

    @property
    def cell_area(self) -> float:
        return 1.0 / (self.g * self.g)

    def copy(self) -> "Heightfield":
        return Heightfield(self.grid.copy(), self.h_max)

    @staticmethod
    def uniform(g: int, height: float, h_max: float = 1.0) -> "Heightfield":
        return Heightfield(np.full((g, g), float(height)), h_max)


@dataclass
class CuttingAction:
    """Cutting plane parameters; the robot action is [roll, pitch, z]."""

    roll: float
    pitch: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.z], dtype=np.float64)


@dataclass
class PointCloud:
    """D x 3 point positions, derived from heightfields for evaluation."""

    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"point cloud must be (D, 3), got {self.points.shape}")


def _check_pair(s: Heightfield, other: Heightfield):
    if s.g != other.g:
        raise ValueError(f"grid size mismatch: {s.g} vs {other.g}")


def plane_height(a: CuttingAction, x, y):
    """Height of the cutting plane at work-area coordinates (x, y)."""
    return a.z + math.tan(a.pitch) * (x - 0.5) + math.tan(a.roll) * (y - 0.5)


def cut(s: Heightfield, a: CuttingAction) -> tuple[Heightfield, Heightfield]:
    """Apply the cutting plane: returns (next shape, removal-depth grid).

    Per cell: s_next = max(0, min(s, p)) and w = s - s_next, so
    shape_volume(s) == shape_volume(s_next) + shape_volume(w) exactly.
    """
    s_next = np.empty_like(s.grid)
    w = np.empty_like(s.grid)
    _kernels.cut_grid(s.grid, a.roll, a.pitch, a.z, s_next, w)
    return Heightfield(s_next, s.h_max), Heightfield(w, s.h_max)


def removal_volume(s: Heightfield, a: CuttingAction) -> float:
    """Volume the plane would remove from s (0 when there is no contact)."""
    return _kernels.removal_volume(s.grid, a.roll, a.pitch, a.z, s.cell_area)


def removal_volume_grad(s: Heightfield, a: CuttingAction) -> tuple[float, float, float]:
    """Analytic subgradient of removal_volume w.r.t. (roll, pitch, z)."""
    return _kernels.removal_volume_grad(s.grid, a.roll, a.pitch, a.z, s.cell_area)


def shape_volume(s: Heightfield) -> float:
    """Total material volume under the surface."""
    return _kernels.grid_sum(s.grid) * s.cell_area


def rollout(s: Heightfield, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain cuts through an (n, 3) action array from shape s.

    Returns (shapes, volumes): shapes is an (n+1, G, G) float64 array with
    shapes[0] = s.grid, volumes[k] = removal_volume of action k against
    shapes[k].
    """
    actions = np.ascontiguousarray(actions, dtype=np.float64)
    n = actions.shape[0]
    shapes = np.empty((n + 1, s.g, s.g), dtype=np.float64)
    vols = np.empty(n, dtype=np.float64)
    _kernels.rollout(s.grid, actions, s.cell_area, shapes, vols)
    return shapes, vols


def sample_points(s: Heightfield, d: int = 2048, seed: int = 0) -> PointCloud:
    """Sample d surface points (x, y, s(x, y)), uniform over the work area."""
    if d < 1:
        raise ValueError("point count must be >= 1")
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0.0, 1.0, size=(d, 2))
    g = s.g
    jj = np.minimum((xy[:, 0] * g).astype(np.intp), g - 1)
    ii = np.minimum((xy[:, 1] * g).astype(np.intp), g - 1)
    z = s.grid[ii, jj]
    return PointCloud(np.column_stack([xy[:, 0], xy[:, 1], z]))


def chamfer(c1: PointCloud, c2: PointCloud) -> float:
    """Symmetric shape discrepancy: mean squared nearest-neighbor distance
    from c1 to c2 plus the same from c2 to c1."""
    if c1.points.shape[0] == 0 or c2.points.shape[0] == 0:
        raise ValueError("chamfer requires non-empty point clouds")
    d12, _ = cKDTree(c2.points).query(c1.points, k=1)
    d21, _ = cKDTree(c1.points).query(c2.points, k=1)
    return float(np.mean(d12**2) + np.mean(d21**2))


# Target construction: planes relative to the slab height, all shallower than
# the default action tilt limit so every target is reachable by the action
# space by construction.
_TARGET_PLANES = {
    "A": [(0.0, 0.45, -0.10)],
    "B": [(0.0, 0.35, -0.08), (0.0, -0.35, -0.08)],
    "C": [(0.0, 0.42, 0.02), (0.0, -0.42, 0.02), (0.42, 0.0, 0.02), (-0.42, 0.0, 0.02)],
}


def target_planes(shape_id: str, slab_height: float) -> list[CuttingAction]:
    """The cutting planes whose intersection with the slab defines a target."""
    if shape_id not in _TARGET_PLANES:
        raise ConfigError(f"unknown shape id {shape_id!r}; expected one of A, B, C")
    return [CuttingAction(r, p, slab_height + dz) for (r, p, dz) in _TARGET_PLANES[shape_id]]


def make_target(shape_id: str, g: int = 64, h_max: float = 1.0,
                slab_height: float = 0.8, theta_max: float = math.radians(30.0)
                ) -> tuple[Heightfield, Heightfield]:
    """Build (initial, target): a uniform slab and its intersection with the
    fixed plane set for shape_id (A: one bevel, B: two roof planes, C: four
    frustum planes)."""
    planes = target_planes(shape_id, slab_height)
    for a in planes:
        if abs(a.roll) > theta_max or abs(a.pitch) > theta_max:
            raise ConfigError(
                f"target {shape_id} needs tilt beyond theta_max={theta_max:.3f} rad")
    initial = Heightfield.uniform(g, slab_height, h_max)
    target = initial
    for a in planes:
        target, _ = cut(target, a)
    return initial, target
