"""Discretization descriptors and field containers.

Two kinds of domains are supported: uniform grids on a periodic box (torus)
and scattered point clouds.  Fields hold per-point channel values in a flat
(M, c) array; for grids the point enumeration is axis-major (C order, last
axis fastest), which matches FFT batch strides and keeps the on-disk layout
unambiguous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid on the torus prod_i [0, L_i) with N_i points per axis.

    Coordinates along axis i are k * L_i / N_i for k = 0 .. N_i - 1; the
    point at L_i is excluded by periodicity.  Counts must be even so that
    the symmetric mode truncation -N/2 .. N/2-1 is well defined.
    """

    lengths: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.lengths) != len(self.counts) or not self.lengths:
            raise ValueError("lengths and counts must be non-empty and of equal length")
        for L in self.lengths:
            if not L > 0:
                raise ValueError(f"axis length must be positive, got {L}")
        for n in self.counts:
            if n < 2 or n % 2 != 0:
                raise ValueError(
                    f"axis count must be a positive even integer, got {n}: an odd "
                    "count leaves the Nyquist mode without a conjugate partner and "
                    "makes the symmetric truncation -N/2..N/2-1 ambiguous"
                )

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / n for L, n in zip(self.lengths, self.counts))

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.counts[axis]
        return np.arange(n, dtype=np.float64) * (self.lengths[axis] / n)

    def coords(self) -> np.ndarray:
        """All grid coordinates as an (M, p) array in axis-major order."""
        axes = [self.axis_coords(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


@dataclass(frozen=True)
class UniformGrid:
    """Uniform non-periodic grid covering prod_i [0, L_i], endpoints included.

    Spacing along axis i is L_i / (N_i - 1).  Used as the base domain for
    periodic-extension differentiation; it carries no evenness constraint.
    """

    lengths: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.lengths) != len(self.counts) or not self.lengths:
            raise ValueError("lengths and counts must be non-empty and of equal length")
        for L in self.lengths:
            if not L > 0:
                raise ValueError(f"axis length must be positive, got {L}")
        for n in self.counts:
            if n < 2:
                raise ValueError(f"axis count must be at least 2, got {n}")

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def npoints(self) -> int:
        return int(np.prod(self.counts))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(L / (n - 1) for L, n in zip(self.lengths, self.counts))

    def axis_coords(self, axis: int) -> np.ndarray:
        n = self.counts[axis]
        return np.arange(n, dtype=np.float64) * (self.lengths[axis] / (n - 1))

    def coords(self) -> np.ndarray:
        axes = [self.axis_coords(k) for k in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=-1)


class PointCloud:
    """Scattered points with a derived fill distance.

    The fill distance is sup over points of the distance to the nearest
    other point.  It is always computed from the coordinates, never
    user-supplied, so it cannot drift out of sync with the points.

    With ``periodic_lengths`` set, distances use the minimum-image
    convention on the corresponding torus (neighbor searches go through a
    3^p tiling of the box), which is how grid point sets are treated when
    comparing against the Fourier backends.
    """

    def __init__(self, points: np.ndarray, boundary_tags: np.ndarray | None = None,
                 periodic_lengths: tuple[float, ...] | None = None):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2:
            raise ValueError("points must be an (M, p) array")
        if points.shape[0] < 2:
            raise ValueError("a point cloud needs at least 2 points")
        if boundary_tags is not None:
            boundary_tags = np.asarray(boundary_tags)
            if boundary_tags.shape[0] != points.shape[0]:
                raise ValueError("boundary_tags must have one entry per point")
        self.points = points
        self.boundary_tags = boundary_tags
        if periodic_lengths is not None:
            periodic_lengths = tuple(float(L) for L in periodic_lengths)
            if len(periodic_lengths) != points.shape[1]:
                raise ValueError("periodic_lengths must give one extent per axis")
            shifts = np.stack(
                np.meshgrid(*[np.array([-L, 0.0, L]) for L in periodic_lengths],
                            indexing="ij"),
                axis=-1,
            ).reshape(-1, points.shape[1])
            self._tiled_points = (points[None, :, :] + shifts[:, None, :]).reshape(
                -1, points.shape[1]
            )
            self._tiled_source = np.tile(
                np.arange(points.shape[0]), shifts.shape[0]
            )
        else:
            self._tiled_points = points
            self._tiled_source = np.arange(points.shape[0])
        self.periodic_lengths = periodic_lengths
        self._tree = cKDTree(self._tiled_points)
        nn_dist, _ = self._tree.query(points, k=2)
        nearest = nn_dist[:, 1]
        if np.min(nearest) == 0.0:
            raise ValueError("points must be pairwise distinct")
        self._fill_distance = float(np.max(nearest))
        self.points.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def npoints(self) -> int:
        return self.points.shape[0]

    @property
    def fill_distance(self) -> float:
        return self._fill_distance

    @property
    def tree(self) -> cKDTree:
        """KD-tree over the (tiled, if periodic) point set."""
        return self._tree

    @property
    def tiled_points(self) -> np.ndarray:
        return self._tiled_points

    @property
    def tiled_source(self) -> np.ndarray:
        """Source point index for every entry of ``tiled_points``."""
        return self._tiled_source

    def __eq__(self, other) -> bool:
        return self is other or (
            isinstance(other, PointCloud)
            and self.points.shape == other.points.shape
            and self.periodic_lengths == other.periodic_lengths
            and np.array_equal(self.points, other.points)
        )


Discretization = PeriodicGrid | UniformGrid | PointCloud


@dataclass
class Field:
    """Channel values sampled on a grid or point cloud.

    ``values`` has shape (M, c) with M the number of points in axis-major
    order for grids.  The layout is stable across save/load (see fieldio).
    """

    grid: Discretization
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2 or self.values.shape[0] != self.grid.npoints:
            raise ValueError(
                f"values must have shape (M={self.grid.npoints}, c), "
                f"got {self.values.shape}"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def channel(self, c: int) -> np.ndarray:
        return self.values[:, c]


def make_periodic_grid(p: int, lengths, counts) -> PeriodicGrid:
    """Build a p-dimensional periodic grid; rejects odd counts."""
    lengths = tuple(float(L) for L in lengths)
    counts = tuple(int(n) for n in counts)
    if len(lengths) != p or len(counts) != p:
        raise ValueError(f"expected {p} lengths and counts, got {len(lengths)}, {len(counts)}")
    return PeriodicGrid(lengths, counts)


def augment_spacetime(grid: PeriodicGrid, T: float, Nt: int) -> PeriodicGrid:
    """Append a time axis of extent T with Nt samples as the last axis.

    Conservation of a time-varying density then reads as a static
    divergence-free condition in p+1 dimensions, so all spatial machinery
    applies unchanged to the augmented grid.
    """
    if not T > 0:
        raise ValueError(f"time horizon must be positive, got {T}")
    return PeriodicGrid(grid.lengths + (float(T),), grid.counts + (int(Nt),))


def fill_distance(cloud: PointCloud) -> float:
    """Sup over points of the nearest-other-point distance."""
    return cloud.fill_distance


def cloud_from_grid(grid: PeriodicGrid) -> PointCloud:
    """View a periodic grid's points as a (periodically wrapped) cloud."""
    return PointCloud(grid.coords(), periodic_lengths=grid.lengths)
