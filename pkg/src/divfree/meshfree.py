"""Consistent meshfree derivative weights on scattered points.

For each point x_i and axis k the module pre-computes quadrature weights
w_ij so that

    d phi / dx_k (x_i)  ~=  sum_j (phi(x_j) - phi(x_i)) * w_ij,

with the sum over neighbors x_j inside the ball of radius delta around
x_i.  The weights minimize sum_j |w_ij| subject to exact reproduction of
every polynomial of total degree <= m, which bounds the stability constant
sum |w| * dx and yields high-order accuracy for smooth fields (dx being
the fill distance of the cloud).

The minimization is the linear program obtained by splitting w = wp - wm,
wp, wm >= 0 and minimizing sum(wp + wm) under the reproduction equalities.
Its optimal face is generally not a single vertex, and vertex solutions
(as returned by simplex pivoting) select sparse stencils that can change
erratically between refinement levels, which destroys the observed
convergence order.  We therefore solve each program with iteratively
reweighted least-norm steps under an epsilon continuation, which converges
to the least-Euclidean-norm point of the optimal face: a selection that is
continuous in the point coordinates and inherits any symmetry of the
stencil.  The test suite cross-checks the attained objective against an
independent simplex solve of the split LP.

The monomial basis is centered at x_i and scaled by 1/delta before
assembly; in raw coordinates the constraint matrix is catastrophically ill
conditioned at small spacings.  Each (point, axis) program is independent,
so generation parallelizes trivially and identical inputs give identical
weights.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
import scipy.sparse as sp

from .grids import Field, PointCloud

_WEIGHTS_MAGIC = b"DIVFREEW"
_WEIGHTS_VERSION = 1

# Membership of points lying exactly on the delta-sphere (common on lattice
# clouds) must not depend on round-off, or stencils flip between refinement
# levels; the search radius is inflated by this relative amount.
_RADIUS_SLACK = 1e-9


@dataclass(frozen=True)
class MeshfreeConfig:
    """Polynomial order and neighborhood radius ratio delta / fill-distance.

    ``radius_ratio=None`` selects the smallest ratio from a fixed search
    grid for which every point has at least twice dim P_m neighbors (a
    standard unisolvency safety margin).
    """

    order: int
    radius_ratio: float | None = None

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"polynomial order must be >= 1, got {self.order}")
        if self.radius_ratio is not None and not self.radius_ratio > 0:
            raise ValueError(f"radius ratio must be positive, got {self.radius_ratio}")


def polynomial_space_dim(m: int, p: int) -> int:
    """dim of polynomials of total degree <= m in p variables, C(m+p, p)."""
    from math import comb

    return comb(m + p, p)


def _multi_indices(m: int, p: int) -> list[tuple[int, ...]]:
    """Exponent tuples with 1 <= total degree <= m, graded lexicographic.

    The constant monomial is omitted: the difference form annihilates
    constants identically, so its constraint is 0 = 0.
    """
    out = []
    for deg in range(1, m + 1):
        seen = sorted(
            {tuple(sorted(c)) for c in combinations_with_replacement(range(p), deg)}
        )
        for combo in seen:
            alpha = [0] * p
            for axis in combo:
                alpha[axis] += 1
            out.append(tuple(alpha))
    return out


def _neighbor_geometry(cloud: PointCloud, delta: float, min_count: int):
    """CSR neighbor structure plus minimum-image offset vectors.

    Neighbors are sorted ascending by distance with ties broken by source
    index, so the structure is independent of parallel schedule and stable
    under point relabeling.
    """
    if not delta > 0:
        raise ValueError(f"radius must be positive, got {delta}")
    if cloud.periodic_lengths is not None and delta > min(cloud.periodic_lengths) / 2:
        raise ValueError(
            f"radius {delta:.6g} exceeds half the smallest period; "
            "minimum-image neighborhoods would be ambiguous"
        )
    source = cloud.tiled_source
    tiled = cloud.tiled_points
    raw = cloud.tree.query_ball_point(cloud.points, r=delta * (1 + _RADIUS_SLACK))
    indptr = np.zeros(cloud.npoints + 1, dtype=np.int64)
    idx_chunks, off_chunks = [], []
    for i, lst in enumerate(raw):
        img = np.asarray(lst, dtype=np.int64)
        offsets = tiled[img] - cloud.points[i]
        keep = ~((source[img] == i) & np.all(offsets == 0.0, axis=1))
        img, offsets = img[keep], offsets[keep]
        if img.size < min_count:
            raise ValueError(
                f"point {i} has {img.size} neighbors within radius {delta:.6g}, "
                f"need at least {min_count}"
            )
        dist = np.linalg.norm(offsets, axis=1)
        order = np.lexsort((source[img], dist))
        idx_chunks.append(source[img][order])
        off_chunks.append(offsets[order])
        indptr[i + 1] = indptr[i] + img.size
    indices = np.concatenate(idx_chunks) if idx_chunks else np.zeros(0, dtype=np.int64)
    offsets = np.concatenate(off_chunks) if off_chunks else np.zeros((0, cloud.dim))
    return indptr, indices, offsets


def neighbors(cloud: PointCloud, delta: float, min_count: int = 1):
    """Neighbor index lists within radius delta, self excluded.

    Returns CSR-style (indptr, indices).  Raises if any point ends up with
    fewer than ``min_count`` neighbors (callers enforcing polynomial
    unisolvency pass dim P_m here), naming the offending point.
    """
    indptr, indices, _ = _neighbor_geometry(cloud, delta, min_count)
    return indptr, indices


def default_radius_ratio(cloud: PointCloud, m: int) -> float:
    """Smallest ratio from a fixed grid giving >= 2 dim P_m neighbors everywhere."""
    target = 2 * polynomial_space_dim(m, cloud.dim)
    dx = cloud.fill_distance
    for ratio in np.arange(1.5, 20.01, 0.5):
        counts = cloud.tree.query_ball_point(
            cloud.points, r=ratio * dx * (1 + _RADIUS_SLACK), return_length=True
        )
        if int(np.min(counts)) - 1 >= target:  # query includes the point itself
            return float(ratio)
    raise ValueError(
        f"no radius ratio up to 20 gives every point {target} neighbors; "
        "the cloud is too sparse or too irregular for this order"
    )


class MeshfreeWeights:
    """Per-point, per-axis derivative weights over a fixed point cloud.

    Holds one sparse difference operator per axis (built once from the
    optimization output) so application and its transpose are plain sparse
    products.  Immutable after construction.
    """

    backend_name = "meshfree"

    def __init__(self, cloud: PointCloud, order: int, delta: float,
                 indptr: np.ndarray, indices: np.ndarray, weights: list[np.ndarray]):
        self.cloud = cloud
        self.order = int(order)
        self.delta = float(delta)
        self.indptr = indptr
        self.indices = indices
        self.weights = weights  # one flat array per axis, aligned with indices
        self._ops = [self._difference_operator(k) for k in range(cloud.dim)]

    def _difference_operator(self, axis: int) -> sp.csr_matrix:
        m = self.cloud.npoints
        rows = np.repeat(np.arange(m), np.diff(self.indptr))
        w = self.weights[axis]
        mat = sp.csr_matrix((w, (rows, self.indices)), shape=(m, m))
        row_sums = np.zeros(m)
        np.add.at(row_sums, rows, w)
        return (mat - sp.diags(row_sums)).tocsr()

    @property
    def dim(self) -> int:
        return self.cloud.dim

    @property
    def npoints(self) -> int:
        return self.cloud.npoints

    def neighbor_slice(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def point_weights(self, i: int, axis: int) -> np.ndarray:
        return self.weights[axis][self.indptr[i]:self.indptr[i + 1]]

    def stability_constant(self, axis: int) -> float:
        """max over points of sum_j |w_ij| for one axis."""
        absw = np.abs(self.weights[axis])
        sums = np.add.reduceat(absw, self.indptr[:-1])
        sums[np.diff(self.indptr) == 0] = 0.0
        return float(np.max(sums))

    def partial(self, values: np.ndarray, axis: int) -> np.ndarray:
        if not 0 <= axis < self.dim:
            raise ValueError(f"axis {axis} out of range for {self.dim}D cloud")
        values = np.asarray(values, dtype=np.float64)
        return self._ops[axis] @ values

    def partial_adjoint(self, values: np.ndarray, axis: int) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        return self._ops[axis].T @ values

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.cloud.points.tobytes())
        h.update(struct.pack("<qd", self.order, self.delta))
        return h.hexdigest()


def _solve_l1_least_norm(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """min sum|w| s.t. A w = b, least-Euclidean-norm point of the optimum.

    Iteratively reweighted least-norm steps with epsilon continuation,
    started from the plain least-norm solution.  A final least-squares
    projection restores the equalities to round-off; the simplex tolerance
    of a one-shot LP solve leaves residuals orders of magnitude larger.
    """
    n_con = A.shape[0]
    gram = A @ A.T
    lam = np.linalg.solve(gram, b)
    w = A.T @ lam
    scale = max(float(np.max(np.abs(w))), 1e-300)
    ridge = 1e-14 * np.trace(gram) / n_con * np.eye(n_con)
    eps = scale
    for it in range(55):
        d = np.sqrt(w * w + eps * eps)
        lam = np.linalg.solve((A * d) @ A.T + ridge, b)
        w = d * (A.T @ lam)
        if it % 5 == 4 and eps > 1e-8 * scale:
            eps *= 0.1
    resid = A @ w - b
    corr, *_ = np.linalg.lstsq(gram, resid, rcond=None)
    return w - A.T @ corr


def generate_weights(cloud: PointCloud, config: MeshfreeConfig) -> MeshfreeWeights:
    """Solve the per-point L1 programs and assemble the weight tables."""
    p = cloud.dim
    ratio = config.radius_ratio
    if ratio is None:
        ratio = default_radius_ratio(cloud, config.order)
    delta = ratio * cloud.fill_distance
    dim_poly = polynomial_space_dim(config.order, p)
    indptr, indices, offsets = _neighbor_geometry(cloud, delta, min_count=dim_poly)

    alphas = _multi_indices(config.order, p)
    unit_rows = [alphas.index(tuple(int(k == ax) for k in range(p))) for ax in range(p)]
    weights = [np.zeros(indices.shape[0]) for _ in range(p)]

    for i in range(cloud.npoints):
        lo, hi = indptr[i], indptr[i + 1]
        diffs = offsets[lo:hi] / delta
        A = np.ones((len(alphas), hi - lo))
        for a, alpha in enumerate(alphas):
            for axis, power in enumerate(alpha):
                if power:
                    A[a] *= diffs[:, axis] ** power
        for axis in range(p):
            b = np.zeros(len(alphas))
            b[unit_rows[axis]] = 1.0 / delta
            try:
                weights[axis][lo:hi] = _solve_l1_least_norm(A, b)
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    f"derivative-weight program infeasible at point {i}, axis {axis} "
                    f"(degenerate neighborhood, e.g. collinear neighbors): {exc}"
                ) from exc

    return MeshfreeWeights(cloud, config.order, delta, indptr, indices, weights)


def meshfree_partial(weights: MeshfreeWeights, field: Field, axis: int) -> Field:
    if field.grid != weights.cloud:
        raise ValueError("field does not live on the weights' point cloud")
    return Field(field.grid, weights.partial(field.values, axis))


def save_weights(weights: MeshfreeWeights, path) -> None:
    """Serialize to the binary container so expensive solves can be cached."""
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", _WEIGHTS_VERSION, 0))
        fh.write(bytes.fromhex(weights.content_hash()))
        fh.write(struct.pack("<qqqd", weights.cloud.npoints, weights.dim,
                             weights.order, weights.delta))
        fh.write(np.asarray(weights.indptr, dtype="<i8").tobytes())
        fh.write(np.asarray(weights.indices, dtype="<i8").tobytes())
        for axis in range(weights.dim):
            fh.write(np.asarray(weights.weights[axis], dtype="<f8").tobytes())


def load_weights(path, cloud: PointCloud) -> MeshfreeWeights:
    with open(path, "rb") as fh:
        if fh.read(8) != _WEIGHTS_MAGIC:
            raise ValueError("not a weights file")
        version, _ = struct.unpack("<II", fh.read(8))
        if version != _WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights file version {version}")
        stored_hash = fh.read(32).hex()
        m, p, order, delta = struct.unpack("<qqqd", fh.read(32))
        if m != cloud.npoints or p != cloud.dim:
            raise ValueError("weights file does not match the cloud's shape")
        indptr = np.frombuffer(fh.read(8 * (m + 1)), dtype="<i8").copy()
        nnz = int(indptr[-1])
        indices = np.frombuffer(fh.read(8 * nnz), dtype="<i8").copy()
        weights = [
            np.frombuffer(fh.read(8 * nnz), dtype="<f8").copy() for _ in range(p)
        ]
    out = MeshfreeWeights(cloud, order, delta, indptr, indices, weights)
    if out.content_hash() != stored_hash:
        raise ValueError("weights file was built for different points or parameters")
    return out


def cached_weights(cloud: PointCloud, config: MeshfreeConfig, cache_dir) -> MeshfreeWeights:
    """Load weights from the cache directory or generate and store them."""
    from pathlib import Path

    ratio = config.radius_ratio
    if ratio is None:
        ratio = default_radius_ratio(cloud, config.order)
    delta = ratio * cloud.fill_distance
    h = hashlib.sha256()
    h.update(cloud.points.tobytes())
    h.update(struct.pack("<qd", config.order, delta))
    path = Path(cache_dir) / f"weights-{h.hexdigest()[:16]}.bin"
    if path.exists():
        return load_weights(path, cloud)
    weights = generate_weights(cloud, MeshfreeConfig(config.order, ratio))
    path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, path)
    return weights
