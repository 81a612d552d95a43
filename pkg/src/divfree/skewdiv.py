"""Divergence-free vector fields from skew-symmetric latent fields.

A p x p skew-symmetric matrix field mu (stored as its p(p-1)/2 upper
triangle channels) is mapped to the vector field

    u_j = sum_k d mu_jk / dx_k,

its row-wise divergence.  Because mixed partials commute, div(u) vanishes
identically in the continuum, and any differentiation backend whose
per-axis operators commute (the Fourier multipliers do, exactly) inherits
the annihilation up to round-off.  The meshfree backend reproduces it to
its own truncation order.

The analytic derivation carries a constant factor of +-2 in front of the
row-wise divergence; it is dropped here since mu is a learned latent and
any fixed scalar is absorbed into it, leaving divergence-freeness intact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .grids import Field, PeriodicGrid, PointCloud
from .meshfree import MeshfreeWeights
from .spectral import FcPlan, SpectralPlan, build_spectral_plan

DiffBackend = Union[SpectralPlan, FcPlan, MeshfreeWeights]


def skew_channel_count(p: int) -> int:
    return p * (p - 1) // 2


def skew_channel_index(i: int, j: int, p: int) -> int:
    """Row-major upper-triangle channel position of entry (i, j), i < j."""
    if not 0 <= i < j < p:
        raise ValueError(f"need 0 <= i < j < p, got (i={i}, j={j}, p={p})")
    return i * p - i * (i + 1) // 2 + (j - i - 1)


@dataclass
class SkewField:
    """Independent channels of a skew-symmetric matrix field.

    Channel order is the row-major upper triangle: (0,1), (0,2), ...,
    (p-2, p-1).  The implied full matrix has mu_ij = -mu_ji and zero
    diagonal by construction.
    """

    grid: PeriodicGrid | PointCloud
    dim: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        expected = skew_channel_count(self.dim)
        if self.values.shape != (self.grid.npoints, expected):
            raise ValueError(
                f"skew field for p={self.dim} needs shape "
                f"({self.grid.npoints}, {expected}), got {self.values.shape}"
            )

    def entry(self, i: int, j: int) -> np.ndarray:
        """Values of mu_ij for any i != j, sign resolved by antisymmetry."""
        if i == j:
            return np.zeros(self.grid.npoints)
        if i < j:
            return self.values[:, skew_channel_index(i, j, self.dim)]
        return -self.values[:, skew_channel_index(j, i, self.dim)]


@dataclass
class DivFreeField:
    """Vector field produced by the skew-divergence layer.

    Records which backend produced it; the divergence is bounded by that
    backend's tolerance (round-off for the spectral multipliers on
    band-limited input, the truncation order for meshfree weights).
    """

    field: Field
    backend_name: str

    @property
    def values(self) -> np.ndarray:
        return self.field.values

    @property
    def grid(self):
        return self.field.grid


def assemble_skew(skew: SkewField) -> Field:
    """Full p*p channel matrix field, antisymmetric by construction."""
    p = skew.dim
    m = skew.grid.npoints
    full = np.zeros((m, p * p))
    for i in range(p):
        for j in range(p):
            if i != j:
                full[:, i * p + j] = skew.entry(i, j)
    return Field(skew.grid, full)


def _check_backend(grid, backend: DiffBackend, p: int) -> None:
    host = backend.grid if not isinstance(backend, MeshfreeWeights) else backend.cloud
    if host != grid:
        raise ValueError("backend was built for a different discretization")
    if backend.dim != p:
        raise ValueError(
            f"backend differentiates in {backend.dim} axes but the field has p={p}"
        )


def skew_divergence(skew: SkewField, backend: DiffBackend) -> DivFreeField:
    """Row-wise divergence of the skew matrix field: the claw layer."""
    _check_backend(skew.grid, backend, skew.dim)
    p = skew.dim
    out = np.zeros((skew.grid.npoints, p))
    for j in range(p):
        for k in range(p):
            if k != j:
                out[:, j] += backend.partial(skew.entry(j, k), k)
    return DivFreeField(Field(skew.grid, out), backend.backend_name)


def divergence(field: Field, backend: DiffBackend) -> Field:
    """sum_k d u_k / dx_k of a p-channel vector field."""
    p = backend.dim
    if field.channels != p:
        raise ValueError(
            f"divergence needs {p} channels on a {p}D discretization, "
            f"got {field.channels}"
        )
    _check_backend(field.grid, backend, p)
    out = np.zeros(field.grid.npoints)
    for k in range(p):
        out += backend.partial(field.values[:, k], k)
    return Field(field.grid, out)


def mixed_output(raw: Field, backend: DiffBackend, n_extra: int = 0) -> Field:
    """Skew-divergence on the first channel block, pass-through on the rest.

    The raw field must carry p(p-1)/2 + n_extra channels; the output has
    p + n_extra, with only the first p divergence-free.
    """
    p = backend.dim
    n_skew = skew_channel_count(p)
    if raw.channels != n_skew + n_extra:
        raise ValueError(
            f"expected {n_skew} skew channels plus {n_extra} pass-through, "
            f"got {raw.channels} total"
        )
    skew = SkewField(raw.grid, p, raw.values[:, :n_skew])
    div_free = skew_divergence(skew, backend)
    if n_extra == 0:
        return div_free.field
    return Field(raw.grid, np.hstack([div_free.values, raw.values[:, n_skew:]]))


def divergence_ratio(field: Field) -> float:
    """Spectral L2 divergence over field L2 norm: the verification metric.

    Always uses the Fourier multipliers on the field's own grid, whatever
    backend produced the field, so numbers are comparable across models.
    """
    if not isinstance(field.grid, PeriodicGrid):
        raise ValueError("the divergence verifier needs a periodic grid")
    plan = build_spectral_plan(field.grid)
    div = divergence(field, plan)
    denom = float(np.linalg.norm(field.values))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(div.values)) / denom
