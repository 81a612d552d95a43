"""Binary field container and CSV export.

File layout (little endian throughout):

    bytes 0..7    magic  b"DIVFREEF"
    bytes 8..11   format version (u32), currently 1
    bytes 12..15  reserved flags (u32), zero
    then          u64 dims [p, c, N1, ..., Np]
    then          float64 payload, C order over (N1, ..., Np, c)

The payload enumerates grid points axis-major (last axis fastest) with the
c channel values of each point contiguous.  Axis lengths are not part of
the format; callers supply them on load (defaulting to 1.0 per axis), and
dataset manifests record the true extents.
"""

from __future__ import annotations

import struct

import numpy as np

from .grids import Field, PeriodicGrid

MAGIC = b"DIVFREEF"
VERSION = 1


def save_field(field: Field, path) -> None:
    grid = field.grid
    if not isinstance(grid, PeriodicGrid):
        raise ValueError("binary field files hold grid fields only")
    dims = [grid.dim, field.channels, *grid.counts]
    payload = np.ascontiguousarray(
        field.values.reshape(*grid.counts, field.channels), dtype="<f8"
    )
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, 0))
        fh.write(np.asarray(dims, dtype="<u8").tobytes())
        fh.write(payload.tobytes())


def load_field(path, lengths=None) -> Field:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"not a field file (bad magic {magic!r})")
        version, _flags = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported field file version {version}")
        head = np.frombuffer(fh.read(16), dtype="<u8")
        p, c = int(head[0]), int(head[1])
        counts = tuple(int(n) for n in np.frombuffer(fh.read(8 * p), dtype="<u8"))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    m = int(np.prod(counts))
    if payload.size != m * c:
        raise ValueError(f"truncated field file: expected {m * c} values, got {payload.size}")
    if lengths is None:
        lengths = (1.0,) * p
    grid = PeriodicGrid(tuple(float(L) for L in lengths), counts)
    return Field(grid, payload.reshape(m, c).copy())


def export_csv_slice(field: Field, path, channel: int = 0, **fixed_axes: int) -> None:
    """Write one channel of a 2D slice as CSV rows.

    For fields on grids with more than two axes, fix the extra axes by
    index, e.g. ``export_csv_slice(f, "out.csv", axis2=0)``.
    """
    grid = field.grid
    if not isinstance(grid, PeriodicGrid):
        raise ValueError("CSV export works on grid fields only")
    cube = field.values[:, channel].reshape(grid.counts)
    index = [slice(None)] * grid.dim
    for name, pos in fixed_axes.items():
        if not name.startswith("axis"):
            raise ValueError(f"unknown slice selector {name!r}")
        index[int(name[4:])] = int(pos)
    plane = cube[tuple(index)]
    if plane.ndim != 2:
        raise ValueError(f"slice must be 2D, got {plane.ndim} free axes")
    np.savetxt(path, plane, delimiter=",", fmt="%.17g")
