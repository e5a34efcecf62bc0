"""Voxel grid transforms: cell assignment, corner offsets, occupancy and
density targets, scale pyramids, and the grid binary file format.

Cells are addressed as (ix, iy, iz) with flat index (ix*R + iy)*R + iz, so a
flat array reshaped to (R, R, R) is C-ordered with z fastest. Corner v of a
cell enumerates its 8 vertices as v = 4*bx + 2*by + bz with b* in {0, 1}.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import PointCloud, farthest_point_indices

GRID_MAGIC = b"VEGRID\x00\x00"


@dataclass(frozen=True)
class GridSpec:
    """A cubic R x R x R partition of the unit cube."""

    resolution: int = 32

    def __post_init__(self):
        r = self.resolution
        if r < 2 or (r & (r - 1)) != 0:
            raise ValueError(f"resolution must be a power of two >= 2, got {r}")

    @property
    def cell_width(self) -> float:
        return 1.0 / self.resolution


@dataclass(frozen=True)
class OccupancyDensityGrid:
    """Per-cell binary occupancy and point-count fractions summing to 1."""

    occupancy: np.ndarray
    density: np.ndarray


def _check_unit_range(points):
    if points.size and (points.min() < 0.0 or points.max() > 1.0):
        raise ValueError("coordinates must lie in [0, 1]")


def cell_indices(pc: PointCloud, spec: GridSpec):
    """Map each point to its (ix, iy, iz) cell; coordinates exactly 1.0
    clamp into the last cell."""
    _check_unit_range(pc.points)
    r = spec.resolution
    idx = np.floor(pc.points * r).astype(np.int64)
    np.clip(idx, 0, r - 1, out=idx)
    return idx


def flat_cells(cells, spec: GridSpec):
    r = spec.resolution
    return (cells[:, 0] * r + cells[:, 1]) * r + cells[:, 2]


def corner_offsets(pc: PointCloud, spec: GridSpec):
    """Offsets from each point to its cell's 8 corners, in cell widths.

    Returns (tensor, cells): tensor has shape (3, N, 8) with entry (d, i, v)
    = coordinate d of point i minus corner v, and cells is the (N, 3) cell
    index per point. Because R is a power of two, corner + offset*cell_width
    reproduces the coordinates exactly.
    """
    cells = cell_indices(pc, spec)
    r = spec.resolution
    scaled = pc.points * r
    b = np.array(
        [[bx, by, bz] for bx in (0, 1) for by in (0, 1) for bz in (0, 1)],
        dtype=np.float64,
    )
    corners = cells[None, :, :] + b[:, None, :]
    off = scaled[None, :, :] - corners
    return np.ascontiguousarray(off.transpose(2, 1, 0)), cells


def aggregate_mean(features, cells, spec: GridSpec):
    """Mean of per-point feature columns within each cell; empty cells zero.

    features is (C, N); cells is (N, 3) or flat (N,). Returns (C, R, R, R).
    """
    features = np.asarray(features)
    if features.ndim != 2:
        raise ValueError("features must be a (C, N) array")
    cells = np.asarray(cells)
    flat = flat_cells(cells, spec) if cells.ndim == 2 else cells.astype(np.int64)
    if flat.shape[0] != features.shape[1]:
        raise ValueError("one cell index per feature column required")
    r = spec.resolution
    ncells = r**3
    if flat.size and (flat.min() < 0 or flat.max() >= ncells):
        raise ValueError("cell index out of range")
    sums = kernels.scatter_sum(features, flat, ncells)
    counts = np.bincount(flat, minlength=ncells).astype(features.dtype)
    means = sums / np.maximum(counts, 1)
    return means.reshape(features.shape[0], r, r, r)


def binary_occupancy(pc: PointCloud, spec: GridSpec):
    """1.0 for every cell containing at least one point, else 0.0."""
    flat = flat_cells(cell_indices(pc, spec), spec)
    r = spec.resolution
    occ = np.zeros(r**3, dtype=np.float64)
    occ[flat] = 1.0
    return occ.reshape(r, r, r)


def density_target(pc: PointCloud, spec: GridSpec) -> OccupancyDensityGrid:
    """Per-cell point-count fractions plus the matching binary occupancy."""
    if len(pc) < 1:
        raise ValueError("density target requires at least one point")
    flat = flat_cells(cell_indices(pc, spec), spec)
    r = spec.resolution
    counts = np.bincount(flat, minlength=r**3).astype(np.float64)
    density = (counts / len(pc)).reshape(r, r, r)
    occ = (counts > 0).astype(np.float64).reshape(r, r, r)
    return OccupancyDensityGrid(occupancy=occ, density=density)


def build_scale_pyramid(pc: PointCloud, levels: int = 5):
    """Level 0 is the input; level i is a farthest-point sample of level i-1
    at half its size (rounded up)."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if len(pc) < 2 ** (levels - 1):
        raise ValueError(
            f"need at least {2 ** (levels - 1)} points for {levels} levels, got {len(pc)}"
        )
    out = [pc]
    for _ in range(1, levels):
        prev = out[-1]
        m = (len(prev) + 1) // 2
        out.append(prev.subset(farthest_point_indices(prev, m, 0)))
    return out


def cell_center_cloud(occupancy, spec: GridSpec) -> PointCloud:
    """One point at the center of every occupied cell, in flat-index order."""
    occ = np.asarray(occupancy).reshape(-1)
    r = spec.resolution
    flat = np.nonzero(occ > 0)[0]
    ix = flat // (r * r)
    iy = (flat // r) % r
    iz = flat % r
    centers = (np.stack([ix, iy, iz], axis=1) + 0.5) * spec.cell_width
    return PointCloud(centers)


# ---------------------------------------------------------------------------
# grid serialization: per record an 16-byte header (magic, u32 C, u32 R)
# followed by C*R^3 little-endian float32 in C-major, z-fastest order


def write_grids(path, grids) -> None:
    """Write a sequence of (C, R, R, R) or (R, R, R) arrays as consecutive
    binary records."""
    with open(path, "wb") as fh:
        for g in grids:
            arr = np.asarray(g, dtype=np.float32)
            if arr.ndim == 3:
                arr = arr[None]
            if arr.ndim != 4 or not (arr.shape[1] == arr.shape[2] == arr.shape[3]):
                raise ValueError(f"grid must be (C, R, R, R), got {arr.shape}")
            fh.write(GRID_MAGIC)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_grids(path):
    """Read back every grid record in a file as float32 (C, R, R, R) arrays."""
    out = []
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0
    while pos < len(data):
        if data[pos : pos + 8] != GRID_MAGIC:
            raise ValueError(f"{path}: bad grid magic at byte {pos}")
        c, r = struct.unpack_from("<II", data, pos + 8)
        pos += 16
        count = c * r**3
        end = pos + 4 * count
        if end > len(data):
            raise ValueError(f"{path}: truncated grid record at byte {pos}")
        arr = np.frombuffer(data[pos:end], dtype="<f4").reshape(c, r, r, r)
        out.append(arr.copy())
        pos = end
    return out
