"""Point cloud container, file I/O, normalization, sampling and occlusion.

Coordinates are float64 throughout. Files are XYZ-ASCII (one ``x y z`` per
line, blank lines ignored) or a PLY subset: format ``ascii 1.0`` or
``binary_little_endian 1.0``, a single ``vertex`` element with float32
properties x, y, z; everything else is rejected.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels


class ParseError(ValueError):
    """A point cloud file could not be parsed; message carries the line."""


class UnsupportedFormatError(ValueError):
    """A PLY file is valid but outside the supported subset."""


class PointCloud:
    """An ordered set of 3D points stored as a float64 (N, 3) array."""

    __slots__ = ("points",)

    def __init__(self, points):
        arr = np.array(points, dtype=np.float64, copy=True)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("point coordinates must be finite")
        self.points = arr

    def __len__(self):
        return self.points.shape[0]

    def __repr__(self):
        return f"PointCloud({len(self)} points)"

    def subset(self, indices) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices)])


@dataclass(frozen=True)
class NormTransform:
    """Isotropic map into the unit cube: out = (p - center) * scale + 0.5."""

    center: tuple[float, float, float]
    scale: float

    def apply(self, points):
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale + 0.5

    def invert(self, points):
        return (np.asarray(points, dtype=np.float64) - 0.5) / self.scale + np.asarray(
            self.center
        )


@dataclass(frozen=True)
class OcclusionSpec:
    """Viewpoint occlusion: remove the floor(target_ratio * N) points nearest
    a seed-chosen cloud point."""

    seed: int
    target_ratio: float

    def __post_init__(self):
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 < self.target_ratio < 1.0:
            raise ValueError("target_ratio must lie in (0, 1)")


# ---------------------------------------------------------------------------
# file I/O


def _parse_xyz(data: bytes, path: str) -> PointCloud:
    pts = []
    for lineno, raw in enumerate(data.decode("utf-8", errors="replace").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"{path}: line {lineno}: expected 3 values, got {len(parts)}")
        try:
            x, y, z = (float(p) for p in parts)
        except ValueError:
            raise ParseError(f"{path}: line {lineno}: could not parse {line!r}") from None
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(z)):
            raise ParseError(f"{path}: line {lineno}: non-finite coordinate")
        pts.append((x, y, z))
    if not pts:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.array(pts, dtype=np.float64))


def _parse_ply(data: bytes, path: str) -> PointCloud:
    end = data.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise ParseError(f"{path}: no data after end_header")
    header = data[:nl].decode("ascii", errors="replace")
    body = data[nl + 1 :]

    fmt = None
    nvert = None
    props = []
    in_vertex = False
    for lineno, raw in enumerate(header.splitlines(), 1):
        line = raw.strip()
        if not line or line == "ply" or line.startswith("comment"):
            continue
        tok = line.split()
        if tok[0] == "format":
            if tok[1:] == ["ascii", "1.0"]:
                fmt = "ascii"
            elif tok[1:] == ["binary_little_endian", "1.0"]:
                fmt = "binary"
            else:
                raise UnsupportedFormatError(f"{path}: unsupported format {line!r}")
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError(f"{path}: line {lineno}: bad element line")
            if tok[1] == "vertex":
                nvert = int(tok[2])
                in_vertex = True
            else:
                raise UnsupportedFormatError(f"{path}: unsupported element {tok[1]!r}")
        elif tok[0] == "property":
            if not in_vertex:
                raise UnsupportedFormatError(f"{path}: property outside vertex element")
            if len(tok) != 3 or tok[1] not in ("float", "float32"):
                raise UnsupportedFormatError(f"{path}: unsupported property {line!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            break
        else:
            raise ParseError(f"{path}: line {lineno}: unrecognized header line {line!r}")
    if fmt is None or nvert is None:
        raise ParseError(f"{path}: incomplete PLY header")
    if props != ["x", "y", "z"]:
        raise UnsupportedFormatError(f"{path}: vertex properties must be x, y, z; got {props}")

    if fmt == "binary":
        need = 12 * nvert
        if len(body) < need:
            raise ParseError(f"{path}: vertex data truncated ({len(body)} < {need} bytes)")
        arr = np.frombuffer(body[:need], dtype="<f4").reshape(nvert, 3)
        return PointCloud(arr.astype(np.float64))

    pts = np.zeros((nvert, 3), dtype=np.float64)
    lines = body.decode("ascii", errors="replace").splitlines()
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) < nvert:
        raise ParseError(f"{path}: vertex data truncated ({len(lines)} < {nvert} lines)")
    for i in range(nvert):
        parts = lines[i].split()
        if len(parts) != 3:
            raise ParseError(f"{path}: vertex {i}: expected 3 values")
        try:
            pts[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"{path}: vertex {i}: could not parse {lines[i]!r}") from None
    # ascii PLY carries float32 payloads; quantize so both encodings agree
    return PointCloud(pts.astype(np.float32).astype(np.float64))


def load_pointcloud(path) -> PointCloud:
    """Read a point cloud from an XYZ-ASCII or supported-subset PLY file."""
    path = str(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:3] == b"ply":
        return _parse_ply(data, path)
    return _parse_xyz(data, path)


def save_pointcloud(path, pc: PointCloud, fmt: str | None = None) -> None:
    """Write a cloud as binary PLY (``.ply`` suffix or fmt="ply") or XYZ.

    PLY payloads are float32 binary little-endian, so writing is
    byte-deterministic; XYZ uses shortest round-trip decimals.
    """
    path = str(path)
    if fmt is None:
        fmt = "ply" if path.endswith(".ply") else "xyz"
    if fmt == "ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(pc)}\n"
            "property float x\nproperty float y\nproperty float z\nend_header\n"
        )
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(pc.points, dtype="<f4").tobytes())
    elif fmt == "xyz":
        with open(path, "w", encoding="ascii") as fh:
            for x, y, z in pc.points:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def save_mask(path, mask) -> None:
    """Write an edge mask as one 0/1 per line, aligned with cloud order."""
    mask = np.asarray(mask)
    with open(path, "w", encoding="ascii") as fh:
        for v in mask:
            fh.write("1\n" if v else "0\n")


# ---------------------------------------------------------------------------
# normalization


def normalize_to_unit_cube(pc: PointCloud, margin: float = 0.5 / 32):
    """Center a cloud and scale it isotropically so the longest axis spans
    [margin, 1 - margin].

    The margin keeps points off the outer grid faces; pass 0.5/R for the
    grid resolution in use. A degenerate cloud (all points identical) maps
    to (0.5, 0.5, 0.5).
    """
    if len(pc) < 1:
        raise ValueError("cannot normalize an empty cloud")
    if not 0.0 <= margin < 0.5:
        raise ValueError("margin must lie in [0, 0.5)")
    mins = pc.points.min(axis=0)
    maxs = pc.points.max(axis=0)
    center = (mins + maxs) / 2.0
    extent = float((maxs - mins).max())
    scale = 1.0 if extent == 0.0 else (1.0 - 2.0 * margin) / extent
    tf = NormTransform(center=tuple(center.tolist()), scale=scale)
    return PointCloud(tf.apply(pc.points)), tf


# ---------------------------------------------------------------------------
# sampling and neighbors


def farthest_point_indices(pc: PointCloud, m: int, seed_index: int = 0):
    """Indices of m greedy farthest-point samples, starting at seed_index.

    Each subsequent pick maximizes the minimum distance to the picked set;
    ties resolve to the lowest index.
    """
    n = len(pc)
    if not 1 <= m <= n:
        raise ValueError(f"m must lie in [1, {n}], got {m}")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index must lie in [0, {n}), got {seed_index}")
    return kernels.fps(pc.points, m, seed_index)


def farthest_point_sample(pc: PointCloud, m: int, seed_index: int = 0) -> PointCloud:
    """The cloud restricted to its m farthest-point sample."""
    return pc.subset(farthest_point_indices(pc, m, seed_index))


def knn(pc: PointCloud, query, k: int):
    """Indices of the k nearest cloud points for one query point or a batch.

    Results are sorted by ascending distance, ties by lowest index. A query
    equal to a cloud point includes that point.
    """
    n = len(pc)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = q.reshape(-1, 3)
    skip = np.full(q.shape[0], -1, dtype=np.int64)
    out = kernels.knn(pc.points, q, k, skip)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# occlusion


def occlude_by_viewpoint(pc: PointCloud, spec: OcclusionSpec) -> PointCloud:
    """Remove the floor(ratio * N) points nearest a seed-chosen viewpoint.

    The viewpoint is a cloud point drawn from the seed; distance ties break
    by index and survivors keep their input order, so the result is fully
    determined by (cloud, seed, ratio).
    """
    n = len(pc)
    if n < 1:
        raise ValueError("cannot occlude an empty cloud")
    rng = np.random.default_rng(spec.seed)
    vp = pc.points[int(rng.integers(n))]
    diff = pc.points - vp
    d2 = (diff * diff).sum(axis=1)
    order = np.lexsort((np.arange(n), d2))
    n_remove = int(spec.target_ratio * n)
    survivors = np.sort(order[n_remove:])
    return pc.subset(survivors)
