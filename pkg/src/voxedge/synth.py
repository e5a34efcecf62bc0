"""Synthetic shape families and dataset materialization.

Five analytic surface families cover the geometry the network is meant to
handle, including thin structures (lamp poles, table legs) whose points are
overwhelmingly edge-like. Sampling is uniform by surface area: part sizes
are drawn multinomially from area weights and each part samples uniformly
on its own surface. Everything is deterministic in the spec.
"""

from __future__ import annotations

import csv
import dataclasses
import os

import numpy as np

from . import voxelize
from .edges import EdgeParams, extract_edges
from .geometry import (
    OcclusionSpec,
    PointCloud,
    normalize_to_unit_cube,
    occlude_by_viewpoint,
    save_pointcloud,
)
from .voxelize import GridSpec

KINDS = ("box", "cylinder", "lamp", "table", "cross")

DEFAULT_PARAMS = {
    "box": {"width": 1.0, "height": 1.0, "depth": 1.0},
    "cylinder": {"radius": 0.4, "height": 1.2},
    "lamp": {
        "pole_radius": 0.02,
        "pole_height": 0.9,
        "shade_top": 0.12,
        "shade_bottom": 0.35,
        "shade_height": 0.3,
        "base_radius": 0.22,
    },
    "table": {
        "top_width": 0.9,
        "top_depth": 0.7,
        "top_thickness": 0.04,
        "leg_width": 0.04,
        "leg_height": 0.7,
    },
    "cross": {"length": 1.0, "thickness": 0.12, "depth": 0.45},
}


@dataclasses.dataclass(frozen=True)
class ShapeSpec:
    kind: str
    n: int
    seed: int
    params: dict | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if self.n < 64:
            raise ValueError(f"need at least 64 points, got {self.n}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        merged = dict(DEFAULT_PARAMS[self.kind])
        if self.params:
            unknown = sorted(set(self.params) - set(merged))
            if unknown:
                raise ValueError(f"unknown {self.kind} parameters: {unknown}")
            merged.update(self.params)
        for key, val in merged.items():
            if val <= 0:
                raise ValueError(f"{self.kind} parameter {key} must be positive, got {val}")
        object.__setattr__(self, "params", merged)


# ---------------------------------------------------------------------------
# part samplers: each returns (count, 3) points in canonical coordinates


def _sample_rect(rng, count, center, udir, vdir, uext, vext):
    u = (rng.random(count) - 0.5) * uext
    v = (rng.random(count) - 0.5) * vext
    return center + u[:, None] * udir + v[:, None] * vdir


def _box_parts(p):
    w, h, d = p["width"], p["height"], p["depth"]
    ex = np.array([1.0, 0, 0])
    ey = np.array([0, 1.0, 0])
    ez = np.array([0, 0, 1.0])
    faces = [
        (h * d, np.array([w / 2, 0, 0]), ey, ez, h, d),
        (h * d, np.array([-w / 2, 0, 0]), ey, ez, h, d),
        (w * d, np.array([0, h / 2, 0]), ex, ez, w, d),
        (w * d, np.array([0, -h / 2, 0]), ex, ez, w, d),
        (w * h, np.array([0, 0, d / 2]), ex, ey, w, h),
        (w * h, np.array([0, 0, -d / 2]), ex, ey, w, h),
    ]
    parts = []
    for area, center, udir, vdir, uext, vext in faces:
        parts.append(
            (area, lambda r, c, a=center, u=udir, v=vdir, ue=uext, ve=vext: _sample_rect(r, c, a, u, v, ue, ve))
        )
    return parts


def _sample_lateral(rng, count, radius, height, base_y):
    theta = rng.random(count) * 2 * np.pi
    y = base_y + rng.random(count) * height
    return np.stack([radius * np.cos(theta), y, radius * np.sin(theta)], axis=1)


def _sample_disk(rng, count, radius, y):
    theta = rng.random(count) * 2 * np.pi
    r = radius * np.sqrt(rng.random(count))
    return np.stack([r * np.cos(theta), np.full(count, float(y)), r * np.sin(theta)], axis=1)


def _sample_frustum(rng, count, r_top, r_bottom, height, base_y):
    # area element grows linearly with local radius; invert that CDF
    u = rng.random(count)
    if abs(r_bottom - r_top) < 1e-12:
        v = u
    else:
        v = (-r_bottom + np.sqrt(r_bottom**2 + u * (r_top**2 - r_bottom**2))) / (r_top - r_bottom)
    radius = r_bottom + (r_top - r_bottom) * v
    theta = rng.random(count) * 2 * np.pi
    y = base_y + v * height
    return np.stack([radius * np.cos(theta), y, radius * np.sin(theta)], axis=1)


def _cylinder_parts(p):
    r, h = p["radius"], p["height"]
    return [
        (2 * np.pi * r * h, lambda g, c: _sample_lateral(g, c, r, h, -h / 2)),
        (np.pi * r * r, lambda g, c: _sample_disk(g, c, r, h / 2)),
        (np.pi * r * r, lambda g, c: _sample_disk(g, c, r, -h / 2)),
    ]


def _lamp_parts(p):
    pr, ph = p["pole_radius"], p["pole_height"]
    st, sb, sh = p["shade_top"], p["shade_bottom"], p["shade_height"]
    br = p["base_radius"]
    slant = np.hypot(sb - st, sh)
    return [
        (np.pi * br * br, lambda g, c: _sample_disk(g, c, br, 0.0)),
        (2 * np.pi * pr * ph, lambda g, c: _sample_lateral(g, c, pr, ph, 0.0)),
        (np.pi * (st + sb) * slant, lambda g, c: _sample_frustum(g, c, st, sb, sh, ph)),
    ]


def _shifted_box_parts(p_extents, center):
    inner = _box_parts(p_extents)
    shift = np.asarray(center, dtype=np.float64)
    return [(area, lambda g, c, f=f, s=shift: f(g, c) + s) for area, f in inner]


def _table_parts(p):
    tw, td, tt = p["top_width"], p["top_depth"], p["top_thickness"]
    lw, lh = p["leg_width"], p["leg_height"]
    parts = _shifted_box_parts(
        {"width": tw, "height": tt, "depth": td}, [0.0, lh + tt / 2, 0.0]
    )
    ox = tw / 2 - lw
    oz = td / 2 - lw
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts += _shifted_box_parts(
                {"width": lw, "height": lh, "depth": lw}, [sx * ox, lh / 2, sz * oz]
            )
    return parts


def _cross_parts(p):
    ln, t, d = p["length"], p["thickness"], p["depth"]
    parts = _shifted_box_parts({"width": ln, "height": t, "depth": d}, [0.0, 0.0, 0.0])
    parts += _shifted_box_parts({"width": t, "height": ln, "depth": d}, [0.0, 0.0, 0.0])
    return parts


_FAMILIES = {
    "box": _box_parts,
    "cylinder": _cylinder_parts,
    "lamp": _lamp_parts,
    "table": _table_parts,
    "cross": _cross_parts,
}

#: part index ranges carrying a per-kind structural label, used by tests
#: (table: parts 6..29 are the four legs, six faces each)
TABLE_LEG_PART_START = 6


def make_shape_labeled(spec: ShapeSpec):
    """Sample a shape; returns (PointCloud, part label per point).

    Labels index the family's part list (e.g. box faces 0..5). The cloud is
    normalized to the unit cube and quantized to float32 grid so that saved
    and in-memory coordinates agree exactly.
    """
    parts = _FAMILIES[spec.kind](spec.params)
    areas = np.array([a for a, _ in parts], dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    counts = rng.multinomial(spec.n, areas / areas.sum())
    chunks, labels = [], []
    for idx, ((_, sampler), count) in enumerate(zip(parts, counts)):
        if count == 0:
            continue
        chunks.append(sampler(rng, int(count)))
        labels.append(np.full(count, idx, dtype=np.int64))
    pts = np.concatenate(chunks, axis=0)
    cloud, _ = normalize_to_unit_cube(PointCloud(pts))
    quantized = cloud.points.astype(np.float32).astype(np.float64)
    return PointCloud(quantized), np.concatenate(labels)


def make_shape(spec: ShapeSpec) -> PointCloud:
    return make_shape_labeled(spec)[0]


def random_spec(kind: str, n: int, seed: int) -> ShapeSpec:
    """A ShapeSpec with sizes jittered +-25% around the family defaults."""
    rng = np.random.default_rng(seed * 7919 + KINDS.index(kind))
    params = {
        key: float(val * rng.uniform(0.75, 1.25)) for key, val in DEFAULT_PARAMS[kind].items()
    }
    return ShapeSpec(kind, n, seed, params)


# ---------------------------------------------------------------------------
# dataset materialization


def edge_params_for(n: int) -> EdgeParams:
    return EdgeParams(k=min(100, max(2, n // 8)), lam=5.0)


def make_dataset(
    specs: list,
    occlusion: OcclusionSpec,
    out_dir,
    resolution: int = 16,
    ratios: list | None = None,
) -> list:
    """Write one directory per sample plus a manifest; returns manifest rows.

    Layout: out_dir/sample_%04d/{complete.ply, partial.ply, edges.ply,
    grids.bin} where grids.bin holds occupancy, density, edge occupancy and
    edge density of the complete cloud at the given resolution. Each sample
    is occluded with seed occlusion.seed + index. Fully deterministic.
    """
    if ratios is not None and len(ratios) != len(specs):
        raise ValueError("ratios must match specs one to one")
    spec_grid = GridSpec(resolution)
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for idx, shape_spec in enumerate(specs):
        ratio = float(ratios[idx]) if ratios is not None else occlusion.target_ratio
        sample_id = f"sample_{idx:04d}"
        sdir = os.path.join(out_dir, sample_id)
        os.makedirs(sdir, exist_ok=True)
        complete = make_shape(shape_spec)
        partial = occlude_by_viewpoint(
            complete, OcclusionSpec(seed=occlusion.seed + idx, target_ratio=ratio)
        )
        _, edge_cloud = extract_edges(complete, edge_params_for(shape_spec.n))
        save_pointcloud(os.path.join(sdir, "complete.ply"), complete)
        save_pointcloud(os.path.join(sdir, "partial.ply"), partial)
        save_pointcloud(os.path.join(sdir, "edges.ply"), edge_cloud)
        occ = voxelize.binary_occupancy(complete, spec_grid)[None]
        dens = voxelize.density_target(complete, spec_grid).density[None]
        if len(edge_cloud):
            eocc = voxelize.binary_occupancy(edge_cloud, spec_grid)[None]
            edens = voxelize.density_target(edge_cloud, spec_grid).density[None]
        else:
            eocc = np.zeros_like(occ)
            edens = np.zeros_like(dens)
        voxelize.write_grids(os.path.join(sdir, "grids.bin"), [occ, dens, eocc, edens])
        rows.append(
            {
                "id": sample_id,
                "kind": shape_spec.kind,
                "seed": shape_spec.seed,
                "n": shape_spec.n,
                "ratio": ratio,
            }
        )
    with open(os.path.join(out_dir, "manifest.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "kind", "seed", "n", "ratio"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_manifest(data_dir) -> list:
    path = os.path.join(data_dir, "manifest.csv")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty manifest")
    for row in rows:
        row["seed"] = int(row["seed"])
        row["n"] = int(row["n"])
        row["ratio"] = float(row["ratio"])
    return rows


def parse_spec_file(path) -> tuple:
    """Read a dataset description CSV with columns kind,n,seed,ratio.

    Returns (list of ShapeSpec built via random_spec, list of ratios).
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"kind", "n", "seed", "ratio"}:
            raise ValueError(f"{path}: expected header kind,n,seed,ratio")
        specs, ratios = [], []
        for ln, row in enumerate(reader, start=2):
            try:
                kind = row["kind"].strip()
                n = int(row["n"])
                seed = int(row["seed"])
                ratio = float(row["ratio"])
            except (ValueError, AttributeError) as exc:
                raise ValueError(f"{path}:{ln}: bad row {row}") from exc
            if not 0 < ratio < 1:
                raise ValueError(f"{path}:{ln}: ratio must be in (0, 1)")
            specs.append(random_spec(kind, n, seed))
            ratios.append(ratio)
    if not specs:
        raise ValueError(f"{path}: no samples listed")
    return specs, ratios
