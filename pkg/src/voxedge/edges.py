"""Edge-point labeling by the k-NN centroid-displacement rule.

A point p is an edge point when the centroid c of its k nearest neighbors
(excluding p itself) is displaced by more than lambda times v, where v is
the distance from p to its nearest neighbor. Including p in its own
neighbor set would force v = 0 everywhere and make the threshold
meaningless, so the query is always excluded. Duplicate points still give
v = 0; they are classified by ||c - p|| > 1e-12, which guards float noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import PointCloud

V_FLOOR = 1e-12


@dataclass(frozen=True)
class EdgeParams:
    """Neighbor count k and threshold multiplier lambda."""

    k: int = 100
    lam: float = 5.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")


#: Published parameter profiles: synthetic/dense clouds and Completion3D-style.
PROFILES = {
    "default": EdgeParams(k=100, lam=5.0),
    "completion3d": EdgeParams(k=150, lam=1.8),
}


def _classify(points, nbr_idx, lam):
    nbr = points[nbr_idx]
    centroid = nbr.mean(axis=1)
    disp = np.sqrt(((centroid - points) ** 2).sum(axis=1))
    nearest = nbr[:, 0, :]
    v = np.sqrt(((nearest - points) ** 2).sum(axis=1))
    return disp > np.maximum(lam * v, V_FLOOR)


def extract_edges(pc: PointCloud, params: EdgeParams):
    """Edge mask and edge sub-cloud of pc.

    Neighbor ties break by lowest index, so the mask is deterministic.
    """
    n = len(pc)
    if n <= params.k:
        raise ValueError(f"need more than k={params.k} points, got {n}")
    skip = np.arange(n, dtype=np.int64)
    nbr = kernels.knn(pc.points, pc.points, params.k, skip)
    mask = _classify(pc.points, nbr, params.lam)
    return mask, PointCloud(pc.points[mask])


def extract_edges_bruteforce(pc: PointCloud, params: EdgeParams):
    """Same contract as extract_edges via a full pairwise distance matrix
    and a stable sort; serves as the exhaustive oracle."""
    n = len(pc)
    if n <= params.k:
        raise ValueError(f"need more than k={params.k} points, got {n}")
    pts = pc.points
    diff = pts[:, None, :] - pts[None, :, :]
    dm = (diff * diff).sum(axis=2)
    np.fill_diagonal(dm, np.inf)
    order = np.argsort(dm, axis=1, kind="stable")
    nbr = order[:, : params.k]
    neigh = pts[nbr]
    centroid = neigh.mean(axis=1)
    disp = np.sqrt(((centroid - pts) ** 2).sum(axis=1))
    v = np.sqrt(((pts[nbr[:, 0]] - pts) ** 2).sum(axis=1))
    return disp > np.maximum(params.lam * v, V_FLOOR)
