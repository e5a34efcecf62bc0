"""Scalar losses and evaluation metrics over point clouds and grids.

These are the evaluation-side (plain float) versions; the training tape has
matching differentiable ops in :mod:`voxedge.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from .geometry import PointCloud
from .voxelize import GridSpec

BCE_EPS = 1e-7
LOCALITY_RADIUS = np.sqrt(3.0)


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the five loss groups.

    Defaults follow the dense-benchmark profile; the "pcn" profile zeroes
    the sharp-chamfer and locality terms.
    """

    l1: float = 1e4
    l2: float = 300.0
    l3: float = 100.0
    l4: float = 1e10
    l5: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def from_profile(cls, profile: str) -> "LossWeights":
        if profile == "default":
            return cls()
        if profile == "pcn":
            return cls(l2=0.0, l5=0.0)
        raise ValueError(f"unknown loss profile {profile!r}")


@dataclass(frozen=True)
class LossParts:
    """All nine loss components; field order matches the training log."""

    cd: float = 0.0
    cd_edge: float = 0.0
    cd_sharp: float = 0.0
    bce_p: float = 0.0
    bce_e: float = 0.0
    ld: float = 0.0
    ld_e: float = 0.0
    lo: float = 0.0
    lo_e: float = 0.0


@dataclass(frozen=True)
class GaussianStats:
    """Mean vector and covariance matrix of a feature distribution."""

    mean: np.ndarray
    cov: np.ndarray


def _nn_dist2(a: PointCloud, b: PointCloud):
    d2, _ = kernels.pairwise_nn(a.points, b.points)
    return d2


def _check_pair(p: PointCloud, q: PointCloud):
    if len(p) == 0 or len(q) == 0:
        raise ValueError("point clouds must be non-empty")


def chamfer(p: PointCloud, q: PointCloud) -> float:
    """Mean squared nearest-neighbor distance, summed over both directions."""
    _check_pair(p, q)
    return float(_nn_dist2(p, q).mean() + _nn_dist2(q, p).mean())


def chamfer_sharp(p: PointCloud, q: PointCloud) -> float:
    """Fifth-power variant emphasizing the worst residuals.

    Each direction contributes (1/N) * (sum of d^5)^(1/5); the 1/N sits
    outside the fifth root.
    """
    _check_pair(p, q)
    dp = np.sqrt(_nn_dist2(p, q))
    dq = np.sqrt(_nn_dist2(q, p))
    return float(
        (dp**5).sum() ** 0.2 / len(p) + (dq**5).sum() ** 0.2 / len(q)
    )


def fidelity(inp: PointCloud, out: PointCloud) -> float:
    """Mean unsquared distance from each input point to its nearest output
    point; measures how well the input is preserved."""
    _check_pair(inp, out)
    return float(np.sqrt(_nn_dist2(inp, out)).mean())


def bce_grid(pred, gt) -> float:
    """Mean binary cross entropy over all grid cells, with predictions
    clamped to [1e-7, 1 - 1e-7]."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    return float(-(gt * np.log(p) + (1.0 - gt) * np.log1p(-p)).mean())


def density_mse(pred, gt) -> float:
    """Mean squared difference between density grids."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    d = pred - gt
    return float((d * d).mean())


def locality_loss(points, cell_assignment, spec: GridSpec) -> float:
    """Hinge penalty on points straying beyond sqrt(3) cell widths from
    their generating cell's center; distances are in cell widths."""
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points)
    cells = np.asarray(cell_assignment)
    if cells.ndim != 2 or cells.shape != (pts.shape[0], 3):
        raise ValueError("cell_assignment must be an (N, 3) cell index array")
    centers = (cells + 0.5) * spec.cell_width
    d = np.sqrt(((pts - centers) ** 2).sum(axis=1)) / spec.cell_width
    return float(np.maximum(d - LOCALITY_RADIUS, 0.0).sum())


def total_loss(parts: LossParts, w: LossWeights) -> float:
    """Weighted combination of the nine components.

    Linear in every component: lambda1 multiplies both chamfer terms,
    lambda3 both BCE terms, lambda4 both density terms, lambda5 both
    locality terms, lambda2 the sharp chamfer alone.
    """
    for f in fields(parts):
        if np.isnan(getattr(parts, f.name)):
            raise ValueError(f"loss component {f.name} is NaN")
    return float(
        w.l1 * (parts.cd + parts.cd_edge)
        + w.l2 * parts.cd_sharp
        + w.l3 * (parts.bce_p + parts.bce_e)
        + w.l4 * (parts.ld + parts.ld_e)
        + w.l5 * (parts.lo + parts.lo_e)
    )


# ---------------------------------------------------------------------------
# distribution metrics


def gaussian_stats(features) -> GaussianStats:
    """Mean and (unbiased) covariance of an (N, d) feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need an (N, d) matrix with N >= 2")
    return GaussianStats(mean=x.mean(axis=0), cov=np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]))


def _check_psd(cov, name):
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name}: covariance must be square")
    if np.abs(cov - cov.T).max() > 1e-10:
        raise ValueError(f"{name}: covariance not symmetric within 1e-10")
    w = np.linalg.eigvalsh(cov)
    if w.min() < -1e-10:
        raise ValueError(f"{name}: covariance has eigenvalue {w.min()} < -1e-10")
    return cov


def fpd(x: GaussianStats, y: GaussianStats) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    ||m_x - m_y||^2 + Tr(S_x + S_y - 2 (S_x S_y)^(1/2)), with the matrix
    square root taken through the symmetric form S_x^(1/2) S_y S_x^(1/2)
    and negative eigenvalues clamped to zero.
    """
    sx = _check_psd(x.cov, "x")
    sy = _check_psd(y.cov, "y")
    mx = np.asarray(x.mean, dtype=np.float64)
    my = np.asarray(y.mean, dtype=np.float64)
    if mx.shape != my.shape or sx.shape != sy.shape:
        raise ValueError("dimension mismatch between the two Gaussians")

    wx, vx = np.linalg.eigh(sx)
    rx = (vx * np.sqrt(np.maximum(wx, 0.0))) @ vx.T
    mid = rx @ sy @ rx
    wm = np.linalg.eigvalsh((mid + mid.T) / 2.0)
    tr_sqrt = np.sqrt(np.maximum(wm, 0.0)).sum()
    md = mx - my
    val = md @ md + np.trace(sx) + np.trace(sy) - 2.0 * tr_sqrt
    return float(max(val, 0.0))


def registration_errors(q1, q2, t1, t2):
    """Rotation and translation error between two rigid transforms.

    Rotation error is 2*arccos(clamp(2*<q1, q2>^2 - 1)) with unit
    quaternions; this doubles the relative rotation angle, and is kept in
    that form deliberately. Translation error is ||t1 - t2||.
    """
    q1 = np.asarray(q1, dtype=np.float64).reshape(4)
    q2 = np.asarray(q2, dtype=np.float64).reshape(4)
    for name, q in (("q1", q1), ("q2", q2)):
        if abs(np.sqrt((q * q).sum()) - 1.0) > 1e-6:
            raise ValueError(f"{name} is not unit-norm within 1e-6")
    d = float(q1 @ q2)
    rot = 2.0 * np.arccos(np.clip(2.0 * d * d - 1.0, -1.0, 1.0))
    t1 = np.asarray(t1, dtype=np.float64).reshape(3)
    t2 = np.asarray(t2, dtype=np.float64).reshape(3)
    trans = float(np.sqrt(((t1 - t2) ** 2).sum()))
    return float(rot), trans
