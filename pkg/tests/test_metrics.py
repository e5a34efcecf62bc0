import numpy as np
import pytest

from voxedge.geometry import PointCloud
from voxedge.metrics import (
    GaussianStats,
    LossParts,
    LossWeights,
    bce_grid,
    chamfer,
    chamfer_sharp,
    density_mse,
    fidelity,
    fpd,
    gaussian_stats,
    locality_loss,
    registration_errors,
    total_loss,
)
from voxedge.voxelize import GridSpec


def _chamfer_oracle(a, b):
    total = 0.0
    for p in a:
        total += min(((p - q) ** 2).sum() for q in b) / len(a)
    for q in b:
        total += min(((q - p) ** 2).sum() for p in a) / len(b)
    return total


def test_chamfer_identity_and_pair():
    rng = np.random.default_rng(0)
    pc = PointCloud(rng.random((20, 3)))
    assert chamfer(pc, pc) == 0.0
    p = PointCloud([[0.0, 0.0, 0.0]])
    q = PointCloud([[1.0, 0.0, 0.0]])
    assert chamfer(p, q) == 2.0


def test_chamfer_matches_double_loop():
    rng = np.random.default_rng(1)
    for trial in range(5):
        a = rng.random((50, 3))
        b = rng.random((50, 3))
        got = chamfer(PointCloud(a), PointCloud(b))
        assert abs(got - _chamfer_oracle(a, b)) < 1e-12


def test_chamfer_symmetry_and_permutation():
    rng = np.random.default_rng(2)
    a = PointCloud(rng.random((30, 3)))
    b = PointCloud(rng.random((40, 3)))
    assert chamfer(a, b) == chamfer(b, a)
    perm = rng.permutation(30)
    assert abs(chamfer(PointCloud(a.points[perm]), b) - chamfer(a, b)) < 1e-12


def test_chamfer_scaling():
    rng = np.random.default_rng(3)
    a = rng.random((25, 3))
    b = rng.random((35, 3))
    base_cd = chamfer(PointCloud(a), PointCloud(b))
    base_fid = fidelity(PointCloud(a), PointCloud(b))
    s = 3.5
    cd = chamfer(PointCloud(a * s), PointCloud(b * s))
    fid = fidelity(PointCloud(a * s), PointCloud(b * s))
    assert abs(cd - s * s * base_cd) < 1e-12 * max(1, cd)
    assert abs(fid - s * base_fid) < 1e-12 * max(1, fid)


def test_chamfer_empty_error():
    empty = PointCloud(np.zeros((0, 3)))
    full = PointCloud([[0.0, 0.0, 0.0]])
    for f in (chamfer, chamfer_sharp, fidelity):
        with pytest.raises(ValueError):
            f(empty, full)
        with pytest.raises(ValueError):
            f(full, empty)


def test_chamfer_sharp_cases():
    rng = np.random.default_rng(4)
    pc = PointCloud(rng.random((15, 3)))
    assert chamfer_sharp(pc, pc) == 0.0
    p = PointCloud([[0.0, 0.0, 0.0]])
    q = PointCloud([[1.0, 0.0, 0.0]])
    assert abs(chamfer_sharp(p, q) - 2.0) < 1e-12


def test_chamfer_sharp_l5_oracle():
    rng = np.random.default_rng(5)
    a = rng.random((40, 3))
    b = rng.random((40, 3))
    got = chamfer_sharp(PointCloud(a), PointCloud(b))
    d_ab = np.sqrt((((a[:, None] - b[None]) ** 2).sum(2)).min(1))
    d_ba = np.sqrt((((b[:, None] - a[None]) ** 2).sum(2)).min(1))
    expect = (d_ab**5).sum() ** 0.2 / 40 + (d_ba**5).sum() ** 0.2 / 40
    assert abs(got - expect) < 1e-12


def test_chamfer_sharp_outlier_dominance():
    # one direction's term tracks the largest residual for large exponents
    base = np.zeros((100, 3))
    base[:, 0] = np.linspace(0, 1, 100)
    target = base.copy()
    target[0, 1] = 0.5
    d1 = chamfer_sharp(PointCloud(target), PointCloud(base))
    target[0, 1] = 5.0
    d2 = chamfer_sharp(PointCloud(target), PointCloud(base))
    assert 9.0 < d2 / d1 < 11.0


def test_fidelity_cases():
    rng = np.random.default_rng(6)
    inp = PointCloud(rng.random((10, 3)))
    sup = PointCloud(np.vstack([inp.points, rng.random((5, 3))]))
    assert fidelity(inp, sup) == 0.0
    assert fidelity(PointCloud([[0, 0, 0]]), PointCloud([[3.0, 4.0, 0.0]])) == 5.0


def test_bce_grid():
    gt = np.zeros((4, 4, 4))
    gt[0, 0, 0] = 1.0
    pred = np.where(gt > 0, 1.0 - 1e-7, 1e-7)
    val = bce_grid(pred, gt)
    assert abs(val + np.log1p(-1e-7)) < 1e-12
    assert abs(bce_grid(np.full((4, 4, 4), 0.5), gt) - np.log(2)) < 1e-15
    with pytest.raises(ValueError):
        bce_grid(np.zeros((2, 2, 2)), gt)


def test_bce_grid_oracle():
    rng = np.random.default_rng(7)
    pred = rng.random((5, 5, 5))
    gt = (rng.random((5, 5, 5)) > 0.5).astype(float)
    got = bce_grid(pred, gt)
    p = np.clip(pred, 1e-7, 1 - 1e-7)
    total = 0.0
    for c in range(125):
        pc_ = p.reshape(-1)[c]
        g = gt.reshape(-1)[c]
        total += -(g * np.log(pc_) + (1 - g) * np.log(1 - pc_))
    assert abs(got - total / 125) < 1e-12


def test_density_mse():
    rng = np.random.default_rng(8)
    a = rng.random((4, 4, 4))
    assert density_mse(a, a) == 0.0
    assert abs(density_mse(a + 1.0, a) - 1.0) < 1e-12
    b = rng.random((4, 4, 4))
    assert abs(density_mse(a, b) - ((a - b) ** 2).mean()) < 1e-15
    with pytest.raises(ValueError):
        density_mse(a, np.zeros((2, 2, 2)))


def test_locality_loss():
    spec = GridSpec(8)
    cells = np.array([[1, 2, 3], [4, 5, 6]])
    centers = (cells + 0.5) * spec.cell_width
    assert locality_loss(centers, cells, spec) == 0.0
    # displace one point by 2*sqrt(3) cell widths along x
    moved = centers.copy()
    moved[0, 0] += 2 * np.sqrt(3) * spec.cell_width
    val = locality_loss(moved, cells, spec)
    assert abs(val - np.sqrt(3)) < 1e-12
    with pytest.raises(ValueError):
        locality_loss(centers, cells[:1], spec)


def test_locality_inactive_within_radius():
    rng = np.random.default_rng(9)
    spec = GridSpec(16)
    cells = rng.integers(0, 16, (50, 3))
    centers = (cells + 0.5) * spec.cell_width
    d = rng.standard_normal((50, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    radius = rng.random(50) * np.sqrt(3) * spec.cell_width
    pts = centers + d * radius[:, None]
    assert locality_loss(pts, cells, spec) == 0.0


def test_total_loss_values():
    w = LossWeights()
    assert total_loss(LossParts(), w) == 0.0
    unit = LossParts(1, 1, 1, 1, 1, 1, 1, 1, 1)
    expect = 1e4 * 2 + 300 + 100 * 2 + 1e10 * 2 + 0.3 * 2
    assert total_loss(unit, w) == expect
    pcn = LossWeights.from_profile("pcn")
    assert pcn.l2 == 0.0 and pcn.l5 == 0.0
    assert total_loss(unit, pcn) == 1e4 * 2 + 100 * 2 + 1e10 * 2


def test_total_loss_linearity():
    w = LossWeights()
    base = total_loss(LossParts(), w)
    coeffs = {
        "cd": w.l1, "cd_edge": w.l1, "cd_sharp": w.l2, "bce_p": w.l3,
        "bce_e": w.l3, "ld": w.l4, "ld_e": w.l4, "lo": w.l5, "lo_e": w.l5,
    }
    for name, lam in coeffs.items():
        one = total_loss(LossParts(**{name: 1.0}), w)
        two = total_loss(LossParts(**{name: 2.0}), w)
        assert one - base == lam
        assert two - base == 2.0 * lam


def test_total_loss_nan_named():
    with pytest.raises(ValueError, match="bce_e"):
        total_loss(LossParts(bce_e=float("nan")), LossWeights())


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(l1=-1.0)
    with pytest.raises(ValueError):
        LossWeights.from_profile("nope")


# ---------------------------------------------------------------------------
# distribution metrics


def test_fpd_identity():
    rng = np.random.default_rng(10)
    x = gaussian_stats(rng.standard_normal((200, 6)))
    assert fpd(x, x) <= 1e-8


def test_fpd_1d_closed_form():
    for m1, v1, m2, v2 in [(0.0, 1.0, 2.0, 4.0), (1.0, 0.25, -1.0, 9.0)]:
        x = GaussianStats(np.array([m1]), np.array([[v1]]))
        y = GaussianStats(np.array([m2]), np.array([[v2]]))
        expect = (m1 - m2) ** 2 + (np.sqrt(v1) - np.sqrt(v2)) ** 2
        assert abs(fpd(x, y) - expect) < 1e-8


def test_fpd_diagonal_closed_form():
    rng = np.random.default_rng(11)
    a = rng.random(5) + 0.1
    b = rng.random(5) + 0.1
    mx = rng.standard_normal(5)
    my = rng.standard_normal(5)
    x = GaussianStats(mx, np.diag(a))
    y = GaussianStats(my, np.diag(b))
    expect = ((mx - my) ** 2).sum() + ((np.sqrt(a) - np.sqrt(b)) ** 2).sum()
    assert abs(fpd(x, y) - expect) < 1e-8


def test_fpd_symmetry_and_errors():
    rng = np.random.default_rng(12)
    x = gaussian_stats(rng.standard_normal((100, 4)))
    y = gaussian_stats(rng.standard_normal((100, 4)) * 2 + 1)
    assert abs(fpd(x, y) - fpd(y, x)) < 1e-8
    assert fpd(x, y) >= 0.0
    bad = GaussianStats(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="symmetric"):
        fpd(bad, bad)
    neg = GaussianStats(np.zeros(2), np.array([[-1.0, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="eigenvalue"):
        fpd(neg, neg)


def test_gaussian_stats():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((50, 3))
    st = gaussian_stats(x)
    assert np.allclose(st.mean, x.mean(axis=0))
    assert np.allclose(st.cov, np.cov(x, rowvar=False))


# ---------------------------------------------------------------------------
# registration errors


def test_registration_identity_and_double_cover():
    q = np.array([1.0, 0.0, 0.0, 0.0])
    rot, trans = registration_errors(q, q, np.zeros(3), np.zeros(3))
    assert rot == 0.0 and trans == 0.0
    rot, _ = registration_errors(q, -q, np.zeros(3), np.zeros(3))
    assert rot == 0.0


def test_registration_90_about_z():
    # relative rotation of 90 degrees: the as-written formula doubles the
    # angle, giving pi rather than the conventional pi/2. No float64 value
    # squares to exactly 0.5, so the arccos argument cannot be exactly zero;
    # one ulp of pi is the attainable exactness.
    q1 = np.array([1.0, 0.0, 0.0, 0.0])
    c = np.sqrt(0.5)
    q2 = np.array([c, 0.0, 0.0, c])
    rot, trans = registration_errors(q1, q2, np.zeros(3), np.ones(3))
    assert abs(rot - np.pi) <= np.spacing(np.pi)
    assert abs(trans - np.sqrt(3.0)) < 1e-15


def test_registration_translation_and_validation():
    q = np.array([1.0, 0.0, 0.0, 0.0])
    _, trans = registration_errors(q, q, np.array([1.0, 2.0, 2.0]), np.zeros(3))
    assert trans == 3.0
    with pytest.raises(ValueError, match="q2"):
        registration_errors(q, q * 1.1, np.zeros(3), np.zeros(3))
