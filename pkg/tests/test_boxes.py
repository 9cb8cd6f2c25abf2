"""Box metrics: rasterization and scalar oracles, cross-formula equivalence,
metric properties, gradient behavior on overlap plateaus."""

import math

import numpy as np
import pytest
import scipy.linalg

from istdyolo import tensor as T
from istdyolo.boxes import (
    BBox,
    GaussianBox,
    LossConfig,
    box_regression_loss,
    box_regression_loss_t,
    ciou_loss,
    ciou_loss_t,
    gauss_from_box,
    iou,
    iou_batch,
    iou_t,
    nwd,
    nwd_loss,
    nwd_loss_t,
    nwd_t,
    wasserstein2_boxes,
    wasserstein2_general,
)

from oracles import ciou_penalty_ref, iou_raster_ref, nwd_ref, wasserstein_sq_ref

rng = np.random.default_rng(2024)


def random_box(r, lo=1.0, hi=40.0, span=60.0) -> BBox:
    return BBox(
        cx=float(r.uniform(-span, span)),
        cy=float(r.uniform(-span, span)),
        w=float(r.uniform(lo, hi)),
        h=float(r.uniform(lo, hi)),
    )


def disjoint_pair(r) -> tuple[BBox, BBox]:
    gt = BBox(float(r.uniform(-20, 20)), float(r.uniform(-20, 20)), float(r.uniform(2, 10)), float(r.uniform(2, 10)))
    ang = float(r.uniform(0, 2 * math.pi))
    gap = float(r.uniform(2, 30))
    w, h = float(r.uniform(2, 10)), float(r.uniform(2, 10))
    # step far enough along the chosen direction that the boxes cannot touch
    reach = (gt.w + w) / 2 + (gt.h + h) / 2 + gap
    pred = BBox(gt.cx + reach * math.cos(ang), gt.cy + reach * math.sin(ang), w, h)
    assert iou(pred, gt) == 0.0
    return pred, gt


# ---------------------------------------------------------------------------
# IoU / CIoU
# ---------------------------------------------------------------------------


def test_iou_identical_and_disjoint():
    a = BBox(2, 2, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BBox(10, 10, 2, 2)) == 0.0


def test_iou_quarter_overlap_case():
    # inter 1x1, union 4+4-1=7
    assert iou(BBox(2, 2, 2, 2), BBox(3, 3, 2, 2)) == pytest.approx(1 / 7, rel=1e-12)


def test_iou_matches_rasterization_oracle_on_grid_boxes():
    r = np.random.default_rng(7)
    for _ in range(20):
        # coordinates on a 1/4-px grid so cell counting is exact
        def grid_box():
            return BBox(
                cx=round(float(r.uniform(2, 8)) * 4) / 4,
                cy=round(float(r.uniform(2, 8)) * 4) / 4,
                w=round(float(r.uniform(1, 6)) * 4) / 4,
                h=round(float(r.uniform(1, 6)) * 4) / 4,
            )

        a, b = grid_box(), grid_box()
        want = iou_raster_ref((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h), cells_per_unit=8)
        assert iou(a, b) == pytest.approx(want, abs=1e-9)


def test_ciou_zero_for_identical_and_reduces_to_iou_term():
    a = BBox(5, 5, 4, 2)
    assert ciou_loss(a, a) == pytest.approx(0.0, abs=1e-12)
    # same center, same aspect, different scale: distance and aspect terms vanish
    b = BBox(5, 5, 8, 4)
    assert ciou_loss(a, b) == pytest.approx(1.0 - iou(a, b), abs=1e-9)


def test_ciou_matches_scalar_oracle():
    r = np.random.default_rng(11)
    for _ in range(50):
        a, b = random_box(r), random_box(r)
        want = 1.0 - ciou_penalty_ref((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h))
        assert ciou_loss(a, b) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_bbox_validation():
    with pytest.raises(ValueError, match="positive"):
        BBox(0, 0, -1, 2)
    with pytest.raises(ValueError, match="positive"):
        BBox(0, 0, 1, 0)
    with pytest.raises(ValueError, match="finite"):
        BBox(float("nan"), 0, 1, 1)


# ---------------------------------------------------------------------------
# Gaussian modeling / Wasserstein
# ---------------------------------------------------------------------------


def test_gauss_from_box_values():
    g = gauss_from_box(BBox(0, 0, 2, 2))
    assert g.mean == (0, 0)
    np.testing.assert_array_equal(g.cov, np.eye(2))
    g2 = gauss_from_box(BBox(5, 3, 4, 2))
    assert g2.mean == (5, 3)
    np.testing.assert_array_equal(g2.cov, np.diag([4.0, 1.0]))
    b = BBox(1, 2, 3, 5)
    det = np.linalg.det(gauss_from_box(b).cov)
    assert det == pytest.approx((b.w * b.h / 4) ** 2, rel=1e-12)


def test_wasserstein_general_trivials():
    p = gauss_from_box(BBox(2, 2, 2, 2))
    assert wasserstein2_general(p, p) == pytest.approx(0.0, abs=1e-12)
    q = gauss_from_box(BBox(3, 3, 2, 2))
    assert wasserstein2_general(p, q) == pytest.approx(2.0, rel=1e-12)


def test_wasserstein_general_against_scipy_sqrtm():
    r = np.random.default_rng(5)
    for _ in range(30):
        a, b = random_box(r), random_box(r)
        p, q = gauss_from_box(a), gauss_from_box(b)
        root = scipy.linalg.sqrtm(q.cov @ p.cov @ np.eye(2))  # diagonal case commutes
        want = float(
            np.sum((np.array(p.mean) - np.array(q.mean)) ** 2)
            + np.trace(p.cov + q.cov - 2 * scipy.linalg.sqrtm(
                scipy.linalg.sqrtm(q.cov) @ p.cov @ scipy.linalg.sqrtm(q.cov)
            ))
        )
        assert wasserstein2_general(p, q) == pytest.approx(want, rel=1e-9)
        del root


def test_wasserstein_general_rejects_bad_covariance():
    good = gauss_from_box(BBox(0, 0, 2, 2))
    with pytest.raises(ValueError, match="positive definite"):
        wasserstein2_general(good, GaussianBox((0, 0), np.array([[1.0, 0.0], [0.0, -1.0]])))
    with pytest.raises(ValueError, match="symmetric"):
        wasserstein2_general(good, GaussianBox((0, 0), np.array([[1.0, 0.5], [0.0, 1.0]])))


def test_wasserstein_boxes_trivials():
    a = BBox(2, 2, 2, 2)
    assert wasserstein2_boxes(a, a) == 0.0
    assert wasserstein2_boxes(a, BBox(3, 3, 2, 2)) == pytest.approx(2.0, rel=1e-15)
    assert wasserstein2_boxes(BBox(0.001, 0.001, 4, 4), BBox(0.001, 0.001, 8, 8)) == pytest.approx(
        8.0, rel=1e-12
    )


def test_general_equals_simplified_over_many_pairs():
    r = np.random.default_rng(31337)
    worst = 0.0
    for _ in range(10000):
        a, b = random_box(r), random_box(r)
        general = wasserstein2_general(gauss_from_box(a), gauss_from_box(b))
        simple = wasserstein2_boxes(a, b)
        worst = max(worst, abs(general - simple) / max(1.0, simple))
    assert worst <= 1e-9


def test_wasserstein_matches_independent_oracle():
    r = np.random.default_rng(77)
    for _ in range(50):
        a, b = random_box(r), random_box(r)
        want = wasserstein_sq_ref((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h))
        assert wasserstein2_boxes(a, b) == pytest.approx(want, rel=1e-9, abs=1e-9)


# ---------------------------------------------------------------------------
# NWD
# ---------------------------------------------------------------------------


def test_nwd_known_value_and_identity():
    a, b = BBox(2, 2, 2, 2), BBox(3, 3, 2, 2)
    assert nwd(a, a, 2.0) == 1.0
    assert nwd(a, b, 2.0) == pytest.approx(math.exp(-math.sqrt(2) / 2), rel=1e-12)
    assert nwd(a, b, 2.0) == pytest.approx(0.49307, abs=5e-6)
    assert nwd(a, b, 2.0) == pytest.approx(nwd_ref((2, 2, 2, 2), (3, 3, 2, 2), 2.0), rel=1e-12)


def test_nwd_rejects_bad_constant():
    a = BBox(0, 0, 1, 1)
    with pytest.raises(ValueError):
        nwd(a, a, 0.0)
    with pytest.raises(ValueError):
        nwd(a, a, -2.0)


def test_nwd_property_suite_10k_pairs():
    r = np.random.default_rng(424242)
    c = 8.0
    for _ in range(10000):
        a, b = random_box(r), random_box(r)
        val = nwd(a, b, c)
        assert 0.0 < val <= 1.0
        assert (val == 1.0) == (a == b)
        assert nwd(b, a, c) == val  # symmetric
        dx, dy = float(r.uniform(-15, 15)), float(r.uniform(-15, 15))
        shifted = nwd(
            BBox(a.cx + dx, a.cy + dy, a.w, a.h), BBox(b.cx + dx, b.cy + dy, b.w, b.h), c
        )
        assert shifted == pytest.approx(val, rel=1e-9, abs=1e-12)


def test_nwd_ranking_invariant_under_joint_rescale():
    r = np.random.default_rng(99)
    c = 6.0
    scale = 3.5
    for _ in range(100):
        t = random_box(r)
        cands = [random_box(r) for _ in range(100)]
        vals = np.array([nwd(x, t, c) for x in cands])
        t_s = BBox(t.cx * scale, t.cy * scale, t.w * scale, t.h * scale)
        vals_s = np.array(
            [nwd(BBox(x.cx * scale, x.cy * scale, x.w * scale, x.h * scale), t_s, c * scale) for x in cands]
        )
        np.testing.assert_allclose(vals_s, vals, rtol=1e-9)
        np.testing.assert_array_equal(np.argsort(vals), np.argsort(vals_s))


def test_sqrt_scaling_of_distance():
    r = np.random.default_rng(3)
    for _ in range(100):
        a, b = random_box(r), random_box(r)
        s = 4.0
        d1 = math.sqrt(wasserstein2_boxes(a, b))
        d2 = math.sqrt(
            wasserstein2_boxes(
                BBox(a.cx * s, a.cy * s, a.w * s, a.h * s),
                BBox(b.cx * s, b.cy * s, b.w * s, b.h * s),
            )
        )
        assert d2 == pytest.approx(s * d1, rel=1e-12)


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------


def fd_center_grad(f, pred: BBox, eps=1e-6):
    """Finite-difference gradient of f(pred) wrt the box center."""
    gx = (
        f(BBox(pred.cx + eps, pred.cy, pred.w, pred.h))
        - f(BBox(pred.cx - eps, pred.cy, pred.w, pred.h))
    ) / (2 * eps)
    gy = (
        f(BBox(pred.cx, pred.cy + eps, pred.w, pred.h))
        - f(BBox(pred.cx, pred.cy - eps, pred.w, pred.h))
    ) / (2 * eps)
    return gx, gy


def test_gradient_dichotomy_on_disjoint_pairs():
    r = np.random.default_rng(512)
    c = 8.0
    for _ in range(100):
        pred, gt = disjoint_pair(r)
        gx_i, gy_i = fd_center_grad(lambda p: 1.0 - iou(p, gt), pred)
        gx_w, gy_w = fd_center_grad(lambda p: nwd_loss(p, gt, c), pred)
        assert abs(gx_i) <= 1e-12 and abs(gy_i) <= 1e-12
        assert math.hypot(gx_w, gy_w) > 1e-6


def test_nwd_loss_gradient_matches_finite_differences():
    r = np.random.default_rng(21)
    for _ in range(30):
        a, b = random_box(r), random_box(r)
        pt = T.Tensor(np.array([[a.cx, a.cy, a.w, a.h]]))
        gt = np.array([[b.cx, b.cy, b.w, b.h]])
        err = T.grad_check(lambda p: T.mean(nwd_loss_t(p, gt, 8.0)), [pt], eps=1e-6)
        assert err < 1e-6


def test_ciou_loss_gradient_matches_finite_differences():
    r = np.random.default_rng(22)
    for _ in range(30):
        a, b = random_box(r), random_box(r)
        pt = T.Tensor(np.array([[a.cx, a.cy, a.w, a.h]]))
        gt = np.array([[b.cx, b.cy, b.w, b.h]])
        err = T.grad_check(lambda p: T.mean(ciou_loss_t(p, gt, eps=1e-9)), [pt], eps=1e-6)
        assert err < 1e-4


def test_tensor_variants_match_scalar_values():
    r = np.random.default_rng(13)
    boxes_a = [random_box(r) for _ in range(64)]
    boxes_b = [random_box(r) for _ in range(64)]
    pa = T.Tensor(np.array([[x.cx, x.cy, x.w, x.h] for x in boxes_a]))
    pb = np.array([[x.cx, x.cy, x.w, x.h] for x in boxes_b])
    got_iou = iou_t(pa, pb).data
    got_nwd = nwd_t(pa, pb, 5.0).data
    got_ciou = ciou_loss_t(pa, pb).data
    for i, (a, b) in enumerate(zip(boxes_a, boxes_b)):
        assert got_iou[i] == pytest.approx(iou(a, b), rel=1e-12, abs=1e-12)
        assert got_nwd[i] == pytest.approx(nwd(a, b, 5.0), rel=1e-12)
        assert got_ciou[i] == pytest.approx(ciou_loss(a, b), rel=1e-9, abs=1e-12)


def test_nwd_t_coincident_boxes_finite_gradient():
    box = np.array([[4.0, 4.0, 2.0, 2.0]])
    pt = T.Tensor(box.copy(), requires_grad=True)
    loss = T.mean(nwd_loss_t(pt, box.copy(), 2.0))
    loss.backward()
    assert np.all(np.isfinite(pt.grad))
    np.testing.assert_array_equal(pt.grad, 0.0)  # sub-gradient at the cusp


def test_iou_batch_matches_scalar():
    r = np.random.default_rng(8)
    a = [random_box(r) for _ in range(7)]
    b = [random_box(r) for _ in range(5)]
    mat = iou_batch(
        np.array([[x.cx, x.cy, x.w, x.h] for x in a]),
        np.array([[x.cx, x.cy, x.w, x.h] for x in b]),
    )
    for i, ba in enumerate(a):
        for j, bb in enumerate(b):
            assert mat[i, j] == pytest.approx(iou(ba, bb), rel=1e-12, abs=1e-12)


def test_box_regression_loss_boundaries_and_bounds():
    r = np.random.default_rng(17)
    pairs = []
    for _ in range(16):
        p, g = random_box(r), random_box(r)
        pairs.append((p, g, iou(p, g)))
    c = 6.0
    l_nwd = sum(nwd_loss(p, g, c) for p, g, _ in pairs) / len(pairs)
    l_iou = sum(1 - iv for _, _, iv in pairs) / len(pairs)
    assert box_regression_loss(pairs, LossConfig(c, iou_ratio=1.0)) == pytest.approx(l_iou, rel=1e-12)
    assert box_regression_loss(pairs, LossConfig(c, iou_ratio=0.0)) == pytest.approx(l_nwd, rel=1e-12)
    for ratio in (0.0, 0.25, 0.5, 0.75, 1.0):
        val = box_regression_loss(pairs, LossConfig(c, iou_ratio=ratio))
        assert min(l_nwd, l_iou) - 1e-12 <= val <= max(l_nwd, l_iou) + 1e-12


def test_box_regression_loss_trivials():
    a = BBox(3, 3, 2, 2)
    assert box_regression_loss([], LossConfig(2.0)) == 0.0
    assert box_regression_loss([(a, a, 1.0)], LossConfig(2.0, 0.5)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError, match="iou value"):
        box_regression_loss([(a, a, 1.5)], LossConfig(2.0))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(c=0.0)
    with pytest.raises(ValueError):
        LossConfig(c=2.0, iou_ratio=1.5)


def test_box_regression_loss_t_matches_scalar_composition():
    r = np.random.default_rng(23)
    boxes_p = [random_box(r) for _ in range(12)]
    boxes_g = [random_box(r) for _ in range(12)]
    cfg = LossConfig(c=5.0, iou_ratio=0.3)
    pt = T.Tensor(np.array([[x.cx, x.cy, x.w, x.h] for x in boxes_p]))
    gt = np.array([[x.cx, x.cy, x.w, x.h] for x in boxes_g])
    got = box_regression_loss_t(pt, gt, cfg).item()
    pairs = [(p, g, iou(p, g)) for p, g in zip(boxes_p, boxes_g)]
    assert got == pytest.approx(box_regression_loss(pairs, cfg), rel=1e-12)
