"""Box similarity: IoU, complete-IoU loss, Gaussian box modeling, 2-Wasserstein
distance (general trace form and its closed-form simplification), normalized
Wasserstein similarity, and the mixed regression loss.

Scalar functions operate on BBox values and are the reference surface for
tooling; *_t functions operate on (n, 4) autodiff tensors with columns
(cx, cy, w, h) and drive training. iou_batch is the vectorized numpy path
used by NMS and evaluation matching.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from istdyolo import tensor as T


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in center form, absolute pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2,
            self.cy - self.h / 2,
            self.cx + self.w / 2,
            self.cy + self.h / 2,
        )

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class GaussianBox:
    """2-D Gaussian model of a box: mean at the center, diagonal covariance
    with standard deviations w/2 and h/2."""

    mean: tuple[float, float]
    cov: np.ndarray  # (2, 2), symmetric positive definite


@dataclass(frozen=True)
class LossConfig:
    """c normalizes Wasserstein distances (pixels, dataset-dependent);
    iou_ratio in [0, 1] mixes the IoU term against the Wasserstein term."""

    c: float
    iou_ratio: float = 0.5

    def __post_init__(self):
        if not (self.c > 0):
            raise ValueError(f"normalization constant must be > 0, got {self.c}")
        if not (0.0 <= self.iou_ratio <= 1.0):
            raise ValueError(f"iou_ratio must be in [0, 1], got {self.iou_ratio}")


# ---------------------------------------------------------------------------
# scalar reference surface
# ---------------------------------------------------------------------------


def iou(a: BBox, b: BBox) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def ciou_loss(pred: BBox, gt: BBox, eps: float = 1e-9) -> float:
    """Complete-IoU loss: 1 - IoU + center_dist^2 / enclosing_diag^2 + alpha v.

    v penalizes aspect-ratio mismatch; alpha = v / (1 - IoU + v) weights it by
    how far the overlap already is from perfect. Zero for identical boxes.
    """
    i = iou(pred, gt)
    ax1, ay1, ax2, ay2 = pred.corners()
    bx1, by1, bx2, by2 = gt.corners()
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch + eps
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    v = (4.0 / math.pi**2) * (math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)) ** 2
    alpha = v / (1.0 - i + v + eps)
    return 1.0 - i + rho2 / c2 + alpha * v


def gauss_from_box(b: BBox) -> GaussianBox:
    return GaussianBox(
        mean=(b.cx, b.cy),
        cov=np.array([[b.w * b.w / 4.0, 0.0], [0.0, b.h * b.h / 4.0]], dtype=np.float64),
    )


def _sqrtm_spd2(m: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root of a 2x2 SPD matrix, closed form:
    sqrt(M) = (M + sqrt(det) I) / sqrt(trace + 2 sqrt(det))."""
    det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    s = math.sqrt(max(det, 0.0))
    t = m[0, 0] + m[1, 1] + 2.0 * s
    if t <= 0.0:
        return np.zeros((2, 2))
    return (m + s * np.eye(2)) / math.sqrt(t)


def _require_spd2(m: np.ndarray, name: str):
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (2, 2):
        raise ValueError(f"{name} covariance must be 2x2, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-9, atol=1e-12):
        raise ValueError(f"{name} covariance must be symmetric")
    # 2x2 SPD iff trace > 0 and det > 0
    if np.trace(m) <= 0 or np.linalg.det(m) <= 0:
        raise ValueError(f"{name} covariance must be positive definite")
    return m


def wasserstein2_general(p: GaussianBox, q: GaussianBox) -> float:
    """Squared 2-Wasserstein distance between Gaussians, trace form:

        ||m1 - m2||^2 + Tr(S1 + S2 - 2 (S2^{1/2} S1 S2^{1/2})^{1/2})
    """
    s1 = _require_spd2(p.cov, "first")
    s2 = _require_spd2(q.cov, "second")
    r2 = _sqrtm_spd2(s2)
    cross = _sqrtm_spd2(r2 @ s1 @ r2)
    dmu = (p.mean[0] - q.mean[0]) ** 2 + (p.mean[1] - q.mean[1]) ** 2
    return float(dmu + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))


def wasserstein2_boxes(a: BBox, b: BBox) -> float:
    """Closed-form squared 2-Wasserstein distance for box Gaussians: the
    squared Euclidean distance between parameter vectors (cx, cy, w/2, h/2).
    Equal to the general trace form because both covariances are diagonal.
    """
    return (
        (a.cx - b.cx) ** 2
        + (a.cy - b.cy) ** 2
        + (a.w - b.w) ** 2 / 4.0
        + (a.h - b.h) ** 2 / 4.0
    )


def nwd(a: BBox, b: BBox, c: float) -> float:
    """Normalized Wasserstein similarity exp(-sqrt(W2^2)/c), in (0, 1]."""
    if not (c > 0):
        raise ValueError(f"normalization constant must be > 0, got {c}")
    return math.exp(-math.sqrt(wasserstein2_boxes(a, b)) / c)


def nwd_loss(pred: BBox, gt: BBox, c: float) -> float:
    """1 - nwd: smooth in all box parameters, nonzero slope even for disjoint
    or fully nested pairs where IoU sits on a plateau."""
    return 1.0 - nwd(pred, gt, c)


def box_regression_loss(pairs, cfg: LossConfig) -> float:
    """Mixed regression loss over (pred, gt, iou_value) triples:

        (1 - iou_ratio) * mean(1 - nwd) + iou_ratio * mean(1 - iou_value)

    Each term is averaged over pairs independently. Empty input gives 0.
    """
    pairs = list(pairs)
    if not pairs:
        return 0.0
    for _, _, iv in pairs:
        if not (0.0 <= iv <= 1.0):
            raise ValueError(f"iou value must be in [0, 1], got {iv}")
    mean_nwd_loss = sum(nwd_loss(p, g, cfg.c) for p, g, _ in pairs) / len(pairs)
    mean_iou_loss = sum(1.0 - iv for _, _, iv in pairs) / len(pairs)
    return (1.0 - cfg.iou_ratio) * mean_nwd_loss + cfg.iou_ratio * mean_iou_loss


# ---------------------------------------------------------------------------
# vectorized numpy path (NMS / matching)
# ---------------------------------------------------------------------------


def iou_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix for (n, 4) and (m, 4) center-form box arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    ax1, ay1 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax2, ay2 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx1, by1 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx2, by2 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], bx2) - np.maximum(ax1[:, None], bx1), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2) - np.maximum(ay1[:, None], by1), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + b[:, 2] * b[:, 3] - inter
    return inter / union


# ---------------------------------------------------------------------------
# autodiff path (training)
# ---------------------------------------------------------------------------


def _split_cols(boxes: T.Tensor):
    return boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]


def iou_t(pred: T.Tensor, gt) -> T.Tensor:
    """Per-row IoU of two (n, 4) center-form box tensors.

    Gradient is exactly zero wherever the boxes are disjoint (the overlap
    clamp kills it), which is the plateau the Wasserstein term exists to fix.
    """
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    pcx, pcy, pw, ph = _split_cols(pred)
    gcx, gcy, gw, gh = _split_cols(gt)
    iw = T.clamp_min(
        T.minimum(pcx + pw * 0.5, gcx + gw * 0.5) - T.maximum(pcx - pw * 0.5, gcx - gw * 0.5),
        0.0,
    )
    ih = T.clamp_min(
        T.minimum(pcy + ph * 0.5, gcy + gh * 0.5) - T.maximum(pcy - ph * 0.5, gcy - gh * 0.5),
        0.0,
    )
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    return inter / union


def ciou_loss_t(pred: T.Tensor, gt, eps: float = 1e-9) -> T.Tensor:
    """Per-row complete-IoU loss of (n, 4) box tensors.

    alpha is kept on the tape (not detached) so analytic gradients equal the
    true derivative of the written formula and finite-difference audits pass.
    """
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    pcx, pcy, pw, ph = _split_cols(pred)
    gcx, gcy, gw, gh = _split_cols(gt)
    i = iou_t(pred, gt)
    cw = T.maximum(pcx + pw * 0.5, gcx + gw * 0.5) - T.minimum(pcx - pw * 0.5, gcx - gw * 0.5)
    ch = T.maximum(pcy + ph * 0.5, gcy + gh * 0.5) - T.minimum(pcy - ph * 0.5, gcy - gh * 0.5)
    c2 = cw * cw + ch * ch + eps
    dx = pcx - gcx
    dy = pcy - gcy
    rho2 = dx * dx + dy * dy
    datan = T.arctan(gw / gh) - T.arctan(pw / ph)
    v = datan * datan * (4.0 / math.pi**2)
    alpha = v / (1.0 - i + v + eps)
    return 1.0 - i + rho2 / c2 + alpha * v


def nwd_t(pred: T.Tensor, gt, c: float) -> T.Tensor:
    """Per-row normalized Wasserstein similarity of (n, 4) box tensors.

    The sqrt at exactly coincident boxes uses the engine's zero sub-gradient.
    """
    if not (c > 0):
        raise ValueError(f"normalization constant must be > 0, got {c}")
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    pcx, pcy, pw, ph = _split_cols(pred)
    gcx, gcy, gw, gh = _split_cols(gt)
    dcx = pcx - gcx
    dcy = pcy - gcy
    dw = (pw - gw) * 0.5
    dh = (ph - gh) * 0.5
    w2 = dcx * dcx + dcy * dcy + dw * dw + dh * dh
    return T.exp(T.sqrt(w2) * (-1.0 / c))


def nwd_loss_t(pred: T.Tensor, gt, c: float) -> T.Tensor:
    return 1.0 - nwd_t(pred, gt, c)


def box_regression_loss_t(pred: T.Tensor, gt, cfg: LossConfig) -> T.Tensor:
    """Mixed regression loss on (n, 4) tensors; scalar output."""
    loss_w = T.mean(nwd_loss_t(pred, gt, cfg.c))
    loss_i = T.mean(1.0 - iou_t(pred, gt))
    return loss_w * (1.0 - cfg.iou_ratio) + loss_i * cfg.iou_ratio
