"""Slow, independent reference implementations used to validate the fast paths.

Everything here is written in the most literal way possible (nested loops,
brute-force rasterization, textbook formulas) and shares no code with the
package under test.
"""

import math

import numpy as np


def conv2d_ref(x, w, b=None, stride=1, padding=0):
    """Nested-loop dense cross-correlation. x: (n,c,h,w), w: (co,ci,k,k)."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for oi in range(h_out):
                for oj in range(w_out):
                    acc = 0.0
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[ni, ci, oi * stride + ki, oj * stride + kj]
                                    * w[co, ci, ki, kj]
                                )
                    if b is not None:
                        acc += b[co]
                    out[ni, co, oi, oj] = acc
    return out


def depthwise_conv2d_ref(x, w, stride=1, padding=0):
    """Nested-loop per-channel cross-correlation. w: (c,1,k,k)."""
    n, c, h, wd = x.shape
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, c, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for oi in range(h_out):
                for oj in range(w_out):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            acc += xp[ni, ci, oi * stride + ki, oj * stride + kj] * w[ci, 0, ki, kj]
                    out[ni, ci, oi, oj] = acc
    return out


def maxpool2d_ref(x, k, stride):
    n, c, h, w = x.shape
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1
    out = np.zeros((n, c, h_out, w_out), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for oi in range(h_out):
                for oj in range(w_out):
                    out[ni, ci, oi, oj] = x[
                        ni, ci, oi * stride : oi * stride + k, oj * stride : oj * stride + k
                    ].max()
    return out


def batchnorm2d_ref(x, gamma, beta, eps):
    """Training-mode normalization with population statistics."""
    out = np.zeros_like(x)
    for ci in range(x.shape[1]):
        vals = x[:, ci].reshape(-1)
        mu = vals.mean()
        var = ((vals - mu) ** 2).mean()
        out[:, ci] = gamma[ci] * (x[:, ci] - mu) / math.sqrt(var + eps) + beta[ci]
    return out


def iou_raster_ref(box_a, box_b, cells_per_unit=64):
    """IoU by counting rasterized cells; boxes are (cx, cy, w, h).

    Exact when every coordinate is a multiple of 1/cells_per_unit, which the
    tests guarantee by sampling on a coarse grid.
    """
    def bounds(b):
        cx, cy, w, h = b
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2

    ax1, ay1, ax2, ay2 = bounds(box_a)
    bx1, by1, bx2, by2 = bounds(box_b)
    lo_x = min(ax1, bx1)
    lo_y = min(ay1, by1)
    hi_x = max(ax2, bx2)
    hi_y = max(ay2, by2)
    nx = int(round((hi_x - lo_x) * cells_per_unit))
    ny = int(round((hi_y - lo_y) * cells_per_unit))
    inter = union = 0
    for i in range(nx):
        x = lo_x + (i + 0.5) / cells_per_unit
        for j in range(ny):
            y = lo_y + (j + 0.5) / cells_per_unit
            in_a = ax1 < x < ax2 and ay1 < y < ay2
            in_b = bx1 < x < bx2 and by1 < y < by2
            if in_a and in_b:
                inter += 1
            if in_a or in_b:
                union += 1
    return inter / union if union else 0.0


def iou_scalar_ref(box_a, box_b):
    """Closed-form IoU on (cx, cy, w, h) via corner arithmetic."""
    ax1, ay1 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax2, ay2 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx1, by1 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx2, by2 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return inter / union if union > 0 else 0.0


def ciou_penalty_ref(box_a, box_b, eps=1e-9):
    """Scalar complete-IoU: iou - center_dist^2/diag^2 - alpha*v."""
    iou = iou_scalar_ref(box_a, box_b)
    ax1, ay1 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    ax2, ay2 = box_a[0] + box_a[2] / 2, box_a[1] + box_a[3] / 2
    bx1, by1 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    bx2, by2 = box_b[0] + box_b[2] / 2, box_b[1] + box_b[3] / 2
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch + eps
    rho2 = (box_a[0] - box_b[0]) ** 2 + (box_a[1] - box_b[1]) ** 2
    v = (4.0 / math.pi**2) * (
        math.atan(box_b[2] / box_b[3]) - math.atan(box_a[2] / box_a[3])
    ) ** 2
    alpha = v / (1.0 - iou + v + eps)
    return iou - rho2 / c2 - alpha * v


def wasserstein_sq_ref(box_a, box_b):
    """Squared 2-Wasserstein distance between the boxes' Gaussian models,
    via the general trace formula with an explicit 2x2 matrix square root."""
    mu_a = np.array(box_a[:2], dtype=np.float64)
    mu_b = np.array(box_b[:2], dtype=np.float64)
    sig_a = np.diag([box_a[2] ** 2 / 4.0, box_a[3] ** 2 / 4.0])
    sig_b = np.diag([box_b[2] ** 2 / 4.0, box_b[3] ** 2 / 4.0])

    def sqrtm_2x2(m):
        # SPD 2x2 square root: (M + sqrt(det) I) / sqrt(trace + 2 sqrt(det))
        d = math.sqrt(max(np.linalg.det(m), 0.0))
        t = np.trace(m) + 2.0 * d
        if t <= 0.0:
            return np.zeros((2, 2))
        return (m + d * np.eye(2)) / math.sqrt(t)

    ra = sqrtm_2x2(sig_a)
    cross = sqrtm_2x2(ra @ sig_b @ ra)
    dist_mu = float(np.sum((mu_a - mu_b) ** 2))
    return dist_mu + float(np.trace(sig_a + sig_b - 2.0 * cross))


def nwd_ref(box_a, box_b, c):
    return math.exp(-math.sqrt(wasserstein_sq_ref(box_a, box_b)) / c)


def simam_weights_ref(channel_2d, lam):
    """Per-pixel attention weights for one channel: sigmoid(1/e*).

    e*(t) = 4 (sigma^2 + lam) / ((t - mu)^2 + 2 sigma^2 + 2 lam), with mu and
    sigma^2 the population statistics over all pixels of the channel
    (the target pixel included).
    """
    vals = np.asarray(channel_2d, dtype=np.float64)
    mu = vals.mean()
    var = ((vals - mu) ** 2).mean()
    e = 4.0 * (var + lam) / ((vals - mu) ** 2 + 2.0 * var + 2.0 * lam)
    return 1.0 / (1.0 + np.exp(-1.0 / e))


def fd_grad(fn, arrays, eps=1e-6):
    """Central-difference gradients of scalar fn(*arrays) w.r.t. every entry."""
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(*arrays)
            flat[i] = orig - eps
            fm = fn(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * eps)
    return grads
