"""Toy-scale training: target assignment, loss assembly, SGD, gradient audits.

Assignment is deliberately static (center cell plus an anchor shape-ratio
filter) instead of the dynamic schemes production detectors use: every run is
then a pure function of (dataset, config, seed) and each positive slot can be
traced by hand. A ground truth may claim slots at several scales when more
than one anchor passes the ratio test.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import tensor as T
from .boxes import LossConfig, box_regression_loss_t
from .metrics import evaluate, nms
from .model import DEFAULT_ANCHORS, STRIDES, decode, validate_anchors

_MODES = ("iou_only", "nwd_only", "mixed")
_RATIO_LIMIT = 4.0


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; seed fixes batch order and every stochastic choice."""

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    loss_mode: str = "mixed"
    iou_ratio: float = 0.5
    nwd_c: float = 8.0
    box_weight: float = 0.05
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    obj_pos_weight: float = 20.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.loss_mode not in _MODES:
            raise ValueError(f"loss_mode must be one of {_MODES}")
        if not 0.0 <= self.iou_ratio <= 1.0:
            raise ValueError(f"iou_ratio must be in [0, 1], got {self.iou_ratio}")
        if not self.nwd_c > 0:
            raise ValueError("nwd_c must be positive")
        if min(self.box_weight, self.obj_weight, self.cls_weight) < 0:
            raise ValueError("loss term weights must be non-negative")
        if self.obj_pos_weight <= 0:
            raise ValueError("obj_pos_weight must be positive")

    def box_mix_ratio(self) -> float:
        """IoU share of the box term: 1 for iou_only, 0 for nwd_only."""
        return {"iou_only": 1.0, "nwd_only": 0.0, "mixed": self.iou_ratio}[self.loss_mode]


@dataclasses.dataclass
class ScaleTargets:
    """Assignment for one image at one scale.

    obj is the (anchors, gh, gw) objectness target; the parallel arrays list
    the positive slots with their pixel-space boxes and class ids.
    """

    obj: np.ndarray
    anchor_idx: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray


@dataclasses.dataclass
class BatchTargets(ScaleTargets):
    """ScaleTargets merged over a batch; obj is (n, anchors, gh, gw)."""

    batch_idx: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0, np.int64))


def assign_targets(gts, anchors, grid_dims, strides) -> tuple:
    """Map ground truths to (scale, anchor, cell) slots for one image.

    A gt claims the cell containing its center at every scale whose anchor
    passes max(w/aw, aw/w, h/ah, ah/h) < 4; first gt to reach a slot keeps it.
    Returns (per-scale ScaleTargets, count of sub-pixel gts skipped).
    """
    anchors = validate_anchors(anchors)
    if not (len(anchors) == len(grid_dims) == len(strides)):
        raise ValueError("anchors, grid_dims and strides must align per scale")
    n_anchors = len(anchors[0])
    objs = [np.zeros((n_anchors, gh, gw), dtype=np.float32) for gh, gw in grid_dims]
    slots = [[] for _ in grid_dims]
    skipped = 0
    for g in gts:
        b = g.bbox
        if b.w < 1.0 or b.h < 1.0:
            skipped += 1
            continue
        for si, (anc, stride, (gh, gw)) in enumerate(zip(anchors, strides, grid_dims)):
            gx = min(int(b.cx // stride), gw - 1)
            gy = min(int(b.cy // stride), gh - 1)
            for ai, (aw, ah) in enumerate(anc):
                ratio = max(b.w / aw, aw / b.w, b.h / ah, ah / b.h)
                if ratio < _RATIO_LIMIT and objs[si][ai, gy, gx] == 0.0:
                    objs[si][ai, gy, gx] = 1.0
                    slots[si].append((ai, gy, gx, (b.cx, b.cy, b.w, b.h), g.class_id))
    out = []
    for obj, rows in zip(objs, slots):
        out.append(
            ScaleTargets(
                obj=obj,
                anchor_idx=np.array([r[0] for r in rows], dtype=np.int64),
                gy=np.array([r[1] for r in rows], dtype=np.int64),
                gx=np.array([r[2] for r in rows], dtype=np.int64),
                boxes=np.array([r[3] for r in rows], dtype=np.float64).reshape(-1, 4),
                classes=np.array([r[4] for r in rows], dtype=np.int64),
            )
        )
    return out, skipped


def assign_batch(batch_gts, anchors, grid_dims, strides) -> tuple:
    """Assign every image in a batch and merge per scale; adds batch_idx."""
    per_image = []
    skipped = 0
    for gts in batch_gts:
        ts, sk = assign_targets(gts, anchors, grid_dims, strides)
        per_image.append(ts)
        skipped += sk
    merged = []
    for si in range(len(grid_dims)):
        parts = [ts[si] for ts in per_image]
        merged.append(
            BatchTargets(
                obj=np.stack([p.obj for p in parts]),
                anchor_idx=np.concatenate([p.anchor_idx for p in parts]),
                gy=np.concatenate([p.gy for p in parts]),
                gx=np.concatenate([p.gx for p in parts]),
                boxes=np.concatenate([p.boxes for p in parts]),
                classes=np.concatenate([p.classes for p in parts]),
                batch_idx=np.concatenate(
                    [np.full(len(p.anchor_idx), bi, np.int64) for bi, p in enumerate(parts)]
                ),
            )
        )
    return merged, skipped


def total_loss(raws, targets, cfg: TrainConfig, anchors=DEFAULT_ANCHORS, strides=STRIDES):
    """Assemble objectness + class + box losses from raw per-scale predictions.

    The box decode matches model.decode exactly: cx = (2 sig(tx) - 0.5 +
    col) * stride and w = (2 sig(tw))^2 * anchor_w, so training optimizes the
    boxes inference will produce. Box and class terms average over positive
    slots per scale and sum across scales; objectness covers every slot.
    Returns (scalar loss Tensor, float breakdown dict).
    """
    anchors = validate_anchors(anchors)
    if len(raws) != len(targets):
        raise T.ShapeError(f"{len(raws)} prediction scales but {len(targets)} target scales")
    lcfg = LossConfig(c=cfg.nwd_c, iou_ratio=cfg.box_mix_ratio())
    obj_terms, box_terms, cls_terms = [], [], []
    n_pos = 0
    for raw, tgt, anc, stride in zip(raws, targets, anchors, strides):
        raw = T.as_tensor(raw)
        n, ch, gh, gw = raw.shape
        a = len(anc)
        per = ch // a
        k = per - 5
        if tgt.obj.shape != (n, a, gh, gw):
            raise T.ShapeError(f"objectness target {tgt.obj.shape} mismatches ({n},{a},{gh},{gw})")
        dt = raw.data.dtype
        r = raw.reshape(n, a, per, gh, gw)
        obj_bce = T.bce_with_logits(r[:, :, 4], tgt.obj.astype(dt))
        if cfg.obj_pos_weight != 1.0:
            # Positive slots are rare (a handful per thousands of cells); an
            # unweighted mean lets the negatives drown them out.
            w = np.where(tgt.obj > 0, cfg.obj_pos_weight, 1.0).astype(dt)
            obj_bce = obj_bce * w
        obj_terms.append(T.mean(obj_bce))
        m = len(tgt.anchor_idx)
        if m == 0:
            continue
        n_pos += m
        cell = tgt.gy * gw + tgt.gx
        base = tgt.batch_idx * a + tgt.anchor_idx
        idx = base * (gh * gw) + cell
        sx = T.sigmoid(T.take_flat(r[:, :, 0], idx))
        sy = T.sigmoid(T.take_flat(r[:, :, 1], idx))
        sw = T.sigmoid(T.take_flat(r[:, :, 2], idx))
        sh = T.sigmoid(T.take_flat(r[:, :, 3], idx))
        px = (sx * 2.0 - 0.5 + tgt.gx.astype(dt)) * float(stride)
        py = (sy * 2.0 - 0.5 + tgt.gy.astype(dt)) * float(stride)
        anc_arr = np.asarray(anc, dtype=dt)
        pw = (sw * 2.0) ** 2.0 * anc_arr[tgt.anchor_idx, 0]
        ph = (sh * 2.0) ** 2.0 * anc_arr[tgt.anchor_idx, 1]
        pred = T.stack_cols([px, py, pw, ph])
        box_terms.append(box_regression_loss_t(pred, tgt.boxes.astype(dt), lcfg))
        kidx = ((base[:, None] * k + np.arange(k)[None, :]) * (gh * gw) + cell[:, None]).ravel()
        onehot = np.zeros((m, k), dtype=dt)
        onehot[np.arange(m), tgt.classes] = 1.0
        cls_terms.append(T.mean(T.bce_with_logits(T.take_flat(r[:, :, 5:], kidx), onehot.ravel())))

    def fold(terms):
        if not terms:
            return T.Tensor(np.zeros((), dtype=np.float32))
        out = terms[0]
        for t in terms[1:]:
            out = out + t
        return out

    obj, box, cls = fold(obj_terms), fold(box_terms), fold(cls_terms)
    total = box * cfg.box_weight + obj * cfg.obj_weight + cls * cfg.cls_weight
    breakdown = {
        "total": float(total.data),
        "box": float(box.data),
        "obj": float(obj.data),
        "cls": float(cls.data),
        "n_pos": n_pos,
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params, grads, lr: float, momentum: float, state: dict) -> dict:
    """Heavy-ball update v <- momentum v + g; p <- p - lr v, keyed by name.

    params is a list of (name, Tensor); grads aligns with it (None entries
    mean the parameter did not participate and are skipped).
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if len(params) != len(grads):
        raise ValueError("params and grads must align")
    for (name, p), g in zip(params, grads):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        v = state.get(name)
        v = g if v is None or momentum == 0.0 else momentum * v + g
        state[name] = v
        p.data -= lr * v
    return state


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------


def batch_images(samples) -> np.ndarray:
    """Stack sample images into (n, 3, s, s); grayscale replicates channels."""
    mats = []
    for s in samples:
        arr = s.image.data
        mats.append(np.repeat(arr, 3, axis=0) if arr.shape[0] == 1 else arr)
    return np.stack(mats)


def _grid_dims(img_size: int, strides) -> list:
    return [(img_size // st, img_size // st) for st in strides]


def predict(model, samples, anchors=None, strides=STRIDES,
            conf_thresh: float = 0.05, nms_iou: float = 0.5, batch_size: int = 8) -> list:
    """Run the model over samples and return NMS-filtered detections per image."""
    anchors = validate_anchors(anchors if anchors is not None else model.cfg.anchors)
    model.eval()
    preds = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            x = batch_images(chunk)
            img_size = x.shape[2]
            raws = model(x)
            dets = decode(raws, anchors, strides, conf_thresh=conf_thresh, img_size=img_size)
            preds.extend(nms(d, nms_iou) for d in dets)
    return preds


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(model, train_samples, val_samples, cfg: TrainConfig,
          anchors=None, strides=STRIDES, eval_conf: float = 0.25) -> list:
    """Optimize model on train_samples; returns one log record per epoch.

    Deterministic given (samples, cfg, initial weights): batch order comes
    from cfg.seed alone. Raises on empty training data and on non-finite
    loss, naming the epoch and step.
    """
    if not train_samples:
        raise ValueError("training split is empty")
    anchors = validate_anchors(anchors if anchors is not None else model.cfg.anchors)
    img_size = train_samples[0].image_size[0]
    grid_dims = _grid_dims(img_size, strides)
    images = batch_images(train_samples)
    assignments = [
        assign_targets(s.gts, anchors, grid_dims, strides)[0] for s in train_samples
    ]
    rng = np.random.default_rng(cfg.seed)
    params = list(model.named_parameters())
    state: dict = {}
    log = []
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(train_samples))
        sums = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
        n_batches = 0
        for step, lo in enumerate(range(0, len(order), cfg.batch_size)):
            pick = order[lo : lo + cfg.batch_size]
            x = images[pick]
            targets = _merge_assignments([assignments[i] for i in pick])
            model.zero_grad()
            loss, parts = total_loss(model(x), targets, cfg, anchors, strides)
            if not np.isfinite(parts["total"]):
                raise FloatingPointError(
                    f"training diverged at epoch {epoch} step {step}: loss {parts['total']}"
                )
            loss.backward()
            sgd_step(params, [p.grad for _, p in params], cfg.learning_rate, cfg.momentum, state)
            for key in sums:
                sums[key] += parts[key]
            n_batches += 1
        record = {"epoch": epoch}
        for key in sums:
            record[f"loss_{key}" if key != "total" else "loss_total"] = sums[key] / n_batches
        if val_samples:
            preds = predict(model, val_samples, anchors, strides, batch_size=cfg.batch_size)
            report = evaluate(
                preds,
                [s.gts for s in val_samples],
                conf_thresh=eval_conf,
                n_classes=model.cfg.n_classes,
            )
            record["val_map50"] = report.map50
        log.append(record)
    return log


def _merge_assignments(per_image) -> list:
    merged = []
    for si in range(len(per_image[0])):
        parts = [ts[si] for ts in per_image]
        merged.append(
            BatchTargets(
                obj=np.stack([p.obj for p in parts]),
                anchor_idx=np.concatenate([p.anchor_idx for p in parts]),
                gy=np.concatenate([p.gy for p in parts]),
                gx=np.concatenate([p.gx for p in parts]),
                boxes=np.concatenate([p.boxes for p in parts]),
                classes=np.concatenate([p.classes for p in parts]),
                batch_idx=np.concatenate(
                    [np.full(len(p.anchor_idx), bi, np.int64) for bi, p in enumerate(parts)]
                ),
            )
        )
    return merged


# ---------------------------------------------------------------------------
# gradient audit
# ---------------------------------------------------------------------------


def convert_dtype(model, dtype) -> None:
    """Cast every parameter and buffer in place (f64 for audits)."""
    for _, p in model.named_parameters():
        p.data = np.ascontiguousarray(p.data, dtype=dtype)
    stack = [model]
    while stack:
        m = stack.pop()
        for name, buf in list(m._buffers.items()):
            m.register_buffer(name, np.ascontiguousarray(buf, dtype=dtype))
        stack.extend(m._modules.values())


def gradient_audit(model, samples, cfg: TrainConfig, sample_size: int = 20,
                   seed: int = 0, eps: float = 1e-6, anchors=None, strides=STRIDES) -> dict:
    """Compare analytic gradients of total_loss against central differences.

    Requires float64 parameters. Checks sample_size parameter entries chosen
    by seed; the seed fixes both the sample and the report. Running-stat
    buffers are snapshotted and restored, so the audit leaves the model as it
    found it up to parameter round-off.
    """
    for name, p in model.named_parameters():
        if p.data.dtype != np.float64:
            raise ValueError(f"audit requires float64 parameters; {name} is {p.data.dtype}")
    anchors = validate_anchors(anchors if anchors is not None else model.cfg.anchors)
    x = batch_images(samples).astype(np.float64)
    grid_dims = _grid_dims(x.shape[2], strides)
    targets, _ = assign_batch([s.gts for s in samples], anchors, grid_dims, strides)

    saved_buffers = [(buf, buf.copy()) for _, buf in model.named_buffers()]
    model.train()

    def loss_value() -> float:
        with T.no_grad():
            return total_loss(model(x), targets, cfg, anchors, strides)[1]["total"]

    model.zero_grad()
    loss, _ = total_loss(model(x), targets, cfg, anchors, strides)
    loss.backward()
    grads = {name: (p.grad.copy() if p.grad is not None else None)
             for name, p in model.named_parameters()}

    params = list(model.named_parameters())
    sizes = np.array([p.size for _, p in params])
    offsets = np.cumsum(sizes)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(int(offsets[-1]), size=min(sample_size, int(offsets[-1])), replace=False)
    entries = []
    for flat in sorted(int(c) for c in chosen):
        pi = int(np.searchsorted(offsets, flat, side="right"))
        local = flat - (0 if pi == 0 else int(offsets[pi - 1]))
        name, p = params[pi]
        orig = p.data.flat[local]
        p.data.flat[local] = orig + eps
        plus = loss_value()
        p.data.flat[local] = orig - eps
        minus = loss_value()
        p.data.flat[local] = orig
        fd = (plus - minus) / (2.0 * eps)
        g = grads[name]
        analytic = 0.0 if g is None else float(g.flat[local])
        rel = abs(analytic - fd) / max(1.0, abs(fd))
        entries.append({"param": name, "index": local, "analytic": analytic,
                        "numeric": fd, "rel_error": rel})
    for buf, copy in saved_buffers:
        buf[...] = copy
    worst = max(entries, key=lambda e: e["rel_error"])
    return {
        "max_rel_error": worst["rel_error"],
        "worst_param": worst["param"],
        "n_checked": len(entries),
        "entries": entries,
    }
