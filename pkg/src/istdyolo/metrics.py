"""Detection quality measurement: NMS, VOC-style greedy matching,
all-point average precision, and a confusion matrix with an explicit
background row (false positives) and column (misses).

Determinism: every sort uses a total key over (score, class, geometry), so
reports are bit-identical under any permutation of the input images.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from istdyolo.boxes import BBox, iou_batch, nwd
from istdyolo.model import Detection


@dataclass(frozen=True)
class GroundTruth:
    bbox: BBox
    class_id: int


@dataclass(frozen=True)
class EvalReport:
    precision: float
    recall: float
    per_class_ap: dict[int, float]
    map50: float
    confusion: np.ndarray  # (K+1, K+1), row-normalized, last index = background
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "precision": self.precision,
                "recall": self.recall,
                "map50": self.map50,
                "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
                "confusion": [[float(v) for v in row] for row in self.confusion],
                "metadata": self.metadata,
            },
            indent=2,
            sort_keys=True,
        )


def _boxes_array(items) -> np.ndarray:
    return np.array([[x.bbox.cx, x.bbox.cy, x.bbox.w, x.bbox.h] for x in items], dtype=np.float64)


def _det_sort_key(d: Detection):
    return (-d.score, d.class_id, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h)


def _similarity(dets, gts, metric: str, nwd_c: float) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    if metric == "iou":
        return iou_batch(_boxes_array(dets), _boxes_array(gts))
    if metric == "nwd":
        return np.array([[nwd(d.bbox, g.bbox, nwd_c) for g in gts] for d in dets])
    raise ValueError(f"match metric must be 'iou' or 'nwd', got {metric!r}")


def nms(dets: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-class suppression: keep the best-scoring box, drop others
    overlapping it with IoU strictly above the threshold."""
    if not (0.0 <= iou_thresh <= 1.0):
        raise ValueError(f"iou_thresh must be in [0, 1], got {iou_thresh}")
    kept: list[Detection] = []
    by_class: dict[int, list[Detection]] = {}
    for d in dets:
        by_class.setdefault(d.class_id, []).append(d)
    for cid in sorted(by_class):
        group = sorted(by_class[cid], key=_det_sort_key)
        boxes = _boxes_array(group)
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            if i + 1 < len(group):
                overlaps = iou_batch(boxes[i : i + 1], boxes[i + 1 :])[0]
                alive[i + 1 :] &= ~(overlaps > iou_thresh)
    return sorted(kept, key=_det_sort_key)


def match_detections(
    dets: list[Detection],
    gts: list[GroundTruth],
    iou_thresh: float,
    metric: str = "iou",
    nwd_c: float = 8.0,
) -> tuple[list[bool], list[bool]]:
    """Score-greedy one-to-one matching within one image.

    dets must already be sorted by descending score. Each detection claims
    the unclaimed same-class ground truth with the highest similarity at or
    above the threshold. Returns (per-det TP flags, per-gt matched flags).
    """
    scores = [d.score for d in dets]
    if scores != sorted(scores, reverse=True):
        raise ValueError("detections must be sorted by descending score")
    sim = _similarity(dets, gts, metric, nwd_c)
    tp = [False] * len(dets)
    matched = [False] * len(gts)
    for i, d in enumerate(dets):
        best_j, best_sim = -1, -1.0
        for j, g in enumerate(gts):
            if matched[j] or g.class_id != d.class_id:
                continue
            if sim[i, j] >= iou_thresh and sim[i, j] > best_sim:
                best_j, best_sim = j, sim[i, j]  # ties keep the lowest index
        if best_j >= 0:
            tp[i] = True
            matched[best_j] = True
    return tp, matched


def average_precision(tp_flags, n_gt: int) -> float:
    """All-point (continuous) AP: area under the right-continuous precision
    envelope over recall. tp_flags must be in descending-score order.

    n_gt == 0 with no detections returns NaN (class excluded from means);
    with detections it returns 0.
    """
    tp = np.asarray(list(tp_flags), dtype=np.float64)
    if n_gt < 0:
        raise ValueError(f"n_gt must be >= 0, got {n_gt}")
    if n_gt == 0:
        return float("nan") if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    changes = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def evaluate(
    predictions: list[list[Detection]],
    gts: list[list[GroundTruth]],
    conf_thresh: float,
    iou_thresh: float = 0.5,
    n_classes: int | None = None,
    metric: str = "iou",
    nwd_c: float = 8.0,
) -> EvalReport:
    """Dataset-level report.

    Average precision integrates over every supplied detection; precision,
    recall, and the confusion matrix are evaluated at conf_thresh. The
    confusion matrix matches class-agnostically so cross-class hits land in
    off-diagonal cells; unmatched ground truths fall in the background
    column, unmatched detections in the background row. Rows with mass are
    normalized to sum to 1.
    """
    if len(predictions) != len(gts):
        raise ValueError(f"got {len(predictions)} prediction lists vs {len(gts)} truth lists")
    if not gts:
        raise ValueError("cannot evaluate an empty dataset")
    if n_classes is None:
        seen = [g.class_id for per in gts for g in per] + [
            d.class_id for per in predictions for d in per
        ]
        n_classes = max(seen) + 1 if seen else 1

    # -- AP over all detections -------------------------------------------
    records = []  # (det, tp) pairs across images
    for dets, truths in zip(predictions, gts):
        dets_sorted = sorted(dets, key=_det_sort_key)
        tp, _ = match_detections(dets_sorted, truths, iou_thresh, metric, nwd_c)
        records.extend(zip(dets_sorted, tp))
    records.sort(key=lambda r: (_det_sort_key(r[0]), not r[1]))
    gt_per_class = np.zeros(n_classes, dtype=np.int64)
    for truths in gts:
        for g in truths:
            gt_per_class[g.class_id] += 1
    per_class_ap: dict[int, float] = {}
    for cid in range(n_classes):
        flags = [tp for d, tp in records if d.class_id == cid]
        ap = average_precision(flags, int(gt_per_class[cid]))
        if not np.isnan(ap):
            per_class_ap[cid] = ap
    with_gt = [cid for cid in range(n_classes) if gt_per_class[cid] > 0]
    map50 = float(np.mean([per_class_ap[c] for c in with_gt])) if with_gt else 0.0

    # -- P / R and confusion at the operating threshold --------------------
    total_tp = total_fp = 0
    n_gt_total = int(gt_per_class.sum())
    confusion = np.zeros((n_classes + 1, n_classes + 1), dtype=np.float64)
    bg = n_classes
    for dets, truths in zip(predictions, gts):
        strong = sorted((d for d in dets if d.score >= conf_thresh), key=_det_sort_key)
        tp, _ = match_detections(strong, truths, iou_thresh, metric, nwd_c)
        total_tp += sum(tp)
        total_fp += len(tp) - sum(tp)
        # class-agnostic pass for the confusion matrix
        sim = _similarity(strong, truths, metric, nwd_c)
        claimed = [False] * len(truths)
        for i, d in enumerate(strong):
            best_j, best = -1, iou_thresh
            for j in range(len(truths)):
                if not claimed[j]:
                    if sim[i, j] >= iou_thresh and (best_j < 0 or sim[i, j] > best):
                        best_j, best = j, sim[i, j]
            if best_j >= 0:
                claimed[best_j] = True
                confusion[truths[best_j].class_id, d.class_id] += 1
            else:
                confusion[bg, d.class_id] += 1
        for j, g in enumerate(truths):
            if not claimed[j]:
                confusion[g.class_id, bg] += 1
    row_mass = confusion.sum(axis=1, keepdims=True)
    confusion = np.divide(confusion, row_mass, out=np.zeros_like(confusion), where=row_mass > 0)

    precision = total_tp / (total_tp + total_fp) if (total_tp + total_fp) else 0.0
    recall = total_tp / n_gt_total if n_gt_total else 0.0
    return EvalReport(
        precision=float(precision),
        recall=float(recall),
        per_class_ap=per_class_ap,
        map50=map50,
        confusion=confusion,
        metadata={
            "conf_thresh": conf_thresh,
            "iou_thresh": iou_thresh,
            "interpolation": "all-point",
            "match_metric": metric,
        },
    )
