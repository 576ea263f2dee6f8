"""Detection and uncertainty-quality metrics.

All reported values are percentages. Ranking metrics return ``None`` when
undefined (e.g. a single-class input).
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decode import boundary_slack, grow_box


def iou(a, b):
    """Intersection over union of two ``(x, y, w, h)`` boxes."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0 or aw * ah <= 0 or bw * bh <= 0:
        return 0.0
    return inter / union


def intersection_area(a, b):
    iw = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    return iw * ih


@dataclass
class MatchResult:
    """Greedy matching outcome; indices refer to the caller's input lists."""

    pairs: list = field(default_factory=list)
    false_positives: list = field(default_factory=list)
    false_negatives: list = field(default_factory=list)
    ious: list = field(default_factory=list)


def match(det_boxes, det_scores, gt_boxes, iou_threshold=0.5):
    """Greedy matching by descending score.

    Each detection claims the highest-IoU still-unclaimed ground truth whose
    IoU is at least ``iou_threshold``. Score ties keep input order.
    """
    order = np.argsort(-np.asarray(det_scores, dtype=float), kind="stable")
    claimed = [False] * len(gt_boxes)
    result = MatchResult()
    for d in order:
        best, best_iou = -1, iou_threshold
        for g, gbox in enumerate(gt_boxes):
            if claimed[g]:
                continue
            v = iou(det_boxes[d], gbox)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = g, v
        if best >= 0:
            claimed[best] = True
            result.pairs.append((int(d), best))
            result.ious.append(best_iou)
        else:
            result.false_positives.append(int(d))
    result.false_negatives = [g for g, c in enumerate(claimed) if not c]
    return result


# ---------------------------------------------------------------------------
# ranking metrics


def _ranked_counts(scores, labels):
    """Cumulative (tp, fp) at each distinct score threshold, high to low."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    tp = np.cumsum(lab)
    fp = np.cumsum(~lab)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    return tp[last], fp[last]


def precision_recall_curve(scores, labels):
    """Precision/recall at each distinct score threshold (``score >= t``)."""
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0:
        return np.array([]), np.array([])
    tp, fp = _ranked_counts(scores, labels)
    n_pos = labels.sum()
    precision = tp / (tp + fp)
    recall = tp / n_pos if n_pos else np.zeros_like(tp, dtype=float)
    return precision, recall


def area_under_pr(scores, labels):
    """Step-wise PR area: sum over thresholds of (R_k - R_{k-1}) * P_k, x100."""
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0 or not labels.any():
        return None
    precision, recall = precision_recall_curve(scores, labels)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision) * 100)


def aupr_in(scores, correct):
    """PR area with correct detections as positives, ranked by score."""
    correct = np.asarray(correct, dtype=bool)
    if correct.all() or not correct.any():
        return None
    return area_under_pr(scores, correct)


def aupr_out(scores, correct):
    """PR area with incorrect detections as positives, ranked by 1 - score."""
    correct = np.asarray(correct, dtype=bool)
    if correct.all() or not correct.any():
        return None
    return area_under_pr(1.0 - np.asarray(scores, dtype=float), ~correct)


def roc_curve(scores, labels):
    labels = np.asarray(labels, dtype=bool)
    tp, fp = _ranked_counts(scores, labels)
    tpr = np.r_[0.0, tp / labels.sum()]
    fpr = np.r_[0.0, fp / (~labels).sum()]
    return fpr, tpr


def auroc(scores, correct):
    """Trapezoidal area under TPR vs FPR, x100."""
    correct = np.asarray(correct, dtype=bool)
    if correct.all() or not correct.any():
        return None
    fpr, tpr = roc_curve(scores, correct)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2) * 100)


def reliability_bins(scores, correct, n_bins=10):
    """Equal-width score bins: list of (low, high, count, mean_score, accuracy)."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    scores = np.asarray(scores, dtype=float)
    correct = np.asarray(correct, dtype=float)
    idx = np.minimum((scores * n_bins).astype(int), n_bins - 1)
    rows = []
    for b in range(n_bins):
        sel = idx == b
        n = int(sel.sum())
        rows.append((b / n_bins, (b + 1) / n_bins, n,
                     float(scores[sel].mean()) if n else 0.0,
                     float(correct[sel].mean()) if n else 0.0))
    return rows


def ece(scores, correct, n_bins=10):
    """Expected calibration error over equal-width bins, x100."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        return 0.0
    if scores.min() < 0 or scores.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    total = scores.size
    return float(sum(n / total * abs(mean - acc)
                     for _, _, n, mean, acc in reliability_bins(scores, correct, n_bins) if n)
                 * 100)


def uncertainty_error(uncertainty, correct):
    """Minimum over thresholds of the mean of the two rejection error rates, x100.

    A detection is accepted when ``u <= tau``. Candidate thresholds are every
    observed value, the midpoints between them, and a value below the
    minimum (reject everything). If only one outcome class is present only
    its error rate is minimised.
    """
    u = np.asarray(uncertainty, dtype=float)
    correct = np.asarray(correct, dtype=bool)
    if u.size == 0:
        return 0.0
    vals = np.unique(u)
    taus = np.r_[vals[0] - 1.0, vals, (vals[:-1] + vals[1:]) / 2]
    uc, ui = u[correct], u[~correct]
    rej_correct = (uc[None, :] > taus[:, None]).mean(axis=1) if uc.size else None
    acc_incorrect = (ui[None, :] <= taus[:, None]).mean(axis=1) if ui.size else None
    if rej_correct is None:
        err = acc_incorrect
    elif acc_incorrect is None:
        err = rej_correct
    else:
        err = 0.5 * rej_correct + 0.5 * acc_incorrect
    return float(err.min() * 100)


def average_precision(scores, tp_flags, n_gt, eleven_point=False):
    """VOC-style AP from ranked detections, x100.

    ``tp_flags`` marks which detections were matched. Uses the monotone
    precision envelope with all-point interpolation, or 11-point sampling.
    Returns ``None`` when there are no ground truths.
    """
    if n_gt == 0:
        return None
    scores = np.asarray(scores, dtype=float)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if scores.size == 0:
        return 0.0
    tp, fp = _ranked_counts(scores, tp_flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            p = precision[recall >= t]
            ap += (p.max() if p.size else 0.0) / 11
        return float(ap * 100)
    mrec = np.r_[0.0, recall, 1.0]
    mpre = np.r_[0.0, precision, 0.0]
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]) * 100)


# ---------------------------------------------------------------------------
# location / size uncertainty quality


def calibration_error(pairs, signal="location"):
    """Mean |predicted - measured| normalised uncertainty over matched pairs, x100.

    ``pairs`` is a sequence of ``(Detection, gt_box)``. Returns the average of
    the two axis values (x/y for location, w/h for dims).
    """
    if not pairs:
        return None
    a, b = [], []
    for det, gt in pairs:
        gx, gy, gw, gh = gt
        if signal == "location":
            a.append(abs(det.u_x - abs(det.cx - (gx + gw / 2)) / det.w))
            b.append(abs(det.u_y - abs(det.cy - (gy + gh / 2)) / det.h))
        elif signal == "dims":
            a.append(abs(det.u_w - abs(det.w - gw) / det.w))
            b.append(abs(det.u_h - abs(det.h - gh) / det.h))
        else:
            raise ValueError(f"unknown signal {signal!r}")
    return float((np.mean(a) + np.mean(b)) / 2 * 100)


def _contains(outer, inner, tol=1e-9):
    return (inner[0] >= outer[0] - tol and inner[1] >= outer[1] - tol
            and inner[0] + inner[2] <= outer[0] + outer[2] + tol
            and inner[1] + inner[3] <= outer[1] + outer[3] + tol)


def ubq(gt_box, inner_box, outer_box):
    """Boundary quality of one matched box: ``(UBQ, BR, IBQ, OBQ)`` as fractions."""
    if min(inner_box[2], inner_box[3], outer_box[2], outer_box[3]) < 0:
        raise ValueError("boxes must have non-negative size")
    if not _contains(outer_box, inner_box):
        raise ValueError(f"inner box {inner_box} is not inside outer box {outer_box}")
    a_in = inner_box[2] * inner_box[3]
    a_gt = gt_box[2] * gt_box[3]
    ibq = intersection_area(gt_box, inner_box) / a_in if a_in > 0 else 0.0
    obq = intersection_area(gt_box, outer_box) / a_gt if a_gt > 0 else 0.0
    rw = inner_box[2] / outer_box[2] if outer_box[2] > 0 else 0.0
    rh = inner_box[3] / outer_box[3] if outer_box[3] > 0 else 0.0
    br = 0.5 * (rw + rh)
    return 0.5 * (ibq + obq) * br, br, ibq, obq


def signal_boundaries(det, signal, k=1.0):
    """Inner/outer boxes from location-only or dims-only uncertainty."""
    if signal == "location":
        sx, sy = boundary_slack(det.w, det.h, u_x=det.u_x, u_y=det.u_y, k=k)
    elif signal == "dims":
        sx, sy = boundary_slack(det.w, det.h, u_w=det.u_w, u_h=det.u_h, k=k)
    else:
        raise ValueError(f"unknown signal {signal!r}")
    return grow_box(det.box, -sx, -sy), grow_box(det.box, sx, sy)


def boundary_quality(pairs, signal="location", k=1.0):
    """Mean UBQ and BR (x100) over matched pairs for one uncertainty signal."""
    if not pairs:
        return None, None
    vals = [ubq(gt, *signal_boundaries(det, signal, k)) for det, gt in pairs]
    return (float(np.mean([v[0] for v in vals]) * 100),
            float(np.mean([v[1] for v in vals]) * 100))


# ---------------------------------------------------------------------------
# full evaluation


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    n_bins: int = 10
    boundary_scale: float = 1.0
    eleven_point: bool = False

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class EvalReport:
    ap: float | None
    ap_per_class: dict
    aupr_in: float | None
    aupr_out: float | None
    auroc: float | None
    ece: float
    ue: float
    ce_loc: float | None
    ce_dims: float | None
    ubq_loc: float | None
    br_loc: float | None
    ubq_dims: float | None
    br_dims: float | None
    n_detections: int
    n_ground_truths: int
    n_true_positives: int
    n_false_positives: int
    n_false_negatives: int
    mean_u_obj: float | None
    pr_curve: list = field(default_factory=list)
    reliability: list = field(default_factory=list)
    roc: list = field(default_factory=list)

    def summary(self):
        """Scalar fields only (no curves)."""
        out = asdict(self)
        for key in ("pr_curve", "reliability", "roc"):
            out.pop(key)
        out["ap_per_class"] = {str(k): v for k, v in self.ap_per_class.items()}
        return out

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        _write_csv(out_dir / "pr_curve.csv", ("recall", "precision"), self.pr_curve)
        _write_csv(out_dir / "reliability.csv",
                   ("bin_low", "bin_high", "count", "mean_score", "accuracy"), self.reliability)
        _write_csv(out_dir / "roc.csv", ("fpr", "tpr"), self.roc)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def match_dataset(detections, ground_truths, iou_threshold=0.5):
    """Per-image, per-class greedy matching.

    ``detections`` maps image_id -> list of Detection; ``ground_truths`` maps
    image_id -> ``(boxes, classes)``. Returns ``(records, pairs, n_gt)``:
    ``(class, score, matched, Detection)`` for every detection, the matched
    ``(Detection, gt_box)`` pairs, and ground-truth counts per class.
    """
    records = []
    pairs = []
    n_gt = {}
    for image_id in sorted(set(ground_truths) | set(detections)):
        boxes, classes = ground_truths.get(image_id, (np.zeros((0, 4)), np.zeros(0, int)))
        dets = detections.get(image_id, [])
        classes = np.asarray(classes, dtype=int)
        for c in sorted(set(classes.tolist()) | {d.cls for d in dets}):
            gt_idx = np.nonzero(classes == c)[0]
            n_gt[c] = n_gt.get(c, 0) + len(gt_idx)
            cdets = [d for d in dets if d.cls == c]
            gt_boxes = [tuple(boxes[g]) for g in gt_idx]
            m = match([d.box for d in cdets], [d.score for d in cdets], gt_boxes, iou_threshold)
            matched = dict(m.pairs)
            for k, det in enumerate(cdets):
                records.append((c, det.score, k in matched, det))
                if k in matched:
                    pairs.append((det, gt_boxes[matched[k]]))
    return records, pairs, n_gt


def evaluate(detections, ground_truths, config=None):
    """Run matching once, then every metric on the result.

    ``ap`` is the mean of per-class APs over classes with ground truth.
    Objectness metrics treat "matched" as correct; unmatched ground truths
    only enter the false-negative count.
    """
    config = config or EvalConfig()
    records, pairs, n_gt = match_dataset(detections, ground_truths, config.iou_threshold)
    scores = np.array([r[1] for r in records], dtype=float)
    correct = np.array([r[2] for r in records], dtype=bool)
    classes = np.array([r[0] for r in records], dtype=int)
    ap_per_class = {}
    for c in sorted(n_gt):
        if n_gt[c] == 0:
            continue
        sel = classes == c
        ap_per_class[c] = average_precision(scores[sel], correct[sel], n_gt[c], config.eleven_point)
    ap = float(np.mean(list(ap_per_class.values()))) if ap_per_class else None

    total_gt = sum(n_gt.values())
    pr_curve = []
    if scores.size and total_gt:
        order = np.argsort(-scores, kind="stable")
        tp = np.cumsum(correct[order])
        fp = np.cumsum(~correct[order])
        pr_curve = list(zip((tp / total_gt).tolist(), (tp / (tp + fp)).tolist()))
    roc = []
    if correct.any() and not correct.all():
        fpr, tpr = roc_curve(scores, correct)
        roc = list(zip(fpr.tolist(), tpr.tolist()))
    ubq_loc, br_loc = boundary_quality(pairs, "location", config.boundary_scale)
    ubq_dims, br_dims = boundary_quality(pairs, "dims", config.boundary_scale)
    return EvalReport(
        ap=ap,
        ap_per_class=ap_per_class,
        aupr_in=aupr_in(scores, correct),
        aupr_out=aupr_out(scores, correct),
        auroc=auroc(scores, correct),
        ece=ece(scores, correct, config.n_bins),
        ue=uncertainty_error(1.0 - scores, correct),
        ce_loc=calibration_error(pairs, "location"),
        ce_dims=calibration_error(pairs, "dims"),
        ubq_loc=ubq_loc,
        br_loc=br_loc,
        ubq_dims=ubq_dims,
        br_dims=br_dims,
        n_detections=int(scores.size),
        n_ground_truths=int(total_gt),
        n_true_positives=int(correct.sum()),
        n_false_positives=int((~correct).sum()),
        n_false_negatives=int(total_gt - correct.sum()),
        mean_u_obj=float(np.mean(1.0 - scores)) if scores.size else None,
        pr_curve=pr_curve,
        reliability=reliability_bins(scores, correct, config.n_bins),
        roc=roc,
    )
