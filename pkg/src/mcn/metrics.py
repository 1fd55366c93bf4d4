"""Task metrics: detection mAP (greedy matching, all-point interpolation),
segmentation mIoU, and pose PCK@alpha."""

from dataclasses import dataclass, field

import numpy as np

COCO_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))
DEFAULT_PCK_ALPHA = 0.2


@dataclass
class MetricReport:
    seg_miou: float = None
    det_map: float = None
    det_map_50: float = None
    pose_pck: float = None
    per_class_ap: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def as_dict(self):
        return {"seg_miou": self.seg_miou, "det_map": self.det_map,
                "det_map_50": self.det_map_50, "pose_pck": self.pose_pck,
                "per_class_ap": self.per_class_ap, "counts": self.counts}


def box_iou(a, b):
    """IoU of two (cx, cy, w, h) boxes."""
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def _match_greedy(preds, gts, iou_threshold):
    """Score-ordered greedy matching; returns a TP/FP flag per prediction.

    ``preds`` is a list of (score, box); ``gts`` a list of boxes. Each
    prediction takes the highest-IoU unmatched ground truth at or above
    the threshold.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i][0])
    matched = [False] * len(gts)
    flags = []
    for i in order:
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            iou = box_iou(preds[i][1], gt)
            if iou >= iou_threshold and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            matched[best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags, matched


def average_precision(preds, gts, iou_threshold=0.5):
    """AP under all-point PR interpolation for one class.

    ``preds``: list of (score, (cx,cy,w,h)), ``gts``: list of boxes.
    """
    if not gts:
        return 0.0 if preds else 1.0
    if not preds:
        return 0.0
    flags, _ = _match_greedy(preds, gts, iou_threshold)
    tp = np.cumsum(flags)
    fp = np.cumsum([not f for f in flags])
    recall = tp / len(gts)
    precision = tp / (tp + fp)
    # monotone envelope from the right, integrate over recall steps
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def mean_ap(preds_by_image, gts_by_image, class_ids=None,
            thresholds=COCO_THRESHOLDS):
    """Mean AP over classes present in the ground truth and over IoU
    thresholds. Predictions/GT are per-image lists of Detection-like
    records and (class, cx, cy, w, h) tuples respectively.

    Returns (mAP, per-class AP at the first threshold).
    """
    gt_classes = sorted({g[0] for gts in gts_by_image for g in gts})
    if class_ids is not None:
        gt_classes = [c for c in gt_classes if c in class_ids]
    if not gt_classes:
        return None, {}

    per_class = {}
    aps = []
    for thr in thresholds:
        for cls in gt_classes:
            ap_imgs = _class_ap(preds_by_image, gts_by_image, cls, thr)
            aps.append(ap_imgs)
            if thr == thresholds[0]:
                per_class[cls] = ap_imgs
    return float(np.mean(aps)), per_class


def _class_ap(preds_by_image, gts_by_image, cls, thr):
    # pool detections across images; greedy matching stays per-image
    records = []  # (score, image, box)
    gt_total = 0
    gts_per_img = []
    for img, (preds, gts) in enumerate(zip(preds_by_image, gts_by_image)):
        boxes = [g[1:] for g in gts if g[0] == cls]
        gts_per_img.append(boxes)
        gt_total += len(boxes)
        for d in preds:
            if d.class_id == cls:
                records.append((d.score, img, (d.cx, d.cy, d.w, d.h)))
    if gt_total == 0:
        return 0.0 if records else 1.0
    if not records:
        return 0.0
    records.sort(key=lambda r: -r[0])
    matched = [np.zeros(len(b), bool) for b in gts_per_img]
    flags = []
    for score, img, box in records:
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts_per_img[img]):
            if matched[img][j]:
                continue
            iou = box_iou(box, gt)
            if iou >= thr and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            matched[img][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    tp = np.cumsum(flags)
    fp = np.cumsum([not f for f in flags])
    recall = tp / gt_total
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def seg_miou(pred, gt, num_classes):
    """Mean IoU over the classes present in gt or pred (background is
    class 0 and participates; classes absent from both sides are skipped)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    ious = []
    for c in range(num_classes + 1):
        p = pred == c
        g = gt == c
        union = (p | g).sum()
        if union == 0:
            continue
        ious.append((p & g).sum() / union)
    return float(np.mean(ious)) if ious else None


def pose_pck(pose_preds, gt_people, alpha=DEFAULT_PCK_ALPHA):
    """PCK over visible ground-truth joints.

    ``gt_people``: list of (box, [(x, y, visible)]); predictions are
    matched to people by parent-box greedy IoU at 0.5; a joint is correct
    within alpha*sqrt(gt box area). Unmatched people score all-incorrect.
    """
    total_visible = sum(sum(1 for j in joints if j[2]) for _, joints in gt_people)
    if total_visible == 0:
        return None
    matched = [False] * len(gt_people)
    correct = 0
    for pose in sorted(pose_preds, key=lambda p: -p.detection.score):
        box = (pose.detection.cx, pose.detection.cy,
               pose.detection.w, pose.detection.h)
        best, best_j = 0.0, -1
        for j, (gt_box, _) in enumerate(gt_people):
            if matched[j]:
                continue
            iou = box_iou(box, gt_box)
            if iou >= 0.5 and iou > best:
                best, best_j = iou, j
        if best_j < 0:
            continue
        matched[best_j] = True
        gt_box, joints = gt_people[best_j]
        tol = alpha * np.sqrt(gt_box[2] * gt_box[3])
        for ji, (gx, gy, vis) in enumerate(joints):
            if not vis or ji >= len(pose.joints):
                continue
            px, py = pose.joints[ji]
            if np.hypot(px - gx, py - gy) <= tol:
                correct += 1
    return correct / total_visible
