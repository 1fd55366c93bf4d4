"""Encode annotations into heatmap/regression targets and decode head
outputs back into detections, poses and segmentation maps."""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

DEFAULT_MIN_OVERLAP = 0.7
DEFAULT_TOP_K = 100
DEFAULT_SCORE_THRESHOLD = 0.3
DEFAULT_KEYPOINT_THRESHOLD = 0.25
KEYPOINT_SNAP_EXPAND = 1.5
REGRESSION_FALLBACK_CONFIDENCE = 0.1


@dataclass
class SceneAnnotation:
    """Ground truth for one image: boxes, per-person keypoints, class map.

    Boxes are (class_id, cx, cy, w, h) in input pixels; keypoints map a box
    index to a list of (x, y, visible) joints; seg_map is an HxW class-id
    array with 0 as background.
    """
    height: int
    width: int
    boxes: list  # [(class_id, cx, cy, w, h)]
    keypoints: dict  # box index -> [(x, y, visible)]
    seg_map: np.ndarray

    def validate(self, num_classes):
        for ci, (cls, cx, cy, w, h) in enumerate(self.boxes):
            if not (1 <= cls <= num_classes):
                raise ValueError(f"box {ci}: class id {cls} out of range")
            if not (0 <= cx < self.width and 0 <= cy < self.height):
                raise ValueError(f"box {ci}: center outside image")
        if self.seg_map.shape != (self.height, self.width):
            raise ValueError("seg_map shape does not match image size")
        if self.seg_map.max(initial=0) > num_classes:
            raise ValueError("seg_map contains out-of-range class ids")


@dataclass
class EncodedTargets:
    center_gt: np.ndarray          # [C,h,w]
    size_gt: np.ndarray            # [2,h,w], feature pixels
    offset_gt: np.ndarray          # [2,h,w]
    reg_mask: np.ndarray           # [h,w] bool
    keypoint_gt: np.ndarray        # [K,h,w]
    keypoint_offset_gt: np.ndarray  # [2,h,w]
    keypoint_mask: np.ndarray      # [h,w] bool
    joint_regression_gt: np.ndarray  # [2K,h,w]
    joint_mask: np.ndarray         # [K,h,w] bool
    seg_gt: np.ndarray             # [S,S] class ids
    collisions: int = 0


@dataclass
class Detection:
    class_id: int
    score: float
    cx: float
    cy: float
    w: float
    h: float

    def as_dict(self):
        return {"class": self.class_id, "score": self.score,
                "cx": self.cx, "cy": self.cy, "w": self.w, "h": self.h}


@dataclass
class PoseInstance:
    detection: Detection
    joints: list = field(default_factory=list)  # [(x, y)]
    confidences: list = field(default_factory=list)

    def as_dict(self):
        return {"detection": self.detection.as_dict(),
                "joints": [list(j) for j in self.joints],
                "confidences": self.confidences}


def gaussian_radius(box_h, box_w, min_overlap=DEFAULT_MIN_OVERLAP):
    """Gaussian radius (feature pixels) keeping >= min_overlap IoU with the
    box under the three corner-shift overlap cases."""
    if box_h <= 0 or box_w <= 0:
        raise ValueError("box dimensions must be positive")
    if not 0 < min_overlap < 1:
        raise ValueError("min_overlap must be in (0, 1)")

    a1 = 1.0
    b1 = box_h + box_w
    c1 = box_w * box_h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - np.sqrt(b1 * b1 - 4 * a1 * c1)) / (2 * a1)

    a2 = 4.0
    b2 = 2 * (box_h + box_w)
    c2 = (1 - min_overlap) * box_w * box_h
    r2 = (b2 - np.sqrt(b2 * b2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2 * min_overlap * (box_h + box_w)
    c3 = (min_overlap - 1) * box_w * box_h
    r3 = (-b3 + np.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)

    return max(1, int(np.floor(min(r1, r2, r3))))


def render_gaussian(heatmap, center, radius):
    """Max-combine an unnormalized gaussian patch (peak exactly 1.0) into
    ``heatmap`` at integer feature-pixel ``center``; mutates in place."""
    h, w = heatmap.shape
    cx, cy = int(center[0]), int(center[1])
    if not (0 <= cx < w and 0 <= cy < h):
        raise ValueError("center outside heatmap")
    r = int(radius)
    sigma = r / 3.0
    y, x = np.ogrid[-r:r + 1, -r:r + 1]
    patch = np.exp(-(x * x + y * y) / (2 * sigma * sigma))
    patch[r, r] = 1.0

    top, bottom = min(cy, r), min(h - cy - 1, r)
    left, right = min(cx, r), min(w - cx - 1, r)
    view = heatmap[cy - top:cy + bottom + 1, cx - left:cx + right + 1]
    np.maximum(view, patch[r - top:r + bottom + 1, r - left:r + right + 1],
               out=view)


def _nearest_resample_ids(id_map, out_size):
    h, w = id_map.shape
    ys = np.minimum((np.floor((np.arange(out_size) + 0.5) * h / out_size)).astype(int), h - 1)
    xs = np.minimum((np.floor((np.arange(out_size) + 0.5) * w / out_size)).astype(int), w - 1)
    return id_map[np.ix_(ys, xs)]


def encode_targets(ann, cfg):
    """Turn a SceneAnnotation into training targets for the configured heads.

    ``cfg`` is a net HeadConfig; targets are produced for every configured
    task. Same-cell collisions of one class keep the larger box and are
    counted on the result.
    """
    stride = cfg.output_stride
    h = ann.height // stride
    w = ann.width // stride
    c = cfg.num_classes
    k = cfg.num_keypoints
    dt = np.float32

    out = EncodedTargets(
        center_gt=np.zeros((c, h, w), dt),
        size_gt=np.zeros((2, h, w), dt),
        offset_gt=np.zeros((2, h, w), dt),
        reg_mask=np.zeros((h, w), bool),
        keypoint_gt=np.zeros((k, h, w), dt),
        keypoint_offset_gt=np.zeros((2, h, w), dt),
        keypoint_mask=np.zeros((h, w), bool),
        joint_regression_gt=np.zeros((2 * k, h, w), dt),
        joint_mask=np.zeros((k, h, w), bool),
        seg_gt=_nearest_resample_ids(ann.seg_map, cfg.seg_resolution)
        if "segmentation" in cfg.tasks else np.zeros((cfg.seg_resolution,) * 2, np.int64),
    )

    occupied = {}  # (class, cell) -> box area
    for bi, (cls, cx, cy, bw, bh) in enumerate(ann.boxes):
        if cls > c:
            raise ValueError(f"class id {cls} exceeds configured classes {c}")
        fx, fy = cx / stride, cy / stride
        ix = min(int(fx), w - 1)
        iy = min(int(fy), h - 1)
        radius = gaussian_radius(bh / stride, bw / stride)
        render_gaussian(out.center_gt[cls - 1], (ix, iy), radius)

        key = (cls, iy, ix)
        area = bw * bh
        if key in occupied:
            out.collisions += 1
            if area <= occupied[key]:
                continue
        occupied[key] = area
        out.size_gt[:, iy, ix] = (bw / stride, bh / stride)
        out.offset_gt[:, iy, ix] = (fx - ix, fy - iy)
        out.reg_mask[iy, ix] = True

        if "pose" in cfg.tasks and bi in ann.keypoints:
            joints = ann.keypoints[bi]
            for ji, (jx, jy, vis) in enumerate(joints[:k]):
                if not vis:
                    continue
                gx, gy = jx / stride, jy / stride
                jix = min(int(gx), w - 1)
                jiy = min(int(gy), h - 1)
                render_gaussian(out.keypoint_gt[ji], (jix, jiy),
                                max(1, radius // 2))
                out.keypoint_offset_gt[:, jiy, jix] = (gx - jix, gy - jiy)
                out.keypoint_mask[jiy, jix] = True
                out.joint_regression_gt[2 * ji, iy, ix] = gx - fx
                out.joint_regression_gt[2 * ji + 1, iy, ix] = gy - fy
                out.joint_mask[ji, iy, ix] = True

    return out


def stack_targets(targets):
    """Stack per-scene EncodedTargets into batched arrays (leading N axis)."""
    def cat(name):
        return np.stack([getattr(t, name) for t in targets])

    return EncodedTargets(
        center_gt=cat("center_gt"), size_gt=cat("size_gt"),
        offset_gt=cat("offset_gt"), reg_mask=cat("reg_mask"),
        keypoint_gt=cat("keypoint_gt"),
        keypoint_offset_gt=cat("keypoint_offset_gt"),
        keypoint_mask=cat("keypoint_mask"),
        joint_regression_gt=cat("joint_regression_gt"),
        joint_mask=cat("joint_mask"), seg_gt=cat("seg_gt"),
        collisions=sum(t.collisions for t in targets),
    )


def _peak_mask(heatmap_nchw):
    """Cells equal to their 3x3 neighborhood maximum."""
    pooled = T.max_pool2d_3x3_same(T.Tensor(heatmap_nchw)).data
    return heatmap_nchw >= pooled


def decode_detections(outputs, top_k=DEFAULT_TOP_K,
                      score_threshold=DEFAULT_SCORE_THRESHOLD, stride=4,
                      image_index=0):
    """Peak-based box decoding: 3x3-max cells, top-k by score, threshold.

    Ties in score break by ascending (class, row, column) so output order
    is bit-reproducible.
    """
    if outputs.center_heatmap is None:
        raise ValueError("detection outputs missing")
    heat = outputs.center_heatmap.data[image_index]
    size = outputs.size_map.data[image_index]
    off = outputs.offset_map.data[image_index]

    peaks = _peak_mask(heat[None])[0]
    cls_i, ys, xs = np.nonzero(peaks)
    scores = heat[cls_i, ys, xs]
    # descending score, then ascending (class, row, col)
    order = np.lexsort((xs, ys, cls_i, -scores))
    order = order[:top_k]
    keep = scores[order] >= score_threshold
    order = order[keep]

    dets = []
    for i in order:
        c, y, x = int(cls_i[i]), int(ys[i]), int(xs[i])
        cx = (x + float(off[0, y, x])) * stride
        cy = (y + float(off[1, y, x])) * stride
        bw = float(size[0, y, x]) * stride
        bh = float(size[1, y, x]) * stride
        if bw <= 0 or bh <= 0:
            continue
        dets.append(Detection(c + 1, float(scores[i]), cx, cy, bw, bh))
    return dets


def decode_poses(outputs, detections, stride=4,
                 keypoint_threshold=DEFAULT_KEYPOINT_THRESHOLD,
                 image_index=0):
    """Instantiate poses from person detections: center-relative joint
    regression, snapped to nearby keypoint-heatmap peaks when available."""
    if outputs.keypoint_heatmap is None:
        raise ValueError("pose outputs missing")
    kheat = outputs.keypoint_heatmap.data[image_index]
    koff = outputs.keypoint_offset.data[image_index]
    jreg = outputs.joint_regression.data[image_index]
    k, h, w = kheat.shape
    peaks = _peak_mask(kheat[None])[0]

    poses = []
    for det in detections:
        fx, fy = det.cx / stride, det.cy / stride
        ix = min(max(int(fx), 0), w - 1)
        iy = min(max(int(fy), 0), h - 1)
        half_w = det.w * KEYPOINT_SNAP_EXPAND / 2
        half_h = det.h * KEYPOINT_SNAP_EXPAND / 2

        joints, confs = [], []
        for ji in range(k):
            rx = det.cx + float(jreg[2 * ji, iy, ix]) * stride
            ry = det.cy + float(jreg[2 * ji + 1, iy, ix]) * stride
            best = None
            pys, pxs = np.nonzero(peaks[ji] & (kheat[ji] >= keypoint_threshold))
            for py, px in zip(pys, pxs):
                jx = (px + float(koff[0, py, px])) * stride
                jy = (py + float(koff[1, py, px])) * stride
                if abs(jx - det.cx) > half_w or abs(jy - det.cy) > half_h:
                    continue
                d2 = (jx - rx) ** 2 + (jy - ry) ** 2
                if best is None or d2 < best[0]:
                    best = (d2, jx, jy, float(kheat[ji, py, px]))
            if best is not None:
                joints.append((best[1], best[2]))
                confs.append(best[3])
            else:
                joints.append((rx, ry))
                confs.append(REGRESSION_FALLBACK_CONFIDENCE)
        poses.append(PoseInstance(det, joints, confs))
    return poses


def decode_segmentation(seg_softmax):
    """Per-pixel argmax over class channels; ties go to the lower id."""
    probs = seg_softmax.data if isinstance(seg_softmax, T.Tensor) else seg_softmax
    if probs.ndim == 4:
        return probs.argmax(axis=1)
    return probs.argmax(axis=0)


def targets_as_outputs(targets, cfg):
    """View encoded targets as perfect head outputs (for roundtrip tests)."""
    from .model import HeadOutputs

    def t(x):
        return T.Tensor(np.asarray(x, np.float32)[None])

    seg = None
    if "segmentation" in cfg.tasks:
        s = cfg.seg_resolution
        onehot = np.zeros((cfg.num_classes + 1, s, s), np.float32)
        ys, xs = np.indices((s, s))
        onehot[targets.seg_gt, ys, xs] = 1.0
        seg = t(onehot)

    return HeadOutputs(
        center_heatmap=t(np.clip(targets.center_gt, 1e-6, 1 - 1e-6)),
        size_map=t(targets.size_gt),
        offset_map=t(targets.offset_gt),
        keypoint_heatmap=t(np.clip(targets.keypoint_gt, 1e-6, 1 - 1e-6))
        if "pose" in cfg.tasks else None,
        keypoint_offset=t(targets.keypoint_offset_gt)
        if "pose" in cfg.tasks else None,
        joint_regression=t(targets.joint_regression_gt)
        if "pose" in cfg.tasks else None,
        seg_softmax=seg,
    )
