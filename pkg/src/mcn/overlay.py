"""Prediction overlays: box rectangles, keypoint markers with skeleton
lines, and a 50% segmentation blend, all drawn with a fixed 16-color
palette indexed by class id modulo 16."""

import numpy as np

PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.float32) / 255.0


def class_color(class_id):
    return PALETTE[class_id % 16]


def _draw_rect(img, x0, y0, x1, y1, color):
    h, w = img.shape[1:]
    x0, x1 = int(round(x0)), int(round(x1))
    y0, y1 = int(round(y0)), int(round(y1))
    x0c, x1c = max(0, x0), min(w - 1, x1)
    y0c, y1c = max(0, y0), min(h - 1, y1)
    if x0c > x1c or y0c > y1c:
        return
    for ch in range(3):
        if 0 <= y0 < h:
            img[ch, y0, x0c:x1c + 1] = color[ch]
        if 0 <= y1 < h:
            img[ch, y1, x0c:x1c + 1] = color[ch]
        if 0 <= x0 < w:
            img[ch, y0c:y1c + 1, x0] = color[ch]
        if 0 <= x1 < w:
            img[ch, y0c:y1c + 1, x1] = color[ch]


def _draw_square(img, x, y, color, half=1):
    h, w = img.shape[1:]
    x, y = int(round(x)), int(round(y))
    y0, y1 = max(0, y - half), min(h - 1, y + half)
    x0, x1 = max(0, x - half), min(w - 1, x + half)
    for ch in range(3):
        img[ch, y0:y1 + 1, x0:x1 + 1] = color[ch]


def _draw_line(img, x0, y0, x1, y1, color):
    # Bresenham, 1 px
    h, w = img.shape[1:]
    x0, y0 = int(round(x0)), int(round(y0))
    x1, y1 = int(round(x1)), int(round(y1))
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    while True:
        if 0 <= x0 < w and 0 <= y0 < h:
            img[:, y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def skeleton_edges(num_keypoints):
    # canonical 5-joint figure: head to each limb tip; extra joints chain
    # back to the head as well
    return [(0, i) for i in range(1, num_keypoints)]


def render_overlay(image, detections=None, poses=None, seg_ids=None):
    """Compose an overlay image; pure function of its inputs."""
    out = image.copy()
    h, w = out.shape[1:]

    if seg_ids is not None:
        seg = np.asarray(seg_ids)
        if seg.shape != (h, w):
            ys = np.minimum((np.arange(h) * seg.shape[0] // h), seg.shape[0] - 1)
            xs = np.minimum((np.arange(w) * seg.shape[1] // w), seg.shape[1] - 1)
            seg = seg[np.ix_(ys, xs)]
        fg = seg > 0
        colors = PALETTE[seg % 16].transpose(2, 0, 1)
        out = np.where(fg[None], 0.5 * out + 0.5 * colors, out)

    for det in detections or []:
        color = class_color(det.class_id)
        _draw_rect(out, det.cx - det.w / 2, det.cy - det.h / 2,
                   det.cx + det.w / 2, det.cy + det.h / 2, color)

    for pose in poses or []:
        color = class_color(pose.detection.class_id)
        joints = pose.joints
        for a, b in skeleton_edges(len(joints)):
            _draw_line(out, joints[a][0], joints[a][1],
                       joints[b][0], joints[b][1], color)
        for jx, jy in joints:
            _draw_square(out, jx, jy, color)

    return np.clip(out, 0.0, 1.0)
