"""Deterministic synthetic scene generator and annotation I/O.

Scenes contain filled shapes, one shape family per class, with class 1 a
stick figure carrying keypoints. Instance masks of the same class are
merged into a single segmentation map; later objects occlude earlier ones.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .codec import SceneAnnotation

ANNOTATION_VERSION = "1"
PERSON_CLASS = 1


class AnnotationFormatError(ValueError):
    """Annotation file is malformed or fails validation."""


@dataclass
class DatasetConfig:
    image_size: int = 64
    num_classes: int = 4
    max_objects: int = 3
    num_keypoints: int = 5
    seed: int = 0
    scene_count: int = 10
    no_collision: bool = False   # no two same-class centers per stride-4 cell
    min_extent: int = 14
    max_extent: int = 28
    pose_fraction: float = 1.0   # fraction of persons keeping keypoint labels

    def __post_init__(self):
        if self.num_classes < 1 or self.num_keypoints < 1 or self.max_objects < 1:
            raise ValueError("invalid dataset configuration")


@dataclass
class Scene:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    annotation: SceneAnnotation


def _grid(size):
    return np.mgrid[0:size, 0:size]  # yy, xx


def _segment_mask(yy, xx, p0, p1, thickness):
    """Pixels within ``thickness`` of the segment p0-p1."""
    (x0, y0), (x1, y1) = p0, p1
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return (xx - x0) ** 2 + (yy - y0) ** 2 <= thickness ** 2
    t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / L2, 0, 1)
    px, py = x0 + t * dx, y0 + t * dy
    return (xx - px) ** 2 + (yy - py) ** 2 <= thickness ** 2


def _render_person(yy, xx, cx, cy, extent, rng):
    """Filled stick figure; returns (mask, keypoints) with the canonical
    5 joints: head, left/right hand tip, left/right foot tip."""
    h = extent
    head_r = max(2, h // 6)
    head = (cx, cy - h / 2 + head_r)
    hip = (cx, cy + h / 8)
    shoulder = (cx, cy - h / 2 + 2 * head_r)
    spread = h * 0.28
    lhand = (cx - spread, shoulder[1] + h * 0.22)
    rhand = (cx + spread, shoulder[1] + h * 0.22)
    lfoot = (cx - spread * 0.8, cy + h / 2)
    rfoot = (cx + spread * 0.8, cy + h / 2)

    t = max(1.5, h / 12)
    mask = (xx - head[0]) ** 2 + (yy - head[1]) ** 2 <= head_r ** 2
    for a, b in [(shoulder, hip), (shoulder, lhand), (shoulder, rhand),
                 (hip, lfoot), (hip, rfoot)]:
        mask |= _segment_mask(yy, xx, a, b, t)
    keypoints = [head, lhand, rhand, lfoot, rfoot]
    return mask, keypoints


def _render_shape(yy, xx, cls, cx, cy, w, h):
    family = (cls - 2) % 3
    if family == 0:  # rectangle
        return (np.abs(xx - cx) <= w / 2) & (np.abs(yy - cy) <= h / 2)
    if family == 1:  # ellipse
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1
    # triangle (isoceles, apex up), via half-plane tests
    x0, y0 = cx, cy - h / 2
    x1, y1 = cx - w / 2, cy + h / 2
    x2, y2 = cx + w / 2, cy + h / 2
    def side(ax, ay, bx, by):
        return (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
    s0, s1, s2 = side(x0, y0, x1, y1), side(x1, y1, x2, y2), side(x2, y2, x0, y0)
    return (s0 >= 0) & (s1 >= 0) & (s2 >= 0)


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max()
    x0, x1 = xs.min(), xs.max()
    return ((x0 + x1 + 1) / 2, (y0 + y1 + 1) / 2, x1 - x0 + 1, y1 - y0 + 1)


def generate_scene(cfg, index):
    """Render scene ``index``; a pure function of (cfg, index)."""
    if index >= cfg.scene_count:
        raise ValueError(f"index {index} out of range")
    size = cfg.image_size
    yy, xx = _grid(size)

    for attempt in range(64):
        rng = np.random.default_rng((cfg.seed, index, attempt))
        image = np.empty((3, size, size), np.float32)
        base = rng.uniform(0.08, 0.25, size=3)
        for ch in range(3):
            image[ch] = base[ch] + rng.normal(0, 0.02, (size, size))
        seg = np.zeros((size, size), np.int64)

        n_objects = int(rng.integers(1, cfg.max_objects + 1))
        instances = []  # (mask, class, keypoints or None)
        used_cells = set()
        ok = True
        for _ in range(n_objects):
            cls = int(rng.integers(1, cfg.num_classes + 1))
            extent = float(rng.uniform(cfg.min_extent, cfg.max_extent))
            margin = extent / 2 + 2
            cx = float(rng.uniform(margin, size - margin))
            cy = float(rng.uniform(margin, size - margin))
            if cfg.no_collision:
                # size/offset maps are shared across classes, so no two
                # centers of any class may share a stride-4 cell
                cell = (int(cy) // 4, int(cx) // 4)
                tries = 0
                while cell in used_cells and tries < 20:
                    cx = float(rng.uniform(margin, size - margin))
                    cy = float(rng.uniform(margin, size - margin))
                    cell = (int(cy) // 4, int(cx) // 4)
                    tries += 1
                if cell in used_cells:
                    ok = False
                    break
                used_cells.add(cell)
            if cls == PERSON_CLASS:
                mask, keypoints = _render_person(yy, xx, cx, cy, extent, rng)
                if rng.random() >= cfg.pose_fraction:
                    keypoints = None
            else:
                aspect = float(rng.uniform(0.7, 1.4))
                mask = _render_shape(yy, xx, cls, cx, cy, extent,
                                     min(extent * aspect, size - 4))
                keypoints = None
            color = rng.uniform(0.45, 0.95, size=3)
            instances.append((mask, cls, keypoints, color))

        if not ok or not instances:
            continue

        for mask, cls, _, color in instances:
            for ch in range(3):
                image[ch][mask] = color[ch]
            seg[mask] = cls

        # later objects occlude earlier ones; every object must stay
        # at least partially visible so its class appears inside its box
        boxes, keypoints_by_box = [], {}
        for oi, (mask, cls, kps, _) in enumerate(instances):
            visible = mask.copy()
            for later_mask, _, _, _ in instances[oi + 1:]:
                visible &= ~later_mask
            if visible.sum() < max(8, 0.25 * mask.sum()):
                ok = False
                break
            cx, cy, bw, bh = _tight_box(mask)
            boxes.append((cls, cx, cy, bw, bh))
            if cls == PERSON_CLASS and kps is not None:
                x0, x1 = cx - bw / 2, cx + bw / 2
                y0, y1 = cy - bh / 2, cy + bh / 2
                joints = []
                for jx, jy in kps[:cfg.num_keypoints]:
                    jx = min(max(jx, x0), x1 - 1e-3)
                    jy = min(max(jy, y0), y1 - 1e-3)
                    joints.append((float(jx), float(jy), 1))
                while len(joints) < cfg.num_keypoints:
                    joints.append((cx, cy, 1))
                keypoints_by_box[len(boxes) - 1] = joints
        if not ok:
            continue

        if cfg.no_collision:
            # the placement check above uses the intended centers; the codec
            # encodes tight-box centers, which may land in a neighboring
            # cell, so re-verify on the final annotation. Keypoint cells
            # must also be distinct: their offset map is shared across
            # joint types.
            box_cells = [(int(cy) // 4, int(cx) // 4)
                         for _, cx, cy, _, _ in boxes]
            kp_cells = [(int(jy) // 4, int(jx) // 4)
                        for joints in keypoints_by_box.values()
                        for jx, jy, _ in joints]
            if (len(box_cells) != len(set(box_cells))
                    or len(kp_cells) != len(set(kp_cells))):
                continue

        image = np.clip(image, 0.0, 1.0)
        ann = SceneAnnotation(size, size, boxes, keypoints_by_box, seg)
        return Scene(image, ann)

    raise RuntimeError(f"could not place objects for scene {index}")


def generate_dataset(cfg):
    return [generate_scene(cfg, i) for i in range(cfg.scene_count)]


# -- run-length coding -------------------------------------------------------

def rle_encode(id_map):
    """Row-major (class, run-length) pairs, flattened."""
    flat = np.asarray(id_map).reshape(-1)
    out = []
    i = 0
    while i < flat.size:
        v = flat[i]
        j = i
        while j < flat.size and flat[j] == v:
            j += 1
        out.extend((int(v), j - i))
        i = j
    return out


def rle_decode(pairs, height, width):
    flat = np.empty(height * width, np.int64)
    pos = 0
    for k in range(0, len(pairs), 2):
        v, n = pairs[k], pairs[k + 1]
        flat[pos:pos + n] = v
        pos += n
    if pos != height * width:
        raise AnnotationFormatError("run-length data does not cover the map")
    return flat.reshape(height, width)


# -- annotation JSON -----------------------------------------------------------

def _num(v):
    # decimal strings give a bit-stable roundtrip (repr is exact for floats)
    return repr(float(v))


def save_annotations(scenes, path, image_dir=None):
    """Write the dataset annotation file; optionally materialize PPM images."""
    images = []
    for i, scene in enumerate(scenes):
        ann = scene.annotation
        entry = {
            "id": i, "width": ann.width, "height": ann.height,
            "boxes": [{"class": int(c), "cx": _num(cx), "cy": _num(cy),
                       "w": _num(w), "h": _num(h)}
                      for c, cx, cy, w, h in ann.boxes],
            "persons": [{"box_index": bi,
                         "keypoints": [{"x": _num(x), "y": _num(y),
                                        "visible": int(v)}
                                       for x, y, v in joints]}
                        for bi, joints in sorted(ann.keypoints.items())],
            "seg_rle": rle_encode(ann.seg_map),
        }
        if image_dir is not None and scene.image is not None:
            fname = f"scene_{i:05d}.ppm"
            write_ppm(os.path.join(image_dir, fname), scene.image)
            entry["file"] = fname
        images.append(entry)
    with open(path, "w") as fh:
        json.dump({"version": ANNOTATION_VERSION, "images": images}, fh)


def load_annotations(path, image_dir=None):
    """Read an annotation file back into Scenes (images only if stored)."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"malformed JSON: {exc}") from exc
    if doc.get("version") != ANNOTATION_VERSION:
        raise AnnotationFormatError(
            f"unsupported annotation version {doc.get('version')!r}")

    scenes = []
    for entry in doc["images"]:
        w, h = entry["width"], entry["height"]
        boxes = []
        for b in entry["boxes"]:
            cx, cy = float(b["cx"]), float(b["cy"])
            bw, bh = float(b["w"]), float(b["h"])
            if not (0 <= cx <= w and 0 <= cy <= h):
                raise AnnotationFormatError(
                    f"image {entry['id']}: box center out of bounds")
            boxes.append((int(b["class"]), cx, cy, bw, bh))
        keypoints = {}
        for pi, person in enumerate(entry.get("persons", [])):
            joints = []
            for kp in person["keypoints"]:
                x, y = float(kp["x"]), float(kp["y"])
                if not (0 <= x <= w and 0 <= y <= h):
                    raise AnnotationFormatError(
                        f"image {entry['id']}: keypoint out of bounds "
                        f"in person {pi}")
                joints.append((x, y, int(kp["visible"])))
            keypoints[person["box_index"]] = joints
        seg = rle_decode(entry["seg_rle"], h, w)
        ann = SceneAnnotation(h, w, boxes, keypoints, seg)
        image = None
        if image_dir is not None and "file" in entry:
            image = read_ppm(os.path.join(image_dir, entry["file"]))
        scenes.append(Scene(image, ann))
    return scenes


# -- PPM (P6) -------------------------------------------------------------------

def write_ppm(path, image):
    """Write a [3,H,W] float image in [0,1] as binary 8-bit PPM."""
    c, h, w = image.shape
    data = np.clip(np.round(image * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    pixels = np.frombuffer(parts[4][:w * h * 3], np.uint8)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / 255.0).astype(np.float32)


# -- COCO-format import -----------------------------------------------------------

def coco_subset_import(directory):
    """Convert COCO-style instance/keypoint annotations to SceneAnnotations.

    Instance polygons are rasterized and merged per class; keypoints attach
    only to person boxes. Unrasterizable entries are skipped with a warning
    count, never aborting the import. Returns (scenes, warnings).
    """
    from PIL import Image, ImageDraw

    ann_files = sorted(f for f in os.listdir(directory)
                       if f.endswith(".json"))
    if not ann_files:
        raise AnnotationFormatError(f"no annotation JSON found in {directory}")

    scenes = []
    warnings = 0
    for fname in ann_files:
        with open(os.path.join(directory, fname)) as fh:
            doc = json.load(fh)
        categories = sorted(c["id"] for c in doc.get("categories", []))
        person_ids = {c["id"] for c in doc.get("categories", [])
                      if c.get("name") == "person"}
        # dense remap with person pinned to class 1
        remap = {}
        next_id = 2
        for cid in categories:
            if cid in person_ids:
                remap[cid] = PERSON_CLASS
            else:
                remap[cid] = next_id
                next_id += 1

        anns_by_image = {}
        for ann in doc.get("annotations", []):
            anns_by_image.setdefault(ann["image_id"], []).append(ann)

        for img in doc.get("images", []):
            w, h = img["width"], img["height"]
            seg = np.zeros((h, w), np.int64)
            boxes, keypoints = [], {}
            for ann in anns_by_image.get(img["id"], []):
                cls = remap.get(ann["category_id"])
                if cls is None:
                    warnings += 1
                    continue
                x, y, bw, bh = ann["bbox"]
                boxes.append((cls, x + bw / 2, y + bh / 2, bw, bh))
                poly = ann.get("segmentation")
                if isinstance(poly, list):
                    canvas = Image.new("1", (w, h), 0)
                    draw = ImageDraw.Draw(canvas)
                    drawn = False
                    for ring in poly:
                        if isinstance(ring, list) and len(ring) >= 6:
                            draw.polygon(ring, fill=1)
                            drawn = True
                        else:
                            warnings += 1
                    if drawn:
                        # same-class merge: overwrite wins like occlusion
                        seg[np.array(canvas, bool)] = cls
                elif poly is not None:
                    warnings += 1
                kps = ann.get("keypoints")
                if kps:
                    if cls != PERSON_CLASS:
                        warnings += 1
                    else:
                        joints = [(kps[i], kps[i + 1], 1 if kps[i + 2] == 2 else 0)
                                  for i in range(0, len(kps), 3)]
                        keypoints[len(boxes) - 1] = joints
            scenes.append(Scene(None, SceneAnnotation(h, w, boxes, keypoints, seg)))
    return scenes, warnings


def horizontal_flip(scene, num_keypoints=5):
    """Mirror a scene left-right, swapping left/right keypoints."""
    image = scene.image[:, :, ::-1].copy() if scene.image is not None else None
    ann = scene.annotation
    w = ann.width
    boxes = [(c, w - cx, cy, bw, bh) for c, cx, cy, bw, bh in ann.boxes]
    # canonical joint order: head, L hand, R hand, L foot, R foot
    swap = {1: 2, 2: 1, 3: 4, 4: 3}
    keypoints = {}
    for bi, joints in ann.keypoints.items():
        flipped = [(w - x, y, v) for x, y, v in joints]
        keypoints[bi] = [flipped[swap.get(i, i)] if swap.get(i, i) < len(flipped)
                         else flipped[i] for i in range(len(flipped))]
    seg = ann.seg_map[:, ::-1].copy()
    return Scene(image, SceneAnnotation(ann.height, w, boxes, keypoints, seg))
