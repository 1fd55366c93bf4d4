import numpy as np
import pytest

from mcn import codec
from mcn.data import DatasetConfig, generate_scene
from mcn.model import HeadConfig

THREE_TASKS = frozenset({"detection", "segmentation", "pose"})


def head_cfg(**kw):
    base = dict(tasks=THREE_TASKS, num_classes=4, num_keypoints=5,
                seg_resolution=32, output_stride=4)
    base.update(kw)
    return HeadConfig(**base)


def radius_oracle(h, w, min_overlap):
    # independent scalar evaluation of the three quadratic roots
    import math
    r1 = ((h + w) - math.sqrt((h + w) ** 2 - 4 * h * w * (1 - min_overlap)
                              / (1 + min_overlap))) / 2
    r2 = (2 * (h + w) - math.sqrt(4 * (h + w) ** 2
                                  - 16 * (1 - min_overlap) * h * w)) / 8
    b3 = -2 * min_overlap * (h + w)
    a3 = 4 * min_overlap
    c3 = (min_overlap - 1) * h * w
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)
    return max(1, int(math.floor(min(r1, r2, r3))))


class TestGaussianRadius:
    def test_always_at_least_one(self):
        assert codec.gaussian_radius(0.5, 0.5) >= 1
        assert codec.gaussian_radius(1000, 1) >= 1

    def test_matches_scalar_oracle(self):
        for h, w in [(10, 10), (4, 12), (25, 7), (3, 3), (40, 40)]:
            assert codec.gaussian_radius(h, w, 0.7) == radius_oracle(h, w, 0.7)

    def test_monotone_in_size(self):
        for h, w in [(5, 5), (8, 14), (20, 6)]:
            assert (codec.gaussian_radius(2 * h, 2 * w)
                    >= codec.gaussian_radius(h, w))

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            codec.gaussian_radius(0, 5)
        with pytest.raises(ValueError):
            codec.gaussian_radius(5, 5, min_overlap=1.5)


class TestRenderGaussian:
    def test_center_is_one(self):
        hm = np.zeros((11, 11), np.float32)
        codec.render_gaussian(hm, (5, 5), 3)
        assert hm[5, 5] == 1.0

    def test_value_at_sigma(self):
        hm = np.zeros((21, 21), np.float32)
        r = 6
        codec.render_gaussian(hm, (10, 10), r)
        sigma = r / 3  # an integer here, so we can read the cell directly
        assert abs(hm[10, 10 + int(sigma)] - np.exp(-0.5)) < 1e-6

    def test_max_combination(self):
        a = np.zeros((15, 15), np.float32)
        b = np.zeros((15, 15), np.float32)
        both = np.zeros((15, 15), np.float32)
        codec.render_gaussian(a, (5, 7), 3)
        codec.render_gaussian(b, (8, 7), 3)
        codec.render_gaussian(both, (5, 7), 3)
        codec.render_gaussian(both, (8, 7), 3)
        np.testing.assert_array_equal(both, np.maximum(a, b))

    def test_idempotent(self):
        hm = np.zeros((9, 9), np.float32)
        codec.render_gaussian(hm, (4, 4), 2)
        snapshot = hm.copy()
        codec.render_gaussian(hm, (4, 4), 2)
        np.testing.assert_array_equal(hm, snapshot)

    def test_edge_clipping(self):
        hm = np.zeros((8, 8), np.float32)
        codec.render_gaussian(hm, (0, 0), 4)
        assert hm[0, 0] == 1.0


class TestEncodeTargets:
    def test_empty_annotation(self):
        ann = codec.SceneAnnotation(32, 32, [], {}, np.zeros((32, 32), np.int64))
        t = codec.encode_targets(ann, head_cfg())
        assert t.center_gt.sum() == 0
        assert not t.reg_mask.any()
        assert not t.keypoint_mask.any()

    def test_peak_cell_and_offset(self):
        ann = codec.SceneAnnotation(
            32, 32, [(2, 10.0, 6.0, 8.0, 8.0)], {},
            np.zeros((32, 32), np.int64))
        t = codec.encode_targets(ann, head_cfg())
        assert t.center_gt[1, 1, 2] == 1.0  # cell (row 6//4=1, col 10//4=2)
        np.testing.assert_allclose(t.offset_gt[:, 1, 2], [0.5, 0.5])
        np.testing.assert_allclose(t.size_gt[:, 1, 2], [2.0, 2.0])
        assert t.reg_mask[1, 2]

    def test_every_box_peaks_at_one(self):
        cfg = DatasetConfig(seed=3, scene_count=5, no_collision=True)
        hc = head_cfg()
        for i in range(5):
            ann = generate_scene(cfg, i).annotation
            t = codec.encode_targets(ann, hc)
            for cls, cx, cy, w, h in ann.boxes:
                iy, ix = int(cy / 4), int(cx / 4)
                assert t.center_gt[cls - 1, min(iy, 15), min(ix, 15)] == 1.0

    def test_collision_keeps_larger_box(self):
        ann = codec.SceneAnnotation(
            32, 32,
            [(1, 10.0, 10.0, 4.0, 4.0), (1, 10.5, 10.5, 12.0, 12.0)],
            {}, np.zeros((32, 32), np.int64))
        t = codec.encode_targets(ann, head_cfg(tasks=frozenset({"detection"})))
        assert t.collisions == 1
        np.testing.assert_allclose(t.size_gt[:, 2, 2], [3.0, 3.0])


class TestDecodeDetections:
    def make_outputs(self, heat, size, off):
        from mcn.model import HeadOutputs
        from mcn import tensor as T
        return HeadOutputs(center_heatmap=T.Tensor(heat[None]),
                           size_map=T.Tensor(size[None]),
                           offset_map=T.Tensor(off[None]))

    def test_below_threshold_empty(self):
        heat = np.full((2, 8, 8), 0.1, np.float32)
        out = self.make_outputs(heat, np.ones((2, 8, 8), np.float32),
                                np.zeros((2, 8, 8), np.float32))
        assert codec.decode_detections(out, stride=4) == []

    def test_single_spike_hand_values(self):
        heat = np.zeros((1, 8, 8), np.float32)
        heat[0, 3, 4] = 0.9
        size = np.zeros((2, 8, 8), np.float32)
        size[:, 3, 4] = (2.5, 5.0)
        off = np.zeros((2, 8, 8), np.float32)
        off[:, 3, 4] = (0.2, 0.3)
        dets = codec.decode_detections(self.make_outputs(heat, size, off),
                                       stride=4)
        assert len(dets) == 1
        d = dets[0]
        assert (d.cx, d.cy) == pytest.approx((16.8, 13.2))
        assert (d.w, d.h) == pytest.approx((10.0, 20.0))
        assert d.score == pytest.approx(0.9)

    def brute_force_decode(self, heat, size, off, top_k, thr, stride):
        c, h, w = heat.shape
        cells = []
        for ci in range(c):
            for y in range(h):
                for x in range(w):
                    window = heat[ci, max(0, y - 1):y + 2, max(0, x - 1):x + 2]
                    if heat[ci, y, x] >= window.max():
                        cells.append((ci, y, x, heat[ci, y, x]))
        cells.sort(key=lambda t: (-t[3], t[0], t[1], t[2]))
        cells = cells[:top_k]
        result = []
        for ci, y, x, score in cells:
            if score < thr:
                continue
            bw = size[0, y, x] * stride
            bh = size[1, y, x] * stride
            if bw <= 0 or bh <= 0:
                continue
            result.append((ci + 1, float(score),
                           (x + off[0, y, x]) * stride,
                           (y + off[1, y, x]) * stride, bw, bh))
        return result

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            heat = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
            size = rng.uniform(0.5, 4, (2, 16, 16)).astype(np.float32)
            off = rng.uniform(0, 1, (2, 16, 16)).astype(np.float32)
            dets = codec.decode_detections(
                self.make_outputs(heat, size, off), top_k=20,
                score_threshold=0.5, stride=4)
            expected = self.brute_force_decode(heat, size, off, 20, 0.5, 4)
            assert len(dets) == len(expected)
            for d, e in zip(dets, expected):
                assert d.class_id == e[0]
                assert d.score == pytest.approx(e[1])
                assert (d.cx, d.cy, d.w, d.h) == pytest.approx(e[2:])

    def test_deterministic_ordering(self):
        heat = np.zeros((2, 8, 8), np.float32)
        heat[1, 2, 2] = 0.8
        heat[0, 5, 5] = 0.8
        out = self.make_outputs(heat, np.ones((2, 8, 8), np.float32),
                                np.zeros((2, 8, 8), np.float32))
        dets = codec.decode_detections(out, stride=4)
        # equal scores -> lower class id first
        assert [d.class_id for d in dets[:2]] == [1, 2]


class TestRoundtrip:
    def test_boxes_recovered(self):
        cfg = DatasetConfig(seed=5, scene_count=8, no_collision=True)
        hc = head_cfg()
        for i in range(8):
            ann = generate_scene(cfg, i).annotation
            t = codec.encode_targets(ann, hc)
            assert t.collisions == 0
            outs = codec.targets_as_outputs(t, hc)
            dets = codec.decode_detections(outs, stride=4, score_threshold=0.5)
            assert len(dets) == len(ann.boxes)
            used = set()
            for d in dets:
                match = None
                for bi, (cls, cx, cy, w, h) in enumerate(ann.boxes):
                    if bi in used or cls != d.class_id:
                        continue
                    if abs(cx - d.cx) <= 0.5 and abs(cy - d.cy) <= 0.5:
                        match = bi
                        break
                assert match is not None, "unmatched detection"
                used.add(match)
                cls, cx, cy, w, h = ann.boxes[match]
                assert d.w == pytest.approx(w, abs=1e-3)
                assert d.h == pytest.approx(h, abs=1e-3)

    def test_keypoints_recovered(self):
        cfg = DatasetConfig(seed=6, scene_count=6, no_collision=True)
        hc = head_cfg()
        for i in range(6):
            ann = generate_scene(cfg, i).annotation
            person_boxes = [bi for bi, b in enumerate(ann.boxes) if b[0] == 1
                            and bi in ann.keypoints]
            if not person_boxes:
                continue
            t = codec.encode_targets(ann, hc)
            outs = codec.targets_as_outputs(t, hc)
            dets = codec.decode_detections(outs, stride=4, score_threshold=0.5)
            persons = [d for d in dets if d.class_id == 1]
            poses = codec.decode_poses(outs, persons, stride=4)
            for pose in poses:
                gt_bi = min(person_boxes, key=lambda bi: abs(
                    ann.boxes[bi][1] - pose.detection.cx))
                for (px, py), (gx, gy, vis) in zip(pose.joints,
                                                   ann.keypoints[gt_bi]):
                    if vis:
                        assert abs(px - gx) <= 0.5 + 1e-6
                        assert abs(py - gy) <= 0.5 + 1e-6


class TestDecodePoses:
    def test_no_detections(self):
        cfg = DatasetConfig(seed=1, scene_count=1, no_collision=True)
        ann = generate_scene(cfg, 0).annotation
        t = codec.encode_targets(ann, head_cfg())
        outs = codec.targets_as_outputs(t, head_cfg())
        assert codec.decode_poses(outs, [], stride=4) == []

    def test_regression_fallback(self):
        from mcn.model import HeadOutputs
        from mcn import tensor as T
        k = 3
        outs = HeadOutputs(
            keypoint_heatmap=T.Tensor(np.full((1, k, 8, 8), 1e-6, np.float32)),
            keypoint_offset=T.Tensor(np.zeros((1, 2, 8, 8), np.float32)),
            joint_regression=T.Tensor(
                np.ones((1, 2 * k, 8, 8), np.float32)))
        det = codec.Detection(1, 0.9, 16.0, 16.0, 10.0, 10.0)
        poses = codec.decode_poses(outs, [det], stride=4)
        assert len(poses) == 1
        for (jx, jy), conf in zip(poses[0].joints, poses[0].confidences):
            # pure regression: center + 1.0 * stride on both axes
            assert (jx, jy) == pytest.approx((20.0, 20.0))
            assert conf == codec.REGRESSION_FALLBACK_CONFIDENCE


class TestDecodeSegmentation:
    def test_one_hot_recovers_map(self):
        rng = np.random.default_rng(7)
        ids = rng.integers(0, 4, (16, 16))
        onehot = np.zeros((4, 16, 16), np.float32)
        ys, xs = np.indices((16, 16))
        onehot[ids, ys, xs] = 1.0
        np.testing.assert_array_equal(codec.decode_segmentation(onehot), ids)

    def test_uniform_ties_to_background(self):
        probs = np.full((5, 4, 4), 0.2, np.float32)
        assert (codec.decode_segmentation(probs) == 0).all()

    def test_matches_per_pixel_scan(self):
        rng = np.random.default_rng(8)
        probs = rng.uniform(0, 1, (6, 9, 9)).astype(np.float32)
        got = codec.decode_segmentation(probs)
        for y in range(9):
            for x in range(9):
                assert got[y, x] == int(np.argmax(probs[:, y, x]))
