"""Built-in verification: gradient checks, codec roundtrips and metric
oracles, runnable from the CLI as a quick health check."""

import numpy as np

from . import codec, losses, metrics, tensor as T
from .data import DatasetConfig, generate_scene
from .model import BackboneConfig, HeadConfig, build_model


def _brute_force_peaks(heat):
    c, h, w = heat.shape
    out = np.zeros_like(heat, bool)
    for ci in range(c):
        for y in range(h):
            for x in range(w):
                window = heat[ci, max(0, y - 1):y + 2, max(0, x - 1):x + 2]
                out[ci, y, x] = heat[ci, y, x] >= window.max()
    return out


def run_selftest(inject_fault=None, verbose=False):
    """Run the core property checks; returns a list of (name, passed)."""
    results = []

    def check(name, ok):
        results.append((name, bool(ok)))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'}  {name}")

    # gradient integrity of the elementary ops
    rng = np.random.default_rng(7)
    x = T.Tensor(rng.standard_normal((1, 3, 6, 6)), dtype=np.float64)
    w = T.Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.3, dtype=np.float64,
                 requires_grad=True)
    b = T.Tensor(np.zeros(4), dtype=np.float64, requires_grad=True)
    err = T.grad_check(lambda t: T.tensor_sum(
        T.relu(T.conv2d(t, w, b, stride=1, pad=1))), x, eps=1e-6)
    check("grad:conv2d+relu", err <= 1e-5)

    pred = T.Tensor(rng.uniform(0.1, 0.9, (1, 2, 8, 8)), dtype=np.float64)
    gt = np.zeros((1, 2, 8, 8))
    gt[0, 0, 3, 3] = 1.0

    def focal(t):
        y = losses.focal_heatmap_loss(t, gt)
        if inject_fault == "focal_sign_flip":
            # test fixture: corrupt the backward rule, forward untouched
            orig = y._backward_fn
            y._backward_fn = lambda g: orig(-g)
        return y

    err = T.grad_check(focal, pred, eps=1e-6)
    check("grad:focal_heatmap_loss", err <= 1e-4)

    # codec roundtrip on a handful of generated scenes
    dcfg = DatasetConfig(seed=11, scene_count=5, no_collision=True)
    hcfg = HeadConfig(tasks=frozenset({"detection", "segmentation", "pose"}),
                      num_classes=dcfg.num_classes, seg_resolution=32,
                      num_keypoints=dcfg.num_keypoints)
    ok = True
    for i in range(dcfg.scene_count):
        ann = generate_scene(dcfg, i).annotation
        targets = codec.encode_targets(ann, hcfg)
        outs = codec.targets_as_outputs(targets, hcfg)
        dets = codec.decode_detections(outs, stride=4)
        if len(dets) != len(ann.boxes):
            ok = False
            break
        for det in dets:
            best = min(abs(det.cx - bx) + abs(det.cy - by)
                       for c, bx, by, _, _ in ann.boxes)
            if best > 1.0:
                ok = False
    check("codec:roundtrip", ok)

    # peak decoding against a brute-force local-maximum scan
    heat = rng.uniform(0, 1, (2, 12, 12)).astype(np.float32)
    fast = codec._peak_mask(heat[None])[0]
    check("codec:peak-oracle", np.array_equal(fast, _brute_force_peaks(heat)))

    # AP against hand-computed PR curves
    gt_box = (10.0, 10.0, 8.0, 8.0)
    ap = metrics.average_precision(
        [(0.9, gt_box), (0.5, (40.0, 40.0, 8.0, 8.0))], [gt_box], 0.5)
    check("metrics:ap-tp-then-fp", abs(ap - 1.0) < 1e-12)
    ap = metrics.average_precision(
        [(0.5, gt_box), (0.9, (40.0, 40.0, 8.0, 8.0))], [gt_box], 0.5)
    check("metrics:ap-fp-then-tp", abs(ap - 0.5) < 1e-12)

    pred_ids = np.zeros((8, 8), int)
    gt_ids = np.zeros((8, 8), int)
    gt_ids[:, 4:] = 1
    miou = metrics.seg_miou(pred_ids, gt_ids, num_classes=1)
    check("metrics:miou-half", abs(miou - 0.25) < 1e-12)

    # a tiny model builds and runs all heads
    model = build_model(
        BackboneConfig(stage_widths=(4, 8), stage_strides=(1, 2),
                       block_depth=1, head_channels=4),
        hcfg, seed=0)
    out = model.forward(T.Tensor(np.zeros((2, 3, 32, 32), np.float32)),
                        mode="train")
    sums = out.seg_softmax.data.sum(axis=1)
    check("model:softmax-normalized", np.allclose(sums, 1.0, atol=1e-6))

    return results
