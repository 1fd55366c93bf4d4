"""Training loop and evaluation: data -> targets -> forward -> loss ->
backward -> parameter update, with JSONL-friendly step logs."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import codec, metrics, tensor as T
from .losses import LossWeights, total_loss


@dataclass
class TrainConfig:
    steps: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    weights: LossWeights = field(default_factory=LossWeights)
    eval_interval: int = 0   # 0 disables periodic evaluation
    seed: int = 0
    tasks: frozenset = frozenset({"detection"})
    top_k: int = codec.DEFAULT_TOP_K
    score_threshold: float = codec.DEFAULT_SCORE_THRESHOLD
    map_thresholds: tuple = (0.5,)

    def __post_init__(self):
        self.tasks = frozenset(self.tasks)
        if self.steps < 1 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("invalid training configuration")


class NonFiniteLossError(RuntimeError):
    def __init__(self, step, breakdown):
        bad = [k for k, v in breakdown.as_dict().items() if not np.isfinite(v)]
        super().__init__(f"non-finite loss at step {step}: {', '.join(bad)}")
        self.step = step
        self.breakdown = breakdown


class SGD:
    def __init__(self, params, lr):
        self.params = params
        self.lr = lr

    def step(self):
        for p in self.params.values():
            if p.grad is not None:
                p.data -= self.lr * p.grad.astype(p.dtype)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def make_optimizer(cfg, params):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate)
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def encode_dataset(scenes, head_cfg):
    """Encode every scene once; training re-uses the cached targets."""
    return [codec.encode_targets(s.annotation, head_cfg) for s in scenes]


def train(model, scenes, cfg, log_path=None, checkpoint_fn=None):
    """Optimize ``model`` on ``scenes``; returns the per-step log.

    Deterministic given (cfg.seed, scenes): batches are drawn from a
    dedicated RNG and every numeric op is single-threaded numpy.
    """
    if cfg.batch_size == 1 and model.backbone.norm == "batch":
        raise ValueError("batch size 1 requires an affine-norm model")

    encoded = encode_dataset(scenes, model.heads)
    images = [s.image for s in scenes]
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(cfg, model.params)

    log = []
    log_fh = open(log_path, "w") if log_path else None
    try:
        for step in range(1, cfg.steps + 1):
            idx = rng.choice(len(scenes), size=cfg.batch_size, replace=True)
            batch = np.stack([images[i] for i in idx])
            targets = codec.stack_targets([encoded[i] for i in idx])

            outputs = model.forward(T.Tensor(batch), mode="train")
            breakdown = total_loss(outputs, targets, cfg.weights, cfg.tasks)
            if not np.isfinite(breakdown.total):
                raise NonFiniteLossError(step, breakdown)

            model.zero_grads()
            breakdown.total_tensor.backward()
            optimizer.step()

            record = {"step": step, "loss": breakdown.as_dict(),
                      "lr": cfg.learning_rate}
            log.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
            if checkpoint_fn and cfg.eval_interval and step % cfg.eval_interval == 0:
                checkpoint_fn(model, step)
    finally:
        if log_fh:
            log_fh.close()
    return log


def evaluate(model, scenes, cfg=None, pck_alpha=metrics.DEFAULT_PCK_ALPHA):
    """Decode every scene in eval mode and score the configured tasks.

    Never mutates parameters or running statistics.
    """
    cfg = cfg or TrainConfig(tasks=model.heads.tasks)
    stride = model.heads.output_stride
    tasks = model.heads.tasks

    preds_by_image, gts_by_image = [], []
    ious = []
    poses_all, people_all = [], []
    num_classes = model.heads.num_classes

    conf_inter = np.zeros(num_classes + 1)
    conf_union = np.zeros(num_classes + 1)

    with T.no_grad():
        for scene in scenes:
            ann = scene.annotation
            out = model.forward(T.Tensor(scene.image[None]), mode="eval")
            if "detection" in tasks:
                dets = codec.decode_detections(
                    out, top_k=cfg.top_k,
                    score_threshold=cfg.score_threshold, stride=stride)
                preds_by_image.append(dets)
                gts_by_image.append(list(ann.boxes))
                if "pose" in tasks:
                    persons = [d for d in dets if d.class_id == 1]
                    poses = codec.decode_poses(out, persons, stride=stride)
                    poses_all.append(poses)
                    people = [((cx, cy, w, h), ann.keypoints[bi])
                              for bi, (c, cx, cy, w, h) in enumerate(ann.boxes)
                              if c == 1 and bi in ann.keypoints]
                    people_all.append(people)
            if "segmentation" in tasks:
                pred_ids = codec.decode_segmentation(out.seg_softmax)[0]
                s = model.heads.seg_resolution
                from .codec import _nearest_resample_ids
                gt_ids = _nearest_resample_ids(ann.seg_map, s)
                for c in range(num_classes + 1):
                    p, g = pred_ids == c, gt_ids == c
                    conf_inter[c] += (p & g).sum()
                    conf_union[c] += (p | g).sum()

    report = metrics.MetricReport()
    if "detection" in tasks:
        det_map, per_class = metrics.mean_ap(
            preds_by_image, gts_by_image, thresholds=cfg.map_thresholds)
        report.det_map = det_map
        report.det_map_50 = metrics.mean_ap(
            preds_by_image, gts_by_image, thresholds=(0.5,))[0]
        report.per_class_ap = per_class
        report.counts["detections"] = sum(len(p) for p in preds_by_image)
        report.counts["gt_boxes"] = sum(len(g) for g in gts_by_image)
    if "segmentation" in tasks:
        present = conf_union > 0
        report.seg_miou = float(np.mean(
            conf_inter[present] / conf_union[present])) if present.any() else None
    if "pose" in tasks:
        # PCK matching is per-image; pool the correct/visible counts
        correct, visible = 0, 0
        for poses, people in zip(poses_all, people_all):
            pck = metrics.pose_pck(poses, people, alpha=pck_alpha)
            vis = sum(sum(1 for j in joints if j[2]) for _, joints in people)
            if pck is not None:
                correct += pck * vis
                visible += vis
        report.pose_pck = correct / visible if visible else None
    return report
