"""Shared-backbone multitask network: a configurable micro-backbone with
any subset of detection / segmentation / pose heads, parameter counting,
and a bit-exact weight file format."""

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, RunningStats

WEIGHT_MAGIC = b"MCNW"
WEIGHT_VERSION = 1
HEATMAP_BIAS_INIT = T.logit(0.01)
TASKS = ("detection", "segmentation", "pose")


class WeightFormatError(ValueError):
    """Weight file is malformed (bad magic, version, or truncation)."""


@dataclass
class BackboneConfig:
    stage_widths: tuple = (16, 32, 64, 64)
    stage_strides: tuple = (1, 2, 1, 1)
    block_depth: int = 2
    stem_stride: int = 2
    head_channels: int = 16
    norm: str = "batch"  # "batch" | "affine"

    @property
    def output_stride(self):
        s = self.stem_stride
        for st in self.stage_strides:
            s *= st
        return s

    def validate(self):
        if len(self.stage_widths) != len(self.stage_strides):
            raise ValueError("stage widths and strides must align")
        if self.block_depth < 1 or self.stem_stride < 1:
            raise ValueError("invalid backbone depths/strides")
        if self.norm not in ("batch", "affine"):
            raise ValueError(f"unknown norm {self.norm!r}")


@dataclass
class HeadConfig:
    tasks: frozenset = frozenset({"detection"})
    class_mode: str = "multiclass"  # "single-class" | "multiclass"
    num_classes: int = 4
    num_keypoints: int = 5
    seg_resolution: int = 128
    output_stride: int = 4

    def __post_init__(self):
        self.tasks = frozenset(self.tasks)

    def validate(self, allow_unpaired_pose=False):
        unknown = self.tasks - set(TASKS)
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        if not self.tasks:
            raise ValueError("at least one task required")
        if ("pose" in self.tasks and "detection" not in self.tasks
                and not allow_unpaired_pose):
            raise ValueError(
                "pose requires detection: detections instantiate poses")
        if self.class_mode == "single-class" and self.num_classes != 1:
            raise ValueError("single-class mode requires num_classes == 1")
        if self.num_classes < 1 or self.num_keypoints < 1:
            raise ValueError("class/keypoint counts must be >= 1")


@dataclass
class HeadOutputs:
    center_heatmap: Tensor = None   # [N,C,h,w] in (0,1)
    size_map: Tensor = None         # [N,2,h,w]
    offset_map: Tensor = None       # [N,2,h,w]
    keypoint_heatmap: Tensor = None  # [N,K,h,w] in (0,1)
    keypoint_offset: Tensor = None  # [N,2,h,w]
    joint_regression: Tensor = None  # [N,2K,h,w]
    seg_softmax: Tensor = None      # [N,C+1,S,S]


def _he_conv(rng, cout, cin, k, dtype):
    std = np.sqrt(2.0 / (cin * k * k))
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(dtype)


class MCNModel:
    """Realized layer graph: named parameters + running norm statistics."""

    def __init__(self, backbone, heads, params, norm_state):
        self.backbone = backbone
        self.heads = heads
        self.params = params          # name -> Tensor (requires_grad)
        self.norm_state = norm_state  # name -> RunningStats

    # -- construction -------------------------------------------------------

    @staticmethod
    def _conv_names(prefix):
        return f"{prefix}.weight", f"{prefix}.bias"

    @classmethod
    def build(cls, backbone, heads, seed, dtype=np.float32,
              allow_unpaired_pose=False):
        backbone.validate()
        heads.validate(allow_unpaired_pose)
        if backbone.output_stride != heads.output_stride:
            raise ValueError(
                f"backbone stride {backbone.output_stride} != "
                f"head stride {heads.output_stride}")

        params = {}
        norm_state = {}

        def add_conv(rng, prefix, cin, cout, k, bias_init=0.0):
            wname, bname = cls._conv_names(prefix)
            params[wname] = Tensor(_he_conv(rng, cout, cin, k, dtype),
                                   requires_grad=True)
            params[bname] = Tensor(np.full(cout, bias_init, dtype),
                                   requires_grad=True)

        def add_norm(prefix, c):
            params[f"{prefix}.gamma"] = Tensor(np.ones(c, dtype),
                                               requires_grad=True)
            params[f"{prefix}.beta"] = Tensor(np.zeros(c, dtype),
                                              requires_grad=True)
            if backbone.norm == "batch":
                norm_state[prefix] = RunningStats(c, dtype)

        # backbone params are drawn first from the bare seed, so they are
        # bit-identical for every head configuration sharing this config
        rng = np.random.default_rng(seed)
        cin = 3
        add_conv(rng, "backbone.stem.conv", cin, backbone.stage_widths[0], 3)
        add_norm("backbone.stem.norm", backbone.stage_widths[0])
        cin = backbone.stage_widths[0]
        for si, width in enumerate(backbone.stage_widths):
            for bi in range(backbone.block_depth):
                prefix = f"backbone.stage{si}.block{bi}"
                add_conv(rng, f"{prefix}.conv", cin, width, 3)
                add_norm(f"{prefix}.norm", width)
                cin = width
        trunk = cin

        def add_branch(rng, prefix, out_ch, bias_init=0.0):
            add_conv(rng, f"{prefix}.conv0", trunk, backbone.head_channels, 3)
            add_conv(rng, f"{prefix}.conv1", backbone.head_channels, out_ch, 1,
                     bias_init=bias_init)

        # each head draws from its own (seed, tag) stream so adding or
        # removing heads never shifts another component's initialization
        c, k = heads.num_classes, heads.num_keypoints
        if "detection" in heads.tasks:
            hr = np.random.default_rng((seed, 1))
            add_branch(hr, "head_det.center", c, HEATMAP_BIAS_INIT)
            add_branch(hr, "head_det.size", 2)
            add_branch(hr, "head_det.offset", 2)
        if "segmentation" in heads.tasks:
            hr = np.random.default_rng((seed, 2))
            add_branch(hr, "head_seg.logits", c + 1)
        if "pose" in heads.tasks:
            hr = np.random.default_rng((seed, 3))
            add_branch(hr, "head_pose.keypoint", k, HEATMAP_BIAS_INIT)
            add_branch(hr, "head_pose.offset", 2)
            add_branch(hr, "head_pose.joint", 2 * k)

        return cls(backbone, heads, params, norm_state)

    # -- forward --------------------------------------------------------------

    def _conv(self, x, prefix, stride=1):
        wname, bname = self._conv_names(prefix)
        w = self.params[wname]
        return T.conv2d(x, w, self.params[bname], stride=stride,
                        pad=w.shape[-1] // 2)

    def _norm(self, x, prefix, mode):
        gamma = self.params[f"{prefix}.gamma"]
        beta = self.params[f"{prefix}.beta"]
        if self.backbone.norm == "affine":
            return T.channel_affine(x, gamma, beta)
        return T.batch_norm2d(x, gamma, beta, self.norm_state[prefix], mode)

    def _branch(self, x, prefix):
        y = T.relu(self._conv(x, f"{prefix}.conv0"))
        return self._conv(y, f"{prefix}.conv1")

    def forward(self, images, mode="train"):
        """Run the backbone and every configured head.

        images: [N,3,H,W] with H, W divisible by the output stride.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"unknown mode {mode!r}")
        if not isinstance(images, Tensor):
            images = Tensor(images)
        n, cin, h, w = images.shape
        stride = self.heads.output_stride
        if h % stride or w % stride:
            raise ValueError(f"input size {h}x{w} not divisible by stride {stride}")

        x = self._conv(images, "backbone.stem.conv",
                       stride=self.backbone.stem_stride)
        x = T.relu(self._norm(x, "backbone.stem.norm", mode))
        for si, width in enumerate(self.backbone.stage_widths):
            for bi in range(self.backbone.block_depth):
                prefix = f"backbone.stage{si}.block{bi}"
                s = self.backbone.stage_strides[si] if bi == 0 else 1
                x = self._conv(x, f"{prefix}.conv", stride=s)
                x = T.relu(self._norm(x, f"{prefix}.norm", mode))

        out = HeadOutputs()
        if "detection" in self.heads.tasks:
            out.center_heatmap = T.sigmoid(self._branch(x, "head_det.center"))
            out.size_map = self._branch(x, "head_det.size")
            out.offset_map = self._branch(x, "head_det.offset")
        if "pose" in self.heads.tasks:
            out.keypoint_heatmap = T.sigmoid(
                self._branch(x, "head_pose.keypoint"))
            out.keypoint_offset = self._branch(x, "head_pose.offset")
            out.joint_regression = self._branch(x, "head_pose.joint")
        if "segmentation" in self.heads.tasks:
            logits = self._branch(x, "head_seg.logits")
            s = self.heads.seg_resolution
            if logits.shape[2] != s or logits.shape[3] != s:
                logits = T.bilinear_upsample(logits, s, s)
            out.seg_softmax = T.softmax_channels(logits)
        return out

    # -- bookkeeping ------------------------------------------------------------

    def count_params(self):
        """Parameter counts: backbone, per head, and their exact total."""
        counts = {"backbone": 0}
        for name, p in self.params.items():
            group = name.split(".", 1)[0]
            if group == "backbone":
                counts["backbone"] += p.size
            else:
                counts[group] = counts.get(group, 0) + p.size
        counts["total"] = sum(v for k_, v in counts.items() if k_ != "total")
        return counts

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def state_hash(self):
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(
                self.params[name].data, dtype=np.float32).tobytes())
        return h.hexdigest()


def build_model(backbone, heads, seed, dtype=np.float32,
                allow_unpaired_pose=False):
    return MCNModel.build(backbone, heads, seed, dtype, allow_unpaired_pose)


def count_params(model):
    return model.count_params()


# -- weight serialization --------------------------------------------------------

def save_weights(model, path):
    """Write parameters as: magic, version u32, count u32, then per param
    name (u16 length + UTF-8), rank u8, dims u32 each, float32 LE data.
    A JSON config document is written alongside at <path>.json."""
    blob = bytearray()
    blob += WEIGHT_MAGIC
    blob += struct.pack("<II", WEIGHT_VERSION, len(model.params))
    for name in sorted(model.params):
        data = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<B", data.ndim)
        blob += struct.pack(f"<{data.ndim}I", *data.shape)
        blob += data.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))

    cfg = {"backbone": asdict(model.backbone),
           "heads": {**asdict(model.heads), "tasks": sorted(model.heads.tasks)}}
    with open(str(path) + ".json", "w") as fh:
        json.dump(cfg, fh, indent=2)


def load_weights(path, model):
    """Load weights saved by save_weights into ``model`` (names and shapes
    must match exactly); the model is untouched on any error."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise WeightFormatError("truncated weight file")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != WEIGHT_MAGIC:
        raise WeightFormatError("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")

    staged = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        data = np.frombuffer(take(4 * int(np.prod(dims, dtype=np.int64))),
                             dtype="<f4").reshape(dims)
        if name not in model.params:
            raise WeightFormatError(f"unexpected parameter {name!r}")
        if tuple(model.params[name].shape) != tuple(dims):
            raise WeightFormatError(
                f"shape mismatch for {name!r}: file {dims}, "
                f"model {tuple(model.params[name].shape)}")
        staged[name] = data
    missing = set(model.params) - set(staged)
    if missing:
        raise WeightFormatError(f"missing parameters: {sorted(missing)[:3]}")

    for name, data in staged.items():
        model.params[name].data = data.astype(model.params[name].dtype).copy()


def load_config(path):
    """Read the JSON config written next to a weight file."""
    with open(path) as fh:
        cfg = json.load(fh)
    backbone = BackboneConfig(**{**cfg["backbone"],
                                 "stage_widths": tuple(cfg["backbone"]["stage_widths"]),
                                 "stage_strides": tuple(cfg["backbone"]["stage_strides"])})
    heads = HeadConfig(**{**cfg["heads"], "tasks": frozenset(cfg["heads"]["tasks"])})
    return backbone, heads
