"""Multitask anchor-free perception engine: shared-backbone detection,
semantic segmentation and pose estimation with a built-from-scratch
autodiff core, plus codecs, metrics, training and benchmarking."""

__version__ = "0.1.0"

from .tensor import Tensor, grad_check, no_grad
from .model import BackboneConfig, HeadConfig, HeadOutputs, build_model
from .codec import (SceneAnnotation, EncodedTargets, Detection, PoseInstance,
                    encode_targets, decode_detections, decode_poses,
                    decode_segmentation, gaussian_radius, render_gaussian)
from .losses import LossWeights, LossBreakdown, total_loss
from .metrics import MetricReport, box_iou, average_precision, mean_ap, \
    seg_miou, pose_pck
from .data import DatasetConfig, Scene, generate_scene
from .train import TrainConfig, train, evaluate
from .bench import BenchReport, measure_forward, compare_mcn_vs_stn
