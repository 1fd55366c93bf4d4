"""Forward-pass latency and parameter-count comparison between one
multitask network and a composition of single-task networks."""

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import HeadConfig, build_model

DEFAULT_INPUT = (1, 3, 256, 256)
DEFAULT_WARMUP = 3
DEFAULT_REPEATS = 30


@dataclass
class LatencyStats:
    median_ms: float
    iqr_ms: float
    samples: list = field(default_factory=list)

    @property
    def fps(self):
        return 1000.0 / self.median_ms


@dataclass
class BenchReport:
    configurations: dict = field(default_factory=dict)
    latency_ratio: float = None
    param_ratio: float = None
    environment: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "configurations": {
                name: {"median_ms": st["latency"].median_ms,
                       "iqr_ms": st["latency"].iqr_ms,
                       "fps": st["latency"].fps,
                       "params": st["params"]}
                for name, st in self.configurations.items()},
            "latency_ratio": self.latency_ratio,
            "param_ratio": self.param_ratio,
            "environment": self.environment,
        }


def measure_forward(model, input_shape=DEFAULT_INPUT,
                    warmup=DEFAULT_WARMUP, repeats=DEFAULT_REPEATS, seed=0):
    """Median/IQR wall-clock latency of eval-mode forward passes on a fixed
    random input; warmup passes are not recorded."""
    if repeats < 5:
        raise ValueError("repeats must be >= 5")
    if warmup < 1:
        raise ValueError("warmup must be >= 1")
    rng = np.random.default_rng(seed)
    images = T.Tensor(rng.random(input_shape, dtype=np.float32))
    with T.no_grad():
        for _ in range(warmup):
            model.forward(images, mode="eval")
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.forward(images, mode="eval")
            samples.append((time.perf_counter() - t0) * 1000.0)
    q25, median, q75 = np.percentile(samples, (25, 50, 75))
    return LatencyStats(float(median), float(q75 - q25), samples)


def _single_task_config(heads, task):
    return HeadConfig(tasks=frozenset({task}), class_mode=heads.class_mode,
                      num_classes=heads.num_classes,
                      num_keypoints=heads.num_keypoints,
                      seg_resolution=heads.seg_resolution,
                      output_stride=heads.output_stride)


def compare_mcn_vs_stn(backbone, heads, input_shape=DEFAULT_INPUT,
                       warmup=DEFAULT_WARMUP, repeats=DEFAULT_REPEATS,
                       seed=0):
    """Build one multitask network plus one single-task network per task
    (same backbone config, fresh seeds) and report latency/param ratios.

    The composite baseline is the sum of individually measured single-task
    medians. A single-task "multitask" network is the identity case and
    reuses its own measurement on both sides (ratios exactly 1.0).
    """
    tasks = sorted(heads.tasks)
    if not tasks:
        raise ValueError("task set must be non-empty")

    report = BenchReport(environment={
        "threads": 1, "precision": "float32",
        "input_shape": list(input_shape), "repeats": repeats,
    })

    mcn = build_model(backbone, heads, seed=seed)
    mcn_lat = measure_forward(mcn, input_shape, warmup, repeats)
    mcn_params = mcn.count_params()["total"]
    report.configurations["mcn:" + "+".join(tasks)] = {
        "latency": mcn_lat, "params": mcn_params}

    if len(tasks) == 1:
        report.configurations[f"stn:{tasks[0]}"] = {
            "latency": mcn_lat, "params": mcn_params}
        report.latency_ratio = 1.0
        report.param_ratio = 1.0
        return report

    stn_ms = 0.0
    stn_params = 0
    for i, task in enumerate(tasks):
        stn = build_model(backbone, _single_task_config(heads, task),
                          seed=seed + 1 + i, allow_unpaired_pose=True)
        lat = measure_forward(stn, input_shape, warmup, repeats)
        params = stn.count_params()["total"]
        report.configurations[f"stn:{task}"] = {"latency": lat, "params": params}
        stn_ms += lat.median_ms
        stn_params += params

    report.latency_ratio = mcn_lat.median_ms / stn_ms
    report.param_ratio = mcn_params / stn_params
    return report
