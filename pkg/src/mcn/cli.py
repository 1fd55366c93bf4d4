"""Command-line surface: generate data, train, infer with overlays, and
benchmark. Every run writes a manifest into its output directory before
doing any work; exit codes are 0 success, 1 runtime failure, 2 usage error.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__, codec, data, tensor as T
from .bench import compare_mcn_vs_stn
from .losses import LossWeights
from .model import (BackboneConfig, HeadConfig, build_model, load_config,
                    load_weights, save_weights)
from .overlay import render_overlay
from .selftest import run_selftest
from .train import TrainConfig, evaluate, train

TASK_ALIASES = {"det": "detection", "seg": "segmentation", "pose": "pose",
                "detection": "detection", "segmentation": "segmentation"}


class UsageError(Exception):
    pass


def _parse_tasks(spec):
    tasks = set()
    for name in spec.split(","):
        name = name.strip()
        if name not in TASK_ALIASES:
            raise UsageError(f"unknown task {name!r}")
        tasks.add(TASK_ALIASES[name])
    return frozenset(tasks)


def strict_mode():
    return os.environ.get("MCN_STRICT", "") == "1"


def write_manifest(out_dir, command, args):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {"command": command, "args": args,
                "seed": args.get("seed"), "version": __version__,
                "out": out_dir, "strict": strict_mode()}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# -- gen ----------------------------------------------------------------------

def cmd_gen(args):
    if args["scenes"] < 1:
        raise UsageError("--scenes must be >= 1")
    if args["classes"] < 1:
        raise UsageError("--classes must be >= 1")
    out = args["out"]
    write_manifest(out, "gen", args)
    cfg = data.DatasetConfig(image_size=args["size"],
                             num_classes=args["classes"],
                             max_objects=args["max_objects"],
                             seed=args["seed"], scene_count=args["scenes"],
                             no_collision=args["no_collision"])
    scenes = data.generate_dataset(cfg)
    data.save_annotations(scenes, os.path.join(out, "annotations.json"),
                          image_dir=out)
    with open(os.path.join(out, "dataset.json"), "w") as fh:
        json.dump({"num_classes": cfg.num_classes,
                   "num_keypoints": cfg.num_keypoints,
                   "image_size": cfg.image_size}, fh)
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


# -- train ----------------------------------------------------------------------

def _load_dataset(data_dir):
    meta_path = os.path.join(data_dir, "dataset.json")
    if not os.path.exists(meta_path):
        raise UsageError(f"no dataset.json in {data_dir}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    scenes = data.load_annotations(os.path.join(data_dir, "annotations.json"),
                                   image_dir=data_dir)
    return scenes, meta


def cmd_train(args):
    try:
        tasks = _parse_tasks(args["tasks"])
        heads_probe = HeadConfig(tasks=tasks, num_classes=1)
    except ValueError as exc:
        raise UsageError(str(exc))
    if "pose" in tasks and "detection" not in tasks:
        raise UsageError("pose requires detection: poses are instantiated "
                         "from person detections")

    out = args["out"]
    write_manifest(out, "train", args)
    scenes, meta = _load_dataset(args["data"])

    single = args["classes"] == "single"
    num_classes = 1 if single else meta["num_classes"]
    if single:
        for s in scenes:
            bad = [b for b in s.annotation.boxes if b[0] != 1]
            if bad:
                raise UsageError("--classes single needs a person-only "
                                 "dataset (generate with --classes 1)")

    heads = HeadConfig(
        tasks=tasks,
        class_mode="single-class" if single else "multiclass",
        num_classes=num_classes, num_keypoints=meta["num_keypoints"],
        seg_resolution=args["seg_res"])
    # one stride-2 stage (plus the stride-2 stem) keeps the trunk at
    # output stride 4 regardless of how many stages were requested
    widths = tuple(args["widths"])
    strides = [1] * len(widths)
    strides[min(1, len(widths) - 1)] = 2
    backbone = BackboneConfig(
        stage_widths=widths,
        stage_strides=tuple(strides),
        block_depth=args["depth"],
        norm="affine" if args["batch"] == 1 else "batch")
    model = build_model(backbone, heads, seed=args["seed"])

    cfg = TrainConfig(steps=args["steps"], batch_size=args["batch"],
                      learning_rate=args["lr"], seed=args["seed"],
                      tasks=tasks, weights=LossWeights(),
                      eval_interval=args["eval_interval"])

    def checkpoint(model_, step):
        save_weights(model_, os.path.join(out, f"checkpoint_{step:06d}.mcnw"))

    train(model, scenes, cfg, log_path=os.path.join(out, "train_log.jsonl"),
          checkpoint_fn=checkpoint if cfg.eval_interval else None)

    final = os.path.join(out, "final.mcnw")
    save_weights(model, final)
    report = evaluate(model, scenes, cfg)
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(report.as_dict(), fh, indent=2)
    print(f"final checkpoint: {final}")
    print(json.dumps(report.as_dict()))
    return 0


# -- infer ----------------------------------------------------------------------

def cmd_infer(args):
    out = args["out"]
    write_manifest(out, "infer", args)

    image = data.read_ppm(args["input"])
    if args.get("render_json"):
        with open(args["render_json"]) as fh:
            pred = json.load(fh)
        dets = [codec.Detection(d["class"], d["score"], d["cx"], d["cy"],
                                d["w"], d["h"]) for d in pred["detections"]]
        poses = [codec.PoseInstance(
            codec.Detection(p["detection"]["class"], p["detection"]["score"],
                            p["detection"]["cx"], p["detection"]["cy"],
                            p["detection"]["w"], p["detection"]["h"]),
            [tuple(j) for j in p["joints"]], p["confidences"])
            for p in pred["poses"]]
        seg_ids = (np.array(data.rle_decode(pred["seg_rle"], pred["seg_size"],
                                            pred["seg_size"]))
                   if pred.get("seg_rle") else None)
    else:
        model_path = args["model"]
        backbone, heads = load_config(model_path + ".json")
        model = build_model(backbone, heads, seed=0)
        load_weights(model_path, model)

        stride = heads.output_stride
        h, w = image.shape[1:]
        if h % stride or w % stride:
            raise UsageError(f"image size {h}x{w} not divisible by "
                             f"model stride {stride}")
        with T.no_grad():
            outputs = model.forward(T.Tensor(image[None]), mode="eval")
        dets, poses, seg_ids = [], [], None
        if "detection" in heads.tasks:
            dets = codec.decode_detections(outputs, stride=stride,
                                           score_threshold=args["threshold"])
            if "pose" in heads.tasks:
                poses = codec.decode_poses(
                    outputs, [d for d in dets if d.class_id == 1],
                    stride=stride)
        if "segmentation" in heads.tasks:
            seg_ids = codec.decode_segmentation(outputs.seg_softmax)[0]

        pred = {"detections": [d.as_dict() for d in dets],
                "poses": [p.as_dict() for p in poses]}
        if seg_ids is not None:
            pred["seg_rle"] = data.rle_encode(seg_ids)
            pred["seg_size"] = int(seg_ids.shape[0])
        with open(os.path.join(out, "predictions.json"), "w") as fh:
            json.dump(pred, fh)

    overlay = render_overlay(image, dets, poses, seg_ids)
    data.write_ppm(os.path.join(out, "overlay.ppm"), overlay)
    print(f"wrote overlay to {os.path.join(out, 'overlay.ppm')}")
    return 0


# -- bench ----------------------------------------------------------------------

def cmd_bench(args):
    if args["repeats"] < 5:
        raise UsageError("--repeats must be >= 5")
    tasks = _parse_tasks(args["tasks"])
    heads = HeadConfig(tasks=tasks, num_classes=args["classes"],
                       seg_resolution=args["seg_res"])
    try:
        heads.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    backbone = BackboneConfig()
    report = compare_mcn_vs_stn(
        backbone, heads, input_shape=(1, 3, args["size"], args["size"]),
        warmup=args["warmup"], repeats=args["repeats"])

    print(f"{'configuration':<24}{'ms':>10}{'fps':>10}{'params':>12}")
    for name, st in report.configurations.items():
        lat = st["latency"]
        print(f"{name:<24}{lat.median_ms:>10.2f}{lat.fps:>10.1f}"
              f"{st['params']:>12}")
    print(f"latency ratio (mcn / sum stn): {report.latency_ratio:.3f}")
    print(f"param ratio   (mcn / sum stn): {report.param_ratio:.3f}")

    if args.get("json"):
        with open(args["json"], "w") as fh:
            json.dump(report.as_dict(), fh, indent=2)
    return 0


# -- selftest ---------------------------------------------------------------------

def cmd_selftest(args):
    results = run_selftest(inject_fault=args.get("inject_fault"), verbose=True)
    failed = [name for name, ok in results if not ok]
    if failed:
        print(f"selftest failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"selftest passed ({len(results)} checks)")
    return 0


# -- argument parsing ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mcn", description="multitask anchor-free perception engine")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=10)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--max-objects", dest="max_objects", type=int, default=3)
    g.add_argument("--no-collision", dest="no_collision", action="store_true")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--manifest", help="rerun from a stored manifest")
    t.add_argument("--tasks", default="det")
    t.add_argument("--classes", choices=("single", "multi"), default="multi")
    t.add_argument("--data")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--seg-res", dest="seg_res", type=int, default=32)
    t.add_argument("--widths", type=int, nargs="+", default=[16, 32, 64, 64])
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--eval-interval", dest="eval_interval", type=int, default=0)
    t.add_argument("--out")

    i = sub.add_parser("infer", help="run inference and render an overlay")
    i.add_argument("--model")
    i.add_argument("--input", required=True)
    i.add_argument("--threshold", type=float, default=0.3)
    i.add_argument("--render-json", dest="render_json",
                   help="re-render an overlay from a predictions file")
    i.add_argument("--out", required=True)

    b = sub.add_parser("bench", help="compare multitask vs single-task nets")
    b.add_argument("--tasks", default="det,seg,pose")
    b.add_argument("--classes", type=int, default=4)
    b.add_argument("--size", type=int, default=256)
    b.add_argument("--seg-res", dest="seg_res", type=int, default=128)
    b.add_argument("--repeats", type=int, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--json")

    s = sub.add_parser("selftest", help="run built-in verification checks")
    s.add_argument("--inject-fault", dest="inject_fault",
                   help=argparse.SUPPRESS)

    return parser


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer,
            "bench": cmd_bench, "selftest": cmd_selftest}


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = vars(ns)
    command = args.pop("command")

    if command == "train":
        manifest_path = args.pop("manifest", None)
        if manifest_path:
            with open(manifest_path) as fh:
                stored = json.load(fh)
            if stored.get("command") != "train":
                print("manifest is not a train manifest", file=sys.stderr)
                return 2
            args = stored["args"]
        elif not args.get("data") or not args.get("out"):
            print("train requires --data and --out (or --manifest)",
                  file=sys.stderr)
            return 2
    if command == "infer" and not args.get("model") and not args.get("render_json"):
        print("infer requires --model or --render-json", file=sys.stderr)
        return 2

    try:
        return HANDLERS[command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure -> exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
