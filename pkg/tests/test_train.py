import json

import numpy as np
import pytest

from mcn import codec, tensor as T
from mcn.data import DatasetConfig, generate_dataset
from mcn.model import BackboneConfig, HeadConfig, build_model
from mcn.train import (Adam, NonFiniteLossError, SGD, TrainConfig,
                       encode_dataset, evaluate, make_optimizer, train)

ALL = frozenset({"detection", "segmentation", "pose"})
TINY = BackboneConfig(stage_widths=(4, 8), stage_strides=(1, 2),
                      block_depth=1, head_channels=4)
TINY_HEADS = HeadConfig(tasks=ALL, num_classes=4, num_keypoints=5,
                        seg_resolution=16)


def tiny_setup(seed=0, n=4):
    scenes = generate_dataset(DatasetConfig(seed=seed, scene_count=n,
                                            image_size=32))
    model = build_model(TINY, TINY_HEADS, seed=seed)
    return model, scenes


class TestOptimizers:
    def test_sgd_exact_update(self):
        p = T.Tensor(np.array([1.0, 2.0], np.float32), requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        SGD({"p": p}, lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.95, 2.1], rtol=1e-6)

    def test_sgd_skips_missing_grad(self):
        p = T.Tensor(np.array([1.0], np.float32), requires_grad=True)
        SGD({"p": p}, lr=0.1).step()
        np.testing.assert_array_equal(p.data, [1.0])

    def test_adam_first_step_is_lr_sign(self):
        # with bias correction the first update is lr * g/(|g| + ~eps)
        p = T.Tensor(np.array([1.0, 1.0], np.float32), requires_grad=True)
        p.grad = np.array([3.0, -0.01])
        Adam({"p": p}, lr=0.1).step()
        np.testing.assert_allclose(p.data, [0.9, 1.1], atol=1e-4)

    def test_adam_matches_reference_iteration(self):
        # frozen oracle: scalar Adam recurrence in plain python floats
        g_seq = [0.5, -1.0, 2.0, 0.25]
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        x, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(g_seq, 1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

        p = T.Tensor(np.array([1.0], np.float64), requires_grad=True)
        opt = Adam({"p": p}, lr=lr)
        for g in g_seq:
            p.grad = np.array([g])
            opt.step()
        np.testing.assert_allclose(p.data, [x], rtol=1e-10)

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            make_optimizer(TrainConfig(optimizer="rmsprop"), {})


class TestTrainLoop:
    def test_loss_decreases(self):
        model, scenes = tiny_setup()
        cfg = TrainConfig(steps=40, batch_size=2, learning_rate=2e-3,
                          tasks=ALL, seed=0)
        log = train(model, scenes, cfg)
        first = np.mean([r["loss"]["total"] for r in log[:5]])
        last = np.mean([r["loss"]["total"] for r in log[-5:]])
        assert last < first

    def test_deterministic_given_seed(self):
        cfg = TrainConfig(steps=10, batch_size=2, tasks=ALL, seed=3)
        hashes = []
        for _ in range(2):
            model, scenes = tiny_setup(seed=1)
            train(model, scenes, cfg)
            hashes.append(model.state_hash())
        assert hashes[0] == hashes[1]

    def test_different_seed_differs(self):
        model_a, scenes = tiny_setup(seed=1)
        model_b = build_model(TINY, TINY_HEADS, seed=1)
        train(model_a, scenes, TrainConfig(steps=10, batch_size=2,
                                           tasks=ALL, seed=3))
        train(model_b, scenes, TrainConfig(steps=10, batch_size=2,
                                           tasks=ALL, seed=4))
        assert model_a.state_hash() != model_b.state_hash()

    def test_jsonl_log(self, tmp_path):
        model, scenes = tiny_setup()
        path = tmp_path / "log.jsonl"
        cfg = TrainConfig(steps=5, batch_size=2, tasks=ALL, seed=0)
        train(model, scenes, cfg, log_path=str(path))
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 5
        rec = json.loads(lines[2])
        assert rec["step"] == 3
        assert set(rec["loss"]) >= {"center", "size", "off", "seg", "total"}
        assert rec["lr"] == cfg.learning_rate

    def test_checkpoint_callback_interval(self):
        model, scenes = tiny_setup()
        seen = []
        cfg = TrainConfig(steps=6, batch_size=2, tasks=ALL, seed=0,
                          eval_interval=2)
        train(model, scenes, cfg,
              checkpoint_fn=lambda m, step: seen.append(step))
        assert seen == [2, 4, 6]

    def test_inactive_head_params_untouched(self):
        model, scenes = tiny_setup()
        before = {k: v.data.copy() for k, v in model.params.items()}
        cfg = TrainConfig(steps=5, batch_size=2, seed=0,
                          tasks=frozenset({"detection"}))
        train(model, scenes, cfg)
        changed = backbone_changed = False
        for name, p in model.params.items():
            if name.startswith(("head_seg.", "head_pose.")):
                np.testing.assert_array_equal(p.data, before[name])
            elif name.startswith("backbone."):
                backbone_changed |= not np.array_equal(p.data, before[name])
            else:
                changed |= not np.array_equal(p.data, before[name])
        assert changed and backbone_changed

    def test_batch_one_requires_affine(self):
        model, scenes = tiny_setup()
        with pytest.raises(ValueError):
            train(model, scenes, TrainConfig(steps=1, batch_size=1,
                                             tasks=ALL, seed=0))

    def test_non_finite_loss_raises_with_step(self):
        model, scenes = tiny_setup()
        model.params["backbone.stem.conv.weight"].data[:] = np.nan
        cfg = TrainConfig(steps=3, batch_size=2, tasks=ALL, seed=0)
        with pytest.raises(NonFiniteLossError) as ei:
            train(model, scenes, cfg)
        assert ei.value.step == 1

    def test_encode_dataset_matches_per_scene(self):
        _, scenes = tiny_setup()
        cached = encode_dataset(scenes, TINY_HEADS)
        direct = codec.encode_targets(scenes[0].annotation, TINY_HEADS)
        np.testing.assert_array_equal(cached[0].center_gt, direct.center_gt)


class TestEvaluate:
    def test_perfect_report_from_targets(self):
        # feed ground-truth-derived outputs through the decoders via a stub
        _, scenes = tiny_setup(seed=2)

        class Stub:
            heads = TINY_HEADS

            def forward(self, images, mode="eval"):
                return codec.targets_as_outputs(
                    codec.encode_targets(self.scene.annotation, TINY_HEADS),
                    TINY_HEADS)

        stub = Stub()
        reports = []
        for scene in scenes:
            stub.scene = scene
            reports.append(evaluate(stub, [scene]))
        assert all(r.det_map_50 is None or r.det_map_50 >= 0.99
                   for r in reports)
        assert all(r.seg_miou >= 0.9 for r in reports)

    def test_untrained_model_scores_poorly_but_runs(self):
        model, scenes = tiny_setup(seed=5)
        report = evaluate(model, scenes)
        d = report.as_dict()
        assert set(d) == {"seg_miou", "det_map", "det_map_50", "pose_pck",
                          "per_class_ap", "counts"}
        assert report.seg_miou is not None

    def test_evaluate_does_not_mutate(self):
        model, scenes = tiny_setup(seed=6)
        before = model.state_hash()
        stats_before = {k: (s.mean.copy(), s.var.copy())
                        for k, s in model.norm_state.items()}
        evaluate(model, scenes)
        assert model.state_hash() == before
        for k, (m, v) in stats_before.items():
            np.testing.assert_array_equal(model.norm_state[k].mean, m)
            np.testing.assert_array_equal(model.norm_state[k].var, v)

    def test_absent_tasks_report_none(self):
        model = build_model(TINY, HeadConfig(tasks=frozenset({"detection"}),
                                             num_classes=4), seed=0)
        scenes = generate_dataset(DatasetConfig(seed=0, scene_count=2,
                                                image_size=32))
        report = evaluate(model, scenes)
        assert report.seg_miou is None and report.pose_pck is None
        assert report.det_map is not None or report.counts["gt_boxes"] >= 0
