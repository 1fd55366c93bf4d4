import numpy as np
import pytest

from mcn.codec import Detection, PoseInstance
from mcn.overlay import PALETTE, class_color, render_overlay, skeleton_edges


def blank(h=16, w=16):
    return np.zeros((3, h, w), np.float32)


class TestPalette:
    def test_sixteen_distinct_colors(self):
        assert PALETTE.shape == (16, 3)
        assert len({tuple(c) for c in PALETTE}) == 16
        assert PALETTE.min() >= 0 and PALETTE.max() <= 1

    def test_class_color_wraps(self):
        np.testing.assert_array_equal(class_color(3), class_color(19))


class TestRenderOverlay:
    def test_pure_no_input_mutation(self):
        img = blank()
        before = img.copy()
        render_overlay(img, [Detection(1, 0.9, 8, 8, 6, 6)])
        np.testing.assert_array_equal(img, before)

    def test_box_edges_painted(self):
        out = render_overlay(blank(), [Detection(2, 0.9, 8, 8, 6, 6)])
        color = class_color(2)
        # box spans x,y in [5, 11]
        expect = np.tile(color[:, None], (1, 7))
        np.testing.assert_allclose(out[:, 5, 5:12], expect)
        np.testing.assert_allclose(out[:, 11, 5:12], expect)
        np.testing.assert_allclose(out[:, 5:12, 5], expect)
        assert out[:, 8, 8].sum() == 0  # interior untouched

    def test_out_of_bounds_box_clipped(self):
        out = render_overlay(blank(), [Detection(1, 0.9, 0, 0, 40, 40)])
        assert out.shape == (3, 16, 16)

    def test_seg_blend_is_half(self):
        img = np.full((3, 8, 8), 0.4, np.float32)
        seg = np.zeros((8, 8), int)
        seg[2:4, 2:4] = 3
        out = render_overlay(img, seg_ids=seg)
        expect = 0.5 * 0.4 + 0.5 * class_color(3)
        np.testing.assert_allclose(out[:, 2, 2], expect, rtol=1e-6)
        np.testing.assert_allclose(out[:, 0, 0], 0.4)  # background untouched

    def test_low_res_seg_upsampled(self):
        seg = np.zeros((4, 4), int)
        seg[0, 0] = 1
        out = render_overlay(blank(16, 16), seg_ids=seg)
        # top-left 4x4 block maps to the single low-res cell
        assert (out[:, :4, :4] > 0).all()
        assert (out[:, 8:, 8:] == 0).all()

    def test_pose_markers_and_skeleton(self):
        joints = [(8, 3), (4, 8), (12, 8), (5, 13), (11, 13)]
        pose = PoseInstance(Detection(1, 0.9, 8, 8, 10, 12), joints,
                            [1.0] * 5)
        out = render_overlay(blank(), poses=[pose])
        color = class_color(1)
        for jx, jy in joints:
            np.testing.assert_allclose(out[:, jy, jx], color, rtol=1e-6)
        assert (out > 0).any(axis=0).sum() > len(joints) * 9 // 2

    def test_skeleton_edges_star_from_head(self):
        assert skeleton_edges(5) == [(0, 1), (0, 2), (0, 3), (0, 4)]

    def test_output_clipped_to_unit_range(self):
        img = np.full((3, 8, 8), 0.99, np.float32)
        out = render_overlay(img, [Detection(1, 0.9, 4, 4, 4, 4)])
        assert out.max() <= 1.0 and out.min() >= 0.0
