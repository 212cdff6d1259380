import numpy as np
import pytest

from mono3d.align import (OffsetField, align_conv, center_align_offsets, export_offsets_csv,
                          select_best_anchor, shape_align_offsets)
from mono3d.ops import ConvSpec, conv2d
from mono3d.tensor import Tensor


def tap_offset(h_a, w_a, stride, kh, kw, i, j):
    """Independent one-line evaluator of the per-tap offset formula."""
    dy = (h_a / (stride * kh) - 1.0) * (i - kh / 2.0 + 0.5)
    dx = (w_a / (stride * kw) - 1.0) * (j - kw / 2.0 + 0.5)
    return dy, dx


class TestShapeAlign:
    def test_randomized_table(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            kh, kw = rng.choice([1, 3, 5]), rng.choice([1, 3, 5])
            stride = int(rng.choice([1, 2, 4, 8, 16]))
            H, W = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            hw = rng.uniform(1.0, 400.0, size=(H, W, 2))
            field = shape_align_offsets(hw, stride, (kh, kw))
            h0, w0 = rng.integers(0, H), rng.integers(0, W)
            i, j = rng.integers(0, kh), rng.integers(0, kw)
            dy, dx = tap_offset(hw[h0, w0, 0], hw[h0, w0, 1], stride, kh, kw, i, j)
            got = field.offsets.data[h0, w0, i * kw + j]
            assert abs(got[0] - dy) <= 1e-12
            assert abs(got[1] - dx) <= 1e-12

    def test_antisymmetric_in_taps(self):
        hw = np.full((2, 3, 2), 57.0)
        off = shape_align_offsets(hw, 8, (3, 3)).offsets.data
        for i in range(3):
            for j in range(3):
                fwd = off[:, :, i * 3 + j]
                rev = off[:, :, (2 - i) * 3 + (2 - j)]
                np.testing.assert_allclose(fwd, -rev, atol=1e-15)

    def test_scale_free_in_anchor_and_stride(self):
        # scaling both the anchor and the stride leaves the offsets unchanged
        hw = np.full((1, 1, 2), 48.0)
        a = shape_align_offsets(hw, 8, (3, 3)).offsets.data
        b = shape_align_offsets(hw * 4.0, 32, (3, 3)).offsets.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_anchor_equal_to_kernel_extent_is_identity(self):
        # h_a = S * kh makes the taps land on the plain conv grid
        hw = np.full((2, 2, 2), 24.0)
        off = shape_align_offsets(hw, 8, (3, 3)).offsets.data
        np.testing.assert_array_equal(off, 0.0)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError, match="positive"):
            shape_align_offsets(np.zeros((1, 1, 2)), 8)
        with pytest.raises(ValueError, match="stride"):
            shape_align_offsets(np.ones((1, 1, 2)), 0)


class TestSelectBestAnchor:
    def test_picks_argmax(self):
        scores = np.zeros((1, 2, 3))
        scores[0, 0, 2] = 0.9
        scores[0, 1, 0] = 0.8
        sizes = np.array([[10.0, 20.0], [30.0, 40.0], [50.0, 60.0]])
        out = select_best_anchor(scores, sizes)
        np.testing.assert_array_equal(out[0, 0], [60.0, 50.0])  # (h, w) of template 2
        np.testing.assert_array_equal(out[0, 1], [20.0, 10.0])

    def test_ties_take_lowest_index(self):
        scores = np.full((1, 1, 4), 0.5)
        sizes = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(select_best_anchor(scores, sizes)[0, 0], [2.0, 1.0])

    def test_mismatched_templates(self):
        with pytest.raises(ValueError, match="templates"):
            select_best_anchor(np.zeros((1, 1, 3)), np.ones((2, 2)))


class TestCenterAlign:
    def test_known_residual(self):
        res = np.zeros((1, 1, 2))
        res[0, 0] = [4.0, -8.0]  # (x_r, y_r)
        off = center_align_offsets(res, 8, (1, 1)).offsets.data
        np.testing.assert_array_equal(off[0, 0, 0], [-1.0, 0.5])  # (dy, dx)

    def test_replicated_over_taps(self):
        rng = np.random.default_rng(0)
        res = rng.normal(size=(3, 4, 2))
        off = center_align_offsets(res, 4, (3, 3)).offsets.data
        assert off.shape == (3, 4, 9, 2)
        for t in range(9):
            np.testing.assert_array_equal(off[:, :, t], off[:, :, 0])

    def test_linearity(self):
        rng = np.random.default_rng(1)
        r1, r2 = rng.normal(size=(2, 2, 2)), rng.normal(size=(2, 2, 2))
        o1 = center_align_offsets(r1, 8).offsets.data
        o2 = center_align_offsets(r2, 8).offsets.data
        o12 = center_align_offsets(r1 + 2.0 * r2, 8).offsets.data
        np.testing.assert_allclose(o12, o1 + 2.0 * o2, atol=1e-12)

    def test_gradient_reaches_residuals(self):
        res = Tensor(np.zeros((2, 2, 2)), requires_grad=True)
        field = center_align_offsets(res, 8, (1, 1))
        field.offsets.sum().backward()
        # each residual component feeds exactly one offset slot, scaled by 1/S
        np.testing.assert_allclose(res.grad, 1.0 / 8.0)


class TestAlignConv:
    def test_zero_offsets_bit_identical_to_conv2d(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 3, 6, 8)))
        spec = ConvSpec.init_random(3, 4, (3, 3), 1, 1, rng=rng)
        spec.bias.data[:] = rng.normal(size=4)
        field = OffsetField.zeros((6, 8), (3, 3))
        assert np.array_equal(align_conv(x, spec, field).data, conv2d(x, spec).data)

    def test_integer_offsets_shift_the_receptive_field(self):
        # a uniform (0, +1) offset equals plain conv on the left-shifted input
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 2, 5, 7))
        spec = ConvSpec.init_random(2, 3, (3, 3), 1, 1, rng=rng)
        off = np.zeros((5, 7, 9, 2))
        off[..., 1] = 1.0
        got = align_conv(Tensor(x), spec, OffsetField(Tensor(off), (3, 3))).data
        shifted = np.zeros_like(x)
        shifted[..., :-1] = x[..., 1:]
        want = conv2d(Tensor(shifted), spec).data
        # boundary columns read different zero-padding; compare the interior
        np.testing.assert_allclose(got[..., 1:-2], want[..., 1:-2], atol=1e-12)

    def test_requires_same_padding(self):
        spec = ConvSpec(1, 1, (3, 3), padding=0)
        field = OffsetField.zeros((4, 4), (3, 3))
        with pytest.raises(ValueError, match="same-padding"):
            align_conv(Tensor(np.ones((1, 1, 4, 4))), spec, field)

    def test_rejects_even_kernel(self):
        spec = ConvSpec(1, 1, (2, 2), padding=1)
        field = OffsetField.zeros((4, 4), (2, 2))
        with pytest.raises(ValueError, match="odd"):
            align_conv(Tensor(np.ones((1, 1, 4, 4))), spec, field)

    def test_offset_field_validation(self):
        with pytest.raises(ValueError, match="does not match kernel"):
            OffsetField(Tensor(np.zeros((2, 2, 4, 2))), (3, 3))
        bad = np.zeros((2, 2, 9, 2))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            OffsetField(Tensor(bad), (3, 3))


def test_export_offsets_csv(tmp_path):
    field = shape_align_offsets(np.full((2, 2, 2), 48.0), 8, (3, 3))
    path = tmp_path / "off.csv"
    export_offsets_csv(field, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("h,w,dy0,dx0")
    assert len(lines) == 1 + 4
    vals = [float(v) for v in lines[1].split(",")]
    assert vals[:2] == [0.0, 0.0]
    dy, dx = tap_offset(48.0, 48.0, 8, 3, 3, 0, 0)
    assert vals[2] == pytest.approx(dy, abs=1e-9)
    assert vals[3] == pytest.approx(dx, abs=1e-9)
