import numpy as np
import pytest

from dispersionlab.errors import DimensionError
from dispersionlab.posenc import DepthwiseKernel, GridSpec, lepe, rope_apply


def lepe_oracle(v, taps, height, width):
    """Direct sliding-window reference with explicit zero padding."""
    n, d = v.shape
    img = v.reshape(height, width, d)
    k = taps.shape[1]
    pad = k // 2
    out = np.zeros_like(img)
    for r in range(height):
        for c in range(width):
            for dr in range(k):
                for dc in range(k):
                    rr, cc = r + dr - pad, c + dc - pad
                    if 0 <= rr < height and 0 <= cc < width:
                        out[r, c] += img[rr, cc] * taps[:, dr, dc]
    return out.reshape(n, d)


class TestRope:
    def test_position_zero_is_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 8))
        out = rope_apply(x, GridSpec.linear(1))
        np.testing.assert_allclose(out.array, x, atol=1e-15)

    def test_norm_preservation(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((12, 10))
        out = rope_apply(x, GridSpec.linear(12)).array
        np.testing.assert_allclose(np.linalg.norm(out, axis=1),
                                   np.linalg.norm(x, axis=1), atol=1e-12)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((5, 6))
        g = GridSpec.linear(5)
        np.testing.assert_allclose(rope_apply(2.5 * x, g).array,
                                   2.5 * rope_apply(x, g).array, atol=1e-12)

    def test_inner_products_depend_on_relative_position(self):
        rng = np.random.default_rng(3)
        q_row = rng.standard_normal(8)
        k_row = rng.standard_normal(8)
        n = 16
        x_q = np.tile(q_row, (n, 1))
        x_k = np.tile(k_row, (n, 1))
        g = GridSpec.linear(n)
        rq, rk = rope_apply(x_q, g).array, rope_apply(x_k, g).array
        # all (i, j) pairs with i - j = 3 share one inner product
        vals = [rq[j + 3] @ rk[j] for j in range(n - 3)]
        assert max(vals) - min(vals) < 1e-10

    def test_odd_dimension_rejected(self):
        with pytest.raises(DimensionError):
            rope_apply(np.ones((2, 3)), GridSpec.linear(2))

    def test_2d_axial_split_relative_per_axis(self):
        rng = np.random.default_rng(4)
        row = rng.standard_normal(8)
        g = GridSpec.grid(4, 4)
        r = rope_apply(np.tile(row, (16, 1)), g).array
        # same relative (row, col) displacement -> same inner product
        a = r[0] @ r[5]   # (0,0) vs (1,1)
        b = r[5] @ r[10]  # (1,1) vs (2,2)
        assert abs(a - b) < 1e-10

    def test_positions_override(self):
        x = np.random.default_rng(5).standard_normal((3, 4))
        out = rope_apply(x, GridSpec.linear(3), positions=np.zeros(3))
        np.testing.assert_allclose(out.array, x, atol=1e-15)

    def test_grid_token_count_mismatch(self):
        with pytest.raises(DimensionError):
            rope_apply(np.ones((3, 4)), GridSpec.linear(4))


class TestLepe:
    def test_zero_kernel(self):
        v = np.random.default_rng(0).standard_normal((6, 2))
        out = lepe(v, DepthwiseKernel.zeros(2), GridSpec.grid(2, 3))
        np.testing.assert_array_equal(out.array, np.zeros_like(v))

    def test_identity_kernel(self):
        v = np.random.default_rng(1).standard_normal((9, 3))
        out = lepe(v, DepthwiseKernel.identity(3), GridSpec.grid(3, 3))
        np.testing.assert_allclose(out.array, v, atol=1e-15)

    def test_against_sliding_window_oracle(self):
        rng = np.random.default_rng(2)
        v = rng.standard_normal((16, 2))
        taps = rng.standard_normal((2, 3, 3))
        out = lepe(v, DepthwiseKernel(taps), GridSpec.grid(4, 4)).array
        np.testing.assert_allclose(out, lepe_oracle(v, taps, 4, 4), atol=1e-12)

    def test_linear_grid_is_one_row(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((5, 1))
        taps = rng.standard_normal((1, 3, 3))
        out = lepe(v, DepthwiseKernel(taps), GridSpec.linear(5)).array
        np.testing.assert_allclose(out, lepe_oracle(v, taps, 1, 5), atol=1e-12)

    def test_locality(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal((25, 2))
        taps = rng.standard_normal((2, 3, 3))
        g = GridSpec.grid(5, 5)
        base = lepe(v, DepthwiseKernel(taps), g).array
        bumped = v.copy()
        bumped[12] += 1.0  # center token (2,2)
        moved = np.abs(lepe(bumped, DepthwiseKernel(taps), g).array - base).max(axis=1) > 0
        moved_grid = moved.reshape(5, 5)
        assert moved_grid[1:4, 1:4].all()
        assert not moved_grid[0].any() and not moved_grid[4].any()
        assert not moved_grid[:, 0].any() and not moved_grid[:, 4].any()

    def test_linearity_in_values(self):
        rng = np.random.default_rng(5)
        v1, v2 = rng.standard_normal((2, 8, 2))
        taps = rng.standard_normal((2, 3, 3))
        g = GridSpec.grid(2, 4)
        kern = DepthwiseKernel(taps)
        np.testing.assert_allclose(
            lepe(v1 + v2, kern, g).array,
            lepe(v1, kern, g).array + lepe(v2, kern, g).array, atol=1e-12)

    def test_grid_mismatch(self):
        with pytest.raises(DimensionError):
            lepe(np.ones((5, 2)), DepthwiseKernel.zeros(2), GridSpec.grid(2, 3))
        with pytest.raises(DimensionError):
            lepe(np.ones((6, 2)), DepthwiseKernel.zeros(3), GridSpec.grid(2, 3))

    def test_kernel_validation_and_json(self):
        with pytest.raises(DimensionError):
            DepthwiseKernel(np.ones((2, 2, 2)))  # even size
        kern = DepthwiseKernel(np.arange(18.0).reshape(2, 3, 3))
        back = DepthwiseKernel.from_json(kern.to_json())
        np.testing.assert_array_equal(back.taps, kern.taps)
