import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatgrasp import tensorcore as tc
from heatgrasp.gradcheck import max_relative_error, numerical_gradient


def naive_bilinear(feature, x, y):
    """Per-point 4-neighbour interpolation, zero outside the map."""
    c, h, w = feature.shape
    px = (x + 1) / 2 * (w - 1)
    py = (y + 1) / 2 * (h - 1)
    j0, i0 = int(np.floor(px)), int(np.floor(py))
    out = np.zeros(c)
    for i, wi in ((i0, 1 - (py - i0)), (i0 + 1, py - i0)):
        for j, wj in ((j0, 1 - (px - j0)), (j0 + 1, px - j0)):
            if 0 <= i < h and 0 <= j < w:
                out += wi * wj * feature[:, i, j]
    return out


def fd_check(loss_fn, tensors, analytic, rng, n_probe=None):
    worst = 0.0
    for x, g in zip(tensors, analytic):
        idx = None
        if n_probe is not None and x.size > n_probe:
            idx = rng.choice(x.size, n_probe, replace=False)
        num = numerical_gradient(loss_fn, x, idx)
        worst = max(worst, max_relative_error(g, num, idx))
    return worst


class TestConv2d:
    def test_sum_of_ones(self):
        out = tc.conv2d(np.ones((1, 1, 3, 3), np.float32), np.ones((1, 1, 3, 3), np.float32),
                        np.zeros(1, np.float32))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_identity_1x1_bit_exact(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 3, 5, 7)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        out = tc.conv2d(x, w, np.zeros(3, np.float32))
        assert np.array_equal(out, x)

    @pytest.mark.parametrize("h,w,k,stride,pad", [(5, 5, 3, 1, 1), (6, 7, 3, 2, 1), (5, 4, 3, 1, 0),
                                                  (4, 4, 1, 2, 0), (3, 3, 3, 2, 0)])
    def test_output_shape(self, h, w, k, stride, pad):
        x = np.zeros((1, 2, h, w), np.float32)
        out = tc.conv2d(x, np.zeros((4, 2, k, k), np.float32), np.zeros(4, np.float32), stride, pad)
        assert out.shape == (1, 4, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)

    def test_matches_direct_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 2, 5, 6))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out = tc.conv2d(x, w, b, stride=2, pad=1)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[2]):
                for j in range(out.shape[3]):
                    ref = (xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]).sum() + b[o]
                    assert out[0, o, i, j] == pytest.approx(ref, abs=1e-12)

    def test_channel_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(1, 2, 5, 5\).*\(3, 4, 3, 3\)"):
            tc.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((3, 4, 3, 3)), np.zeros(3))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
    def test_gradient(self, stride, pad):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        out, cache = tc.conv2d_forward(x, w, b, stride, pad)
        r = rng.standard_normal(out.shape)
        grads = tc.conv2d_backward(r, cache)
        loss = lambda: float((tc.conv2d(x, w, b, stride, pad) * r).sum())
        err = fd_check(loss, [x, w, b], [grads.input, grads.params["weight"], grads.params["bias"]], rng)
        assert err < 1e-4


class TestRelu:
    def test_values(self):
        assert np.array_equal(tc.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])

    def test_positive_identity(self):
        x = np.abs(np.random.default_rng(0).standard_normal(10)) + 0.1
        assert np.array_equal(tc.relu(x), x)

    def test_gradient_away_from_zero(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 4, 4))
        x[np.abs(x) < 1e-3] = 0.5
        r = rng.standard_normal(x.shape)
        out, mask = tc.relu_forward(x)
        g = tc.relu_backward(r, mask).input
        err = fd_check(lambda: float((tc.relu(x) * r).sum()), [x], [g], rng)
        assert err < 1e-4


class TestUpsample:
    def test_constant(self):
        out = tc.upsample_bilinear_2x(np.full((1, 1, 1, 1), 5.0, np.float32))
        assert out.shape == (1, 1, 2, 2)
        assert np.all(out == 5.0)

    def test_hand_values(self):
        out = tc.upsample_bilinear_2x(np.array([[[[0.0, 2.0], [0.0, 2.0]]]]))
        assert out.shape == (1, 1, 4, 4)
        for row in out[0, 0]:
            assert np.allclose(row, [0, 0.5, 1.5, 2])

    def test_constant_preserved_any_size(self):
        out = tc.upsample_bilinear_2x(np.full((2, 3, 3, 5), -1.25))
        assert np.all(out == -1.25)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 2, 3, 4))
        out, cache = tc.upsample_bilinear_2x_forward(x)
        r = rng.standard_normal(out.shape)
        g = tc.upsample_bilinear_2x_backward(r, cache).input
        err = fd_check(lambda: float((tc.upsample_bilinear_2x(x) * r).sum()), [x], [g], rng)
        assert err < 1e-4


class TestGridSample:
    def test_lattice_point(self):
        rng = np.random.default_rng(5)
        f = rng.standard_normal((1, 3, 5, 7))
        i, j = 3, 2
        coords = np.array([[[2 * j / 6 - 1, 2 * i / 4 - 1]]])
        out = tc.grid_sample_bilinear(f, coords)
        assert np.allclose(out[0, :, 0], f[0, :, i, j], atol=1e-12)

    def test_midpoint(self):
        f = np.zeros((1, 1, 1, 2))
        f[0, 0, 0] = [1.0, 3.0]
        out = tc.grid_sample_bilinear(f, np.array([[[0.0, -1.0]]]))
        assert out[0, 0, 0] == pytest.approx(2.0)

    def test_far_outside_is_zero(self):
        f = np.ones((1, 2, 4, 4))
        out = tc.grid_sample_bilinear(f, np.array([[[3.0, 0.0], [0.0, -2.5]]]))
        assert np.all(out == 0)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(6)
        f = rng.standard_normal((1, 4, 9, 9))
        coords = rng.uniform(-1.2, 1.2, size=(1, 1000, 2))
        out = tc.grid_sample_bilinear(f, coords)
        ref = np.stack([naive_bilinear(f[0], x, y) for x, y in coords[0]], axis=1)
        assert np.abs(out[0] - ref).max() < 1e-6

    def test_gradient_feature_and_coords(self):
        rng = np.random.default_rng(7)
        f = rng.standard_normal((2, 3, 5, 6))
        coords = rng.uniform(-1.1, 1.1, size=(2, 20, 2))
        out, cache = tc.grid_sample_bilinear_forward(f, coords)
        r = rng.standard_normal(out.shape)
        g = tc.grid_sample_bilinear_backward(r, cache)
        loss = lambda: float((tc.grid_sample_bilinear(f, coords) * r).sum())
        err = fd_check(loss, [f, coords], [g.input, g.params["coords"]], rng)
        assert err < 1e-4


class TestLinear:
    def test_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert np.array_equal(tc.linear(x, np.eye(4), np.zeros(4)), x)

    def test_hand(self):
        out = tc.linear(np.array([[1.0, 2.0]]), np.array([[1.0, 1.0]]), np.array([0.5]))
        assert out.tolist() == [[3.5]]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            tc.linear(np.zeros((2, 3)), np.zeros((4, 5)), np.zeros(4))

    def test_gradient(self):
        rng = np.random.default_rng(8)
        x, w, b = rng.standard_normal((5, 7)), rng.standard_normal((3, 7)), rng.standard_normal(3)
        out, cache = tc.linear_forward(x, w, b)
        r = rng.standard_normal(out.shape)
        g = tc.linear_backward(r, cache)
        err = fd_check(lambda: float((tc.linear(x, w, b) * r).sum()), [x, w, b],
                       [g.input, g.params["weight"], g.params["bias"]], rng)
        assert err < 1e-4


class TestActivationsAndLosses:
    def test_sigmoid_zero(self):
        assert tc.sigmoid(np.array([0.0]))[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = tc.sigmoid(np.array([-1000.0, 1000.0], dtype=np.float32))
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0 and out[1] == 1.0

    def test_bce_perfect_prediction(self):
        t = np.array([0, 1, 1, 0, 1], dtype=np.float32)
        assert tc.bce_loss(t.copy(), t) <= 1.2e-7

    def test_sigmoid_gradient(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal(12)
        r = rng.standard_normal(12)
        out, cache = tc.sigmoid_forward(x)
        g = tc.sigmoid_backward(r, cache).input
        assert fd_check(lambda: float((tc.sigmoid(x) * r).sum()), [x], [g], rng) < 1e-4

    def test_bce_gradient(self):
        rng = np.random.default_rng(10)
        p = rng.uniform(0.05, 0.95, 20)
        t = rng.uniform(0, 1, 20)
        _, cache = tc.bce_loss_forward(p, t)
        g = tc.bce_loss_backward(1.0, cache).input
        assert fd_check(lambda: tc.bce_loss(p, t), [p], [g], rng) < 1e-4

    def test_smooth_l1_gradient(self):
        rng = np.random.default_rng(11)
        p = rng.standard_normal(30) * 0.3
        t = rng.standard_normal(30) * 0.3
        d = p - t
        # keep away from the |d| = beta seam where the second derivative jumps
        t[np.abs(np.abs(d) - 0.1) < 1e-3] += 0.05
        _, cache = tc.smooth_l1_loss_forward(p, t, 0.1)
        g = tc.smooth_l1_loss_backward(1.0, cache).input
        assert fd_check(lambda: tc.smooth_l1_loss(p, t, 0.1), [p], [g], rng) < 1e-4

    def test_smooth_l1_values(self):
        assert tc.smooth_l1_loss(np.array([0.05]), np.array([0.0]), 0.1) == pytest.approx(0.0125)
        assert tc.smooth_l1_loss(np.array([1.0]), np.array([0.0]), 0.1) == pytest.approx(0.95)


class TestSgd:
    def test_zero_gradient(self):
        p = {"w": np.array([1.0, 2.0], np.float32)}
        new, _ = tc.sgd_step(p, {"w": np.zeros(2, np.float32)}, 0.1, 0.9)
        assert np.array_equal(new["w"], p["w"])

    def test_scalar(self):
        new, _ = tc.sgd_step({"p": np.array(1.0)}, {"p": np.array(2.0)}, 0.1, 0.0)
        assert float(new["p"]) == pytest.approx(0.8)

    def test_momentum_two_steps(self):
        p, v = {"p": np.array(0.0)}, None
        for _ in range(2):
            p, v = tc.sgd_step(p, {"p": np.array(1.0)}, 0.1, 0.9, v)
        assert float(p["p"]) == pytest.approx(-0.29)

    def test_nan_rejected(self):
        with pytest.raises(FloatingPointError, match="'w'"):
            tc.sgd_step({"w": np.zeros(2)}, {"w": np.array([0.0, np.nan])}, 0.1)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        p = {"a": rng.standard_normal((3, 3)).astype(np.float32)}
        g = {"a": rng.standard_normal((3, 3)).astype(np.float32)}
        a1, _ = tc.sgd_step(p, g, 0.01, 0.5)
        a2, _ = tc.sgd_step(p, g, 0.01, 0.5)
        assert a1["a"].tobytes() == a2["a"].tobytes()


class TestWeightFile:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"enc.w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
                  "b": rng.standard_normal(4).astype(np.float32),
                  "ünï": np.array([np.float32(1e-38), -0.0, np.inf], np.float32)}
        path = tmp_path / "w.e3gw"
        tc.save_weights(path, params)
        back = tc.load_weights(path)
        assert set(back) == set(params)
        for k in params:
            assert back[k].shape == params[k].shape
            assert back[k].tobytes() == params[k].tobytes()
        tc.save_weights(tmp_path / "again.e3gw", back)
        assert (tmp_path / "again.e3gw").read_bytes() == path.read_bytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "w.e3gw"
        tc.save_weights(path, {"ab": np.array([[1.0, 2.0]], np.float32)})
        raw = path.read_bytes()
        expected = (b"E3GW" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
                    + (2).to_bytes(2, "little") + b"ab" + bytes([2])
                    + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                    + np.array([1.0, 2.0], "<f4").tobytes())
        assert raw == expected

    def test_corrupt(self, tmp_path):
        path = tmp_path / "bad.e3gw"
        path.write_bytes(b"XXXX" + bytes(8))
        with pytest.raises(tc.WeightFormatError):
            tc.load_weights(path)
        tc.save_weights(path, {"a": np.ones(10, np.float32)})
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(tc.WeightFormatError):
            tc.load_weights(path)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7), st.integers(0, 2**31 - 1))
def test_ops_are_pure(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    wt = rng.standard_normal((2, c, 3, 3)).astype(np.float32)
    b = rng.standard_normal(2).astype(np.float32)
    coords = rng.uniform(-1, 1, (n, 5, 2)).astype(np.float32)
    for fn in (lambda: tc.conv2d(x, wt, b, 1, 1), lambda: tc.upsample_bilinear_2x(x),
               lambda: tc.grid_sample_bilinear(x, coords), lambda: tc.sigmoid(x)):
        assert fn().tobytes() == fn().tobytes()
