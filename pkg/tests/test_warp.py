import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from flowreg.nn import build_regnet
from flowreg.optim import Adam
from flowreg.tensor import Tensor, grad_check
from flowreg.warp import registration_loss, smoothness, warp


def smooth_image(seed, h=16, w=16, dtype=np.float32):
    rng = np.random.default_rng(seed)
    img = gaussian_filter(rng.normal(size=(h, w)), sigma=2.0)
    img = img / (np.abs(img).max() + 1e-9)
    return img.astype(dtype)[None, None]


def const_field(dx, dy, b, h, w, dtype=np.float32):
    f = np.zeros((b, 2, h, w), dtype=dtype)
    f[:, 0] = dx
    f[:, 1] = dy
    return Tensor(f)


class TestWarp:
    def test_zero_field_is_bitwise_identity(self):
        img = Tensor(smooth_image(0))
        out = warp(img, const_field(0, 0, 1, 16, 16))
        assert np.array_equal(out.data, img.data)

    def test_integer_shift_matches_array_shift_oracle(self):
        img = Tensor(smooth_image(1))
        out = warp(img, const_field(1.0, 0.0, 1, 16, 16)).data
        # out(:, j) = img(:, j+1) away from the right border
        np.testing.assert_array_equal(out[..., :, :-1], img.data[..., :, 1:])

    @pytest.mark.parametrize("dx,dy", [(2, 0), (0, 3), (-1, 0), (0, -2), (2, -1)])
    def test_integer_shifts_both_axes(self, dx, dy):
        img = Tensor(smooth_image(2, 12, 12))
        out = warp(img, const_field(dx, dy, 1, 12, 12)).data
        h, w = 12, 12
        for i in range(max(0, -dy), min(h, h - dy)):
            for j in range(max(0, -dx), min(w, w - dx)):
                assert out[0, 0, i, j] == img.data[0, 0, i + dy, j + dx]

    def test_half_pixel_shift_on_ramp_is_neighbor_mean(self):
        w = 8
        ramp = np.tile(np.arange(w, dtype=np.float32) ** 2, (w, 1))[None, None]
        out = warp(Tensor(ramp), const_field(0.5, 0.0, 1, w, w)).data
        interior = out[0, 0, :, : w - 1]
        expected = 0.5 * (ramp[0, 0, :, : w - 1] + ramp[0, 0, :, 1:])
        np.testing.assert_allclose(interior, expected, rtol=1e-6)

    def test_shape_mismatch_raises(self):
        img = Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32))
        with pytest.raises(ValueError, match="shape mismatch"):
            warp(img, Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)))
        with pytest.raises(ValueError, match="B2HW"):
            warp(img, Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32)))

    @settings(max_examples=25, deadline=None, derandomize=True)
    @given(st.integers(0, 10_000),
           st.floats(-3, 3, allow_nan=False),
           st.floats(-3, 3, allow_nan=False))
    def test_linearity_in_image(self, seed, a, b):
        rng = np.random.default_rng(seed)
        u = Tensor(rng.normal(size=(1, 1, 8, 8)).astype(np.float64))
        v = Tensor(rng.normal(size=(1, 1, 8, 8)).astype(np.float64))
        field = Tensor((rng.normal(size=(1, 2, 8, 8)) * 1.5).astype(np.float64))
        mixed = warp(Tensor(a * u.data + b * v.data), field).data
        separate = a * warp(u, field).data + b * warp(v, field).data
        np.testing.assert_allclose(mixed, separate, atol=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_warp_gradcheck_image_and_field(self, seed):
        rng = np.random.default_rng(seed)
        img = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float64), requires_grad=True)
        # non-integer coordinates keep finite differences off interpolation kinks
        fdata = (rng.uniform(-1.5, 1.5, size=(1, 2, 6, 6)) + 0.25).astype(np.float64)
        field = Tensor(fdata, requires_grad=True)
        probe = Tensor(rng.normal(size=(1, 2, 6, 6)).astype(np.float64))
        assert grad_check(lambda t: (warp(t, field) * probe).sum(), img) < 1e-4
        assert grad_check(lambda t: (warp(img, t) * probe).sum(), field) < 1e-4


class TestSmoothness:
    def test_constant_field_is_zero(self):
        assert smoothness(const_field(3.0, -2.0, 2, 8, 8)).item() == 0.0

    def test_single_step_analytic(self):
        # one-row field, unit step in one channel: sum 1 over 2*(w-1) pairs
        w = 4
        f = np.zeros((1, 2, 1, w), dtype=np.float32)
        f[0, 0, 0, 2:] = 1.0
        assert smoothness(Tensor(f)).item() == pytest.approx(1.0 / (2 * (w - 1)))

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        f = Tensor(rng.normal(size=(1, 2, 5, 5)).astype(np.float64), requires_grad=True)
        assert grad_check(lambda t: smoothness(t), f) < 1e-4


class TestRegistrationLoss:
    def test_identical_slices_zero_init_net_zero_loss(self):
        net = build_regnet(1, seed=0)
        x = Tensor(smooth_image(3))
        loss, field = registration_loss(x, x, net)
        assert loss.item() == 0.0
        np.testing.assert_array_equal(field.data, np.zeros_like(field.data))

    @pytest.mark.parametrize("seed", range(4))
    def test_loss_non_negative(self, seed):
        net = build_regnet(1, seed=seed)
        for p in net.named_parameters().values():
            p.data = (p.data + np.random.default_rng(seed).normal(0, 0.05, p.data.shape)
                      ).astype(p.data.dtype)
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(size=(1, 1, 8, 8)).astype(np.float32))
        b = Tensor(rng.normal(size=(1, 1, 8, 8)).astype(np.float32))
        loss, _ = registration_loss(a, b, net)
        assert loss.item() >= 0.0

    def test_shape_mismatch(self):
        net = build_regnet(1, seed=0)
        with pytest.raises(ValueError, match="shape mismatch"):
            registration_loss(Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32)),
                              Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32)), net)

    def test_gradcheck_through_regnet(self):
        # randomized head so fields are non-integer and all layers carry gradient
        net = build_regnet(1, base=4, seed=2, dtype=np.float64)
        rng = np.random.default_rng(2)
        for p in net.named_parameters().values():
            p.data = p.data + rng.normal(0, 0.1, p.data.shape)
        x_t = Tensor(smooth_image(4, 8, 8, np.float64))
        x_k = Tensor(smooth_image(5, 8, 8, np.float64))

        head_bias = net.head.bias
        probe = Tensor(head_bias.data.copy(), requires_grad=True, dtype=np.float64)

        def f(t):
            net.head.bias = t
            loss, _ = registration_loss(x_t, x_k, net)
            return loss

        assert grad_check(f, probe) < 1e-4

        stem_w = net.stem.weight
        probe_w = Tensor(stem_w.data.copy(), requires_grad=True, dtype=np.float64)

        def fw(t):
            net.stem.weight = t
            loss, _ = registration_loss(x_t, x_k, net)
            return loss

        assert grad_check(fw, probe_w) < 1e-4

    def test_descent_recovers_two_pixel_shift(self):
        # optimization is its own oracle: similarity must drop below 25% of start
        x_t_np = smooth_image(6, 16, 16)
        x_k_np = np.empty_like(x_t_np)
        x_k_np[0, 0, :, :-2] = x_t_np[0, 0, :, 2:]
        x_k_np[0, 0, :, -2:] = x_t_np[0, 0, :, -1:]
        x_t, x_k = Tensor(x_t_np), Tensor(x_k_np)

        net = build_regnet(2, seed=1)
        opt = Adam(net.named_parameters())

        def similarity():
            loss, field = registration_loss(x_t, x_k, net, w_smooth=0.01)
            warped = warp(x_k, field)
            return loss, float((x_t.data - warped.data) ** 2).mean() if False else loss

        first = None
        for step in range(200):
            opt.zero_grad()
            loss, field = registration_loss(x_t, x_k, net, w_smooth=0.01)
            sim = float(((x_t.data - warp(x_k, Tensor(field.data)).data) ** 2).mean())
            if first is None:
                first = sim
            loss.backward()
            opt.step(1e-3)
        final_loss, field = registration_loss(x_t, x_k, net, w_smooth=0.01)
        final_sim = float(((x_t.data - warp(x_k, Tensor(field.data)).data) ** 2).mean())
        assert final_sim < 0.25 * first
