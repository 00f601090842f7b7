"""Autodiff engine: convolution oracles, primitive gradients, determinism."""

import math

import numpy as np
import pytest

from spadnet.errors import CapabilityError, DimensionError
from spadnet.tensor import (
    Tensor,
    apply_rotary,
    cat,
    check_gradients,
    conv3d,
    conv3d_transposed,
    finite_diff_grad,
    grad,
    parameter,
    softmax_lastdim,
)


# -- oracles (independent of the engine's im2col path) -----------------------


def conv3d_loop(x, w, stride, padding):
    """Direct window-sum reference: one explicit loop per output element."""
    c_out, c_in, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    xp = np.pad(x, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    do = (x.shape[1] + 2 * pd - kd) // sd + 1
    ho = (x.shape[2] + 2 * ph - kh) // sh + 1
    wo = (x.shape[3] + 2 * pw - kw) // sw + 1
    out = np.zeros((c_out, do, ho, wo), dtype=x.dtype)
    for o in range(c_out):
        for z in range(do):
            for y in range(ho):
                for t in range(wo):
                    window = xp[:, z * sd : z * sd + kd, y * sh : y * sh + kh, t * sw : t * sw + kw]
                    out[o, z, y, t] = np.sum(window * w[o])
    return out


def conv3d_transposed_loop(x, w, stride, padding):
    """Direct scatter reference for the transposed convolution."""
    c_in, c_out, kd, kh, kw = w.shape
    sd, sh, sw = stride
    pd, ph, pw = padding
    do = (x.shape[1] - 1) * sd + kd
    ho = (x.shape[2] - 1) * sh + kh
    wo = (x.shape[3] - 1) * sw + kw
    buf = np.zeros((c_out, do, ho, wo), dtype=x.dtype)
    for i in range(c_in):
        for z in range(x.shape[1]):
            for y in range(x.shape[2]):
                for t in range(x.shape[3]):
                    buf[:, z * sd : z * sd + kd, y * sh : y * sh + kh, t * sw : t * sw + kw] += (
                        x[i, z, y, t] * w[i]
                    )
    return buf[:, pd : do - pd or None, ph : ho - ph or None, pw : wo - pw or None]


def random_conv_config(rng, transposed=False):
    c_in = int(rng.integers(1, 4))
    c_out = int(rng.integers(1, 4))
    k = tuple(int(v) for v in rng.integers(1, 4, size=3))
    s = tuple(int(v) for v in rng.integers(1, 3, size=3))
    p = tuple(int(rng.integers(0, kk)) for kk in k) if not transposed else tuple(
        int(rng.integers(0, max(1, (kk + 1) // 2))) for kk in k
    )
    if transposed:
        spatial = tuple(int(rng.integers(2, 7)) for _ in range(3))
    else:
        spatial = tuple(
            max(int(rng.integers(2, 9)), kk - 2 * pp) for kk, pp in zip(k, p)
        )
        spatial = tuple(
            n if n + 2 * pp - kk >= 0 else kk for n, kk, pp in zip(spatial, k, p)
        )
    return c_in, c_out, k, s, p, spatial


class TestConvOracle:
    def test_identity_kernel(self):
        x = Tensor(np.arange(24.0).reshape(1, 2, 3, 4))
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        np.testing.assert_array_equal(conv3d(x, w).data, x.data)

    def test_all_ones_sum(self):
        x = Tensor(np.ones((1, 2, 2, 2)))
        w = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = conv3d(x, w, stride=(2, 2, 2))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 8.0

    def test_matches_loop_reference_spot(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 5, 6, 7))
        w = rng.normal(size=(3, 2, 3, 3, 3))
        got = conv3d(Tensor(x), Tensor(w), stride=(1, 2, 2), padding=(1, 1, 1)).data
        want = conv3d_loop(x, w, (1, 2, 2), (1, 1, 1))
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=0)

    def test_matches_loop_reference_randomized(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            c_in, c_out, k, s, p, spatial = random_conv_config(rng)
            x = rng.normal(size=(c_in,) + spatial)
            w = rng.normal(size=(c_out, c_in) + k)
            got = conv3d(Tensor(x), Tensor(w), stride=s, padding=p).data
            want = conv3d_loop(x, w, s, p)
            np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-13)

    def test_shape_errors(self):
        with pytest.raises(DimensionError):
            conv3d(Tensor(np.ones((2, 4, 4, 4))), Tensor(np.ones((1, 3, 1, 1, 1))))
        with pytest.raises(DimensionError):
            conv3d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((1, 1, 3, 3, 3))))
        with pytest.raises(DimensionError):
            conv3d(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 1, 1, 1, 1))), stride=(0, 1, 1))


class TestTransposedConvOracle:
    def test_broadcast_single_voxel(self):
        x = Tensor(np.full((1, 1, 1, 1), 3.5))
        w = Tensor(np.ones((1, 1, 2, 2, 2)))
        out = conv3d_transposed(x, w, stride=(2, 2, 2))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.5))

    def test_identity(self):
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        w = Tensor(np.ones((1, 1, 1, 1, 1)))
        np.testing.assert_array_equal(conv3d_transposed(x, w).data, x.data)

    def test_matches_scatter_reference_randomized(self):
        rng = np.random.default_rng(43)
        for _ in range(25):
            c_in, c_out, k, s, p, spatial = random_conv_config(rng, transposed=True)
            x = rng.normal(size=(c_in,) + spatial)
            w = rng.normal(size=(c_in, c_out) + k)
            got = conv3d_transposed(Tensor(x), Tensor(w), stride=s, padding=p)
            want = conv3d_transposed_loop(x, w, s, p)
            if min(want.shape[1:]) < 1:
                continue
            np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-13)

    @staticmethod
    def _remainders(spatial, k, s, p):
        return tuple((n + 2 * pp - kk) % ss for n, kk, ss, pp in zip(spatial, k, s, p))

    def test_is_adjoint_of_conv3d(self):
        """<conv(x,w), y> == <x, conv_T(y, w)> with output_padding = remainder."""
        rng = np.random.default_rng(44)
        for _ in range(20):
            c_in, c_out, k, s, p, spatial = random_conv_config(rng)
            x = rng.normal(size=(c_in,) + spatial)
            w = rng.normal(size=(c_out, c_in) + k)
            fwd = conv3d(Tensor(x), Tensor(w), stride=s, padding=p).data
            y = rng.normal(size=fwd.shape)
            lhs = float(np.sum(fwd * y))
            op = self._remainders(spatial, k, s, p)
            back = conv3d_transposed(Tensor(y), Tensor(w), stride=s, padding=p, output_padding=op).data
            assert back.shape == x.shape
            rhs = float(np.sum(x * back))
            assert math.isclose(lhs, rhs, rel_tol=1e-12)

    def test_equals_grad_of_conv_input(self):
        rng = np.random.default_rng(45)
        for _ in range(10):
            c_in, c_out, k, s, p, spatial = random_conv_config(rng)
            xv = rng.normal(size=(c_in,) + spatial)
            wv = rng.normal(size=(c_out, c_in) + k)
            x = Tensor(xv, requires_grad=True)
            fwd = conv3d(x, Tensor(wv), stride=s, padding=p)
            yv = rng.normal(size=fwd.shape)
            (fwd * Tensor(yv)).sum().backward()
            op = self._remainders(spatial, k, s, p)
            via_transpose = conv3d_transposed(
                Tensor(yv), Tensor(wv), stride=s, padding=p, output_padding=op
            ).data
            np.testing.assert_allclose(x.grad, via_transpose, rtol=1e-12, atol=1e-13)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(
            softmax_lastdim(Tensor(np.zeros(4))).data, np.full(4, 0.25), rtol=0, atol=1e-15
        )

    def test_shift_pair(self):
        c = 1.7
        got = softmax_lastdim(Tensor(np.array([2.0, 2.0 + c]))).data
        want = np.array([1.0 / (1.0 + math.exp(c)), math.exp(c) / (1.0 + math.exp(c))])
        np.testing.assert_allclose(got, want, rtol=1e-14)

    def test_overflow_stability(self):
        got = softmax_lastdim(Tensor(np.array([1000.0, 0.0]))).data
        assert np.all(np.isfinite(got))
        np.testing.assert_allclose(got, [1.0, 0.0], atol=1e-300)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        y = softmax_lastdim(Tensor(rng.normal(size=(4, 5, 8)) * 10)).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones((4, 5)), atol=1e-6)


class TestFiniteDiff:
    def test_square(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        g = finite_diff_grad(lambda: (x * x).sum(), [x])[0]
        assert abs(g[0] - 6.0) < 1e-9

    def test_linear_exact(self):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        for step in (1e-3, 1e-5, 1e-7):
            g = finite_diff_grad(lambda: (x * 4.0).sum(), [x], step=step)[0]
            np.testing.assert_allclose(g, [4.0, 4.0, 4.0], rtol=1e-7)


def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestPrimitiveGradients:
    """Each primitive passes central finite differences on 20 instances."""

    N = 20

    def test_add_broadcast(self):
        rng = np.random.default_rng(10)
        for _ in range(self.N):
            a, b = _rand(rng, 3, 4), _rand(rng, 4)
            ok, worst = check_gradients(lambda: ((a + b) ** 2.0).sum(), [a, b])
            assert ok, worst

    def test_mul_sub_neg(self):
        rng = np.random.default_rng(11)
        for _ in range(self.N):
            a, b = _rand(rng, 2, 5), _rand(rng, 2, 5)
            ok, worst = check_gradients(lambda: (a * b - a + (-b)).sum(), [a, b])
            assert ok, worst

    def test_pow_div(self):
        rng = np.random.default_rng(12)
        for _ in range(self.N):
            a = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
            b = Tensor(rng.uniform(0.5, 2.0, size=(4, 3)), requires_grad=True)
            ok, worst = check_gradients(lambda: (a / b + a ** 1.5).sum(), [a, b])
            assert ok, worst

    def test_exp_log(self):
        rng = np.random.default_rng(13)
        for _ in range(self.N):
            a = Tensor(rng.uniform(0.1, 3.0, size=(3, 3)), requires_grad=True)
            ok, worst = check_gradients(lambda: (a.exp().log() * a.log()).sum(), [a])
            assert ok, worst

    def test_relu_gelu(self):
        rng = np.random.default_rng(14)
        for _ in range(self.N):
            # keep points away from the relu kink where FD is ill-defined
            a = Tensor(rng.normal(size=(4, 4)) + np.sign(rng.normal(size=(4, 4))) * 0.05,
                       requires_grad=True)
            ok, worst = check_gradients(lambda: (a.relu() + a.gelu()).sum(), [a])
            assert ok, worst

    def test_maximum_const(self):
        rng = np.random.default_rng(15)
        for _ in range(self.N):
            a = Tensor(rng.uniform(0.2, 1.0, size=(3, 4)), requires_grad=True)
            ok, worst = check_gradients(lambda: a.maximum_const(0.5).log().sum(), [a])
            assert ok, worst

    def test_abs(self):
        rng = np.random.default_rng(16)
        for _ in range(self.N):
            # keep points away from the |x| kink where FD is ill-defined
            base = rng.normal(size=(4, 3))
            a = Tensor(base + np.sign(base) * 0.1, requires_grad=True)
            w = Tensor(rng.normal(size=(4, 3)))
            ok, worst = check_gradients(lambda: (a.abs() * w).sum(), [a])
            assert ok, worst

    def test_matmul_2d_and_batched(self):
        rng = np.random.default_rng(16)
        for _ in range(self.N):
            a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
            c, d = _rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)
            ok, worst = check_gradients(lambda: ((a @ b).sum() + (c @ d).sum()), [a, b, c, d])
            assert ok, worst

    def test_reshape_transpose_getitem_cat(self):
        rng = np.random.default_rng(17)
        for _ in range(self.N):
            a = _rand(rng, 2, 3, 4)
            b = _rand(rng, 2, 3, 4)

            def f():
                t = cat([a, b], axis=2).transpose((2, 0, 1)).reshape(8, 6)
                return (t[1:5, ::2] * t[2:6, 1::2]).sum()

            ok, worst = check_gradients(f, [a, b])
            assert ok, worst

    def test_sum_mean_keepdims(self):
        rng = np.random.default_rng(18)
        for _ in range(self.N):
            a = _rand(rng, 3, 4, 5)
            ok, worst = check_gradients(
                lambda: (a.mean(axis=-1, keepdims=True) * a.sum(axis=(0, 1), keepdims=True)).sum(),
                [a],
            )
            assert ok, worst

    def test_softmax(self):
        rng = np.random.default_rng(19)
        for _ in range(self.N):
            a = _rand(rng, 3, 6)
            w = _rand(rng, 3, 6)
            ok, worst = check_gradients(lambda: (softmax_lastdim(a) * w).sum(), [a, w])
            assert ok, worst

    def test_conv3d(self):
        rng = np.random.default_rng(20)
        for _ in range(self.N):
            c_in, c_out, k, s, p, spatial = random_conv_config(rng)
            x = _rand(rng, c_in, *spatial)
            w = Tensor(rng.normal(size=(c_out, c_in) + k), requires_grad=True)
            ok, worst = check_gradients(
                lambda: (conv3d(x, w, stride=s, padding=p) ** 2.0).sum(), [x, w]
            )
            assert ok, worst

    def test_conv3d_transposed(self):
        rng = np.random.default_rng(21)
        for _ in range(self.N):
            c_in, c_out, k, s, p, spatial = random_conv_config(rng, transposed=True)
            x = _rand(rng, c_in, *spatial)
            w = Tensor(rng.normal(size=(c_in, c_out) + k), requires_grad=True)
            ok, worst = check_gradients(
                lambda: (conv3d_transposed(x, w, stride=s, padding=p) ** 2.0).sum(), [x, w]
            )
            assert ok, worst

    def test_apply_rotary(self):
        rng = np.random.default_rng(22)
        for _ in range(self.N):
            x = _rand(rng, 2, 5, 8)
            ang = rng.uniform(-6, 6, size=(5, 4))
            w = Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
            ok, worst = check_gradients(lambda: (apply_rotary(x, ang) * w).sum(), [x, w])
            assert ok, worst


class TestGradApi:
    def test_returns_zeros_for_unused_param(self):
        x = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        gs = grad((x * 2.0).sum(), [x, unused])
        np.testing.assert_array_equal(gs[0], np.full(3, 2.0))
        np.testing.assert_array_equal(gs[1], np.zeros(2))

    def test_rejects_non_parameter(self):
        x = Tensor(np.ones(3))
        with pytest.raises(CapabilityError):
            grad((x * 2.0).sum(), [x])

    def test_rejects_non_scalar_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()

    def test_grad_accumulates_through_shared_subexpression(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * 3.0
        (y * y).sum().backward()
        np.testing.assert_allclose(x.grad, [36.0])


class TestDeterminism:
    def test_bit_identical_forward(self):
        def run():
            rng = np.random.default_rng(123)
            x = Tensor(rng.normal(size=(2, 6, 8, 8)))
            w = Tensor(rng.normal(size=(3, 2, 3, 3, 3)))
            y = conv3d(x, w, stride=(1, 2, 2), padding=(1, 1, 1))
            return softmax_lastdim(y.reshape(3, -1)).data.tobytes()

        assert run() == run()

    def test_parameter_seeded(self):
        a = parameter(np.random.default_rng(5), (3, 3)).data
        b = parameter(np.random.default_rng(5), (3, 3)).data
        np.testing.assert_array_equal(a, b)
