import numpy as np
import pytest

from monopgc import numerics as nm
from monopgc.errors import DimensionError, EvaluationError
from monopgc.numerics import Tensor


def matmul_reference(a, b):
    # Independent second path: explicit triple loop.
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = nm.matmul(Tensor(np.eye(2)), a)
        np.testing.assert_allclose(out.data, a.data)

    def test_hand_case(self):
        # [[1,2],[3,4]] x [[5],[6]] = [[17],[39]], cross-checked by loop oracle
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0], [6.0]])
        out = nm.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, [[17.0], [39.0]])
        np.testing.assert_allclose(out.data, matmul_reference(a, b))

    def test_zero_case(self):
        out = nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        assert out.shape == (2, 4)
        assert np.all(out.data == 0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_random_vs_loop_oracle(self):
        rng = np.random.default_rng(7)
        with nm.check_mode():
            for _ in range(5):
                a = rng.standard_normal((4, 3))
                b = rng.standard_normal((3, 5))
                out = nm.matmul(Tensor(a), Tensor(b))
                np.testing.assert_allclose(out.data, matmul_reference(a, b), atol=1e-12)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 5, 6)).astype(np.float32)
        w = np.zeros((2, 2, 3, 3), dtype=np.float32)
        w[0, 0, 1, 1] = 1.0
        w[1, 1, 1, 1] = 1.0
        out = nm.conv2d(Tensor(x), Tensor(w))
        np.testing.assert_allclose(out.data, x, rtol=1e-6)

    def test_all_ones_on_constant(self):
        c = 3.0
        x = Tensor(np.full((1, 5, 5), c))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = nm.conv2d(x, w).data[0]
        # hand convolution: interior windows see 9 cells, corners see 4
        assert out[2, 2] == pytest.approx(9 * c)
        assert out[0, 0] == pytest.approx(4 * c)
        assert out[0, 2] == pytest.approx(6 * c)

    def test_zero_kernel(self):
        out = nm.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.zeros((2, 3, 3, 3))))
        assert np.all(out.data == 0)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            nm.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_linearity(self):
        rng = np.random.default_rng(3)
        with nm.check_mode():
            x = Tensor(rng.standard_normal((2, 6, 6)))
            y = Tensor(rng.standard_normal((2, 6, 6)))
            w = Tensor(rng.standard_normal((3, 2, 3, 3)))
            a, b = 1.7, -0.4
            lhs = nm.conv2d(Tensor(a * x.data + b * y.data), w).data
            rhs = a * nm.conv2d(x, w).data + b * nm.conv2d(y, w).data
            np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


class TestSoftmax:
    def test_uniform(self):
        out = nm.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-6)

    def test_overflow_stability(self):
        out = nm.softmax(Tensor([1000.0, 0.0]), axis=0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_hand_case(self):
        out = nm.softmax(Tensor([np.log(2.0), 0.0]), axis=0)
        np.testing.assert_allclose(out.data, [2 / 3, 1 / 3], rtol=1e-6)

    def test_slices_sum_to_one_and_positive(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((4, 5, 6)) * 10)
        for axis in range(3):
            out = nm.softmax(x, axis=axis)
            np.testing.assert_allclose(out.data.sum(axis=axis), 1.0, atol=1e-6)
            assert (out.data > 0).all()


class TestGradientCheck:
    def test_quadratic(self):
        def f(x):
            return (x * x).sum()

        err = nm.gradient_check(f, Tensor([3.0]), epsilon=1e-4)
        assert err < 1e-7

    def test_nonfinite_raises(self):
        def f(x):
            return nm.log(x).sum()

        with pytest.raises(EvaluationError):
            nm.gradient_check(f, Tensor([-1.0]))

    @staticmethod
    def _builders(rng):
        # constants are drawn once so each f is a fixed function of x
        c34 = Tensor(rng.standard_normal((3, 4)))
        m42 = Tensor(rng.standard_normal((4, 2)))
        p222 = Tensor(rng.standard_normal((2, 2, 2)))
        p223 = Tensor(rng.standard_normal((2, 2, 3)))
        p268 = Tensor(rng.standard_normal((2, 6, 8)))
        c64 = Tensor(rng.standard_normal((6, 4)))
        kern = Tensor(rng.standard_normal((3, 2, 3, 3)))
        kbias = Tensor(rng.standard_normal(3))
        c355 = Tensor(rng.standard_normal((3, 5, 5)))
        return {
            "add": (lambda x: (x + c34).sum(), (3, 4)),
            "mul": (lambda x: (x * c34).sum(), (3, 4)),
            "mul_scalar": (lambda x: (x * 2.5).sum(), (3, 4)),
            "exp": (lambda x: nm.exp(x).sum(), (3, 4)),
            "log": (lambda x: nm.log(x * x + 1.0).sum(), (3, 4)),
            "elu": (lambda x: nm.elu(x).sum(), (3, 4)),
            "relu": (lambda x: nm.relu(x).sum(), (3, 4)),
            "sigmoid": (lambda x: nm.sigmoid(x).sum(), (3, 4)),
            "matmul": (lambda x: nm.matmul(x, m42).sum(), (3, 4)),
            "softmax": (lambda x: (nm.softmax(x, axis=1) * c34).sum(), (3, 4)),
            "mean": (lambda x: nm.reduce_mean(x, axis=1).sum(), (3, 4)),
            "maxpool": (lambda x: (nm.max_pool2d(x, 2) * p222).sum(), (2, 4, 4)),
            "avgpool": (lambda x: (nm.adaptive_avg_pool2d(x, (2, 3)) * p223).sum(), (2, 5, 7)),
            "resize": (lambda x: (nm.bilinear_resize(x, (6, 8)) * p268).sum(), (2, 3, 4)),
            "concat": (lambda x: (nm.concat([x, x * 2.0], axis=0) * c64).sum(), (3, 4)),
            "reshape_transpose": (lambda x: (nm.transpose(nm.reshape(x, (4, 3)), (1, 0)) * c34.reshape(4, 3).transpose(1, 0)).sum(), (3, 4)),
            "conv2d": (lambda x: (nm.conv2d(x, kern, kbias) * c355).sum(), (2, 5, 5)),
            "division": (lambda x: ((x * c34) / (x * x + 1.0)).sum(), (3, 4)),
        }

    def test_every_kernel_matches_finite_differences(self):
        # >= 10 random trials per differentiable kernel, 64-bit mode
        for seed in range(10):
            rng = np.random.default_rng(seed * 101 + 13)
            with nm.check_mode():
                builders = self._builders(rng)
                inputs = {name: Tensor(rng.standard_normal(shape) + 0.1)
                          for name, (f, shape) in builders.items()}
            for name, (f, _) in builders.items():
                err = nm.gradient_check(f, inputs[name], epsilon=1e-5)
                assert err <= 1e-4, f"{name} seed {seed}: {err}"


class TestTapeSemantics:
    def test_double_backward_raises(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * x).sum()
        y.backward()
        with pytest.raises(RuntimeError):
            y.backward()

    def test_grad_accumulates_across_graphs(self):
        x = Tensor([2.0], requires_grad=True)
        (x * x).sum().backward()
        g1 = x.grad.copy()
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * g1)
        x.zero_grad()
        assert x.grad is None

    def test_diamond_graph_visits_once(self):
        x = Tensor([1.5], requires_grad=True)
        a = x * 2.0
        y = (a * a).sum()  # y = 4 x^2, dy/dx = 8x
        y.backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(DimensionError):
            (x * 2.0).backward()


class TestShapeDiscipline:
    def test_no_general_broadcasting(self):
        with pytest.raises(DimensionError):
            nm.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
        with pytest.raises(DimensionError):
            nm.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_scalar_broadcast_allowed(self):
        out = Tensor(np.ones((2, 3))) + 1.0
        assert np.all(out.data == 2.0)

    def test_finiteness_check(self):
        t = Tensor([1.0, np.inf])
        assert not t.is_finite()
        with pytest.raises(EvaluationError):
            t.assert_finite()


class TestModes:
    def test_dtype_switch(self):
        assert Tensor([1.0]).dtype == np.float32
        with nm.check_mode():
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32

    def test_matmul_linearity(self):
        rng = np.random.default_rng(11)
        with nm.check_mode():
            x = rng.standard_normal((3, 4))
            y = rng.standard_normal((3, 4))
            w = Tensor(rng.standard_normal((4, 2)))
            lhs = nm.matmul(Tensor(2.0 * x - 0.3 * y), w).data
            rhs = 2.0 * nm.matmul(Tensor(x), w).data - 0.3 * nm.matmul(Tensor(y), w).data
            np.testing.assert_allclose(lhs, rhs, rtol=1e-6)


class TestComposites:
    def test_absolute(self):
        x = Tensor([-2.0, 0.0, 3.5])
        np.testing.assert_allclose(nm.absolute(x).data, [2.0, 0.0, 3.5])

    def test_reciprocal_positive(self):
        x = Tensor([0.5, 2.0, 4.0])
        np.testing.assert_allclose(nm.reciprocal(x).data, [2.0, 0.5, 0.25], rtol=1e-6)

    def test_operator_chain(self):
        x = Tensor([4.0], requires_grad=True)
        y = ((x - 1.0) / 3.0).sum()
        y.backward()
        np.testing.assert_allclose(y.data, [1.0])
        np.testing.assert_allclose(x.grad, [1 / 3], rtol=1e-6)
