"""Unit tests for the reverse-mode engine: forward values against closed-form
or high-precision oracles, gradients against central finite differences.
"""

import numpy as np
import pytest

from memssl import autodiff as ad
from memssl.autodiff import Tensor, backward, grad_check
from memssl.errors import ConfigError, DegenerateEmbeddingError

RNG = np.random.default_rng(1234)


def scalarize(t: Tensor) -> Tensor:
    """Random-but-fixed linear functional to turn an op output into a scalar."""
    w = np.cos(np.arange(t.data.size, dtype=np.float64) * 0.7 + 0.3).reshape(t.data.shape)
    return ad.mean_all(ad.multiply(t, Tensor(w.astype(t.data.dtype))))


class TestGelu:
    def test_zero_fixed_point(self):
        y = ad.gelu(Tensor(np.zeros(3)))
        np.testing.assert_array_equal(y.data, 0.0)

    def test_saturation(self):
        y = ad.gelu(Tensor(np.array([10.0], dtype=np.float64)))
        assert abs(y.item() - 10.0) < 1e-6

    def test_unit_value(self):
        # high-precision erf oracle: 0.5*(1+erf(1/sqrt(2))) = 0.84134474606854294859
        y = ad.gelu(Tensor(np.array([1.0], dtype=np.float64)))
        assert abs(y.item() - 0.8413447460685429) < 1e-5

    def test_gradient(self):
        for _ in range(5):
            x = RNG.normal(size=(3, 4))
            err = grad_check(lambda t: scalarize(ad.gelu(t)), x)
            assert err < 1e-5


class TestSoftmaxRows:
    def test_uniform_input(self):
        for tau in (0.1, 1.0, 7.0):
            p = ad.softmax_rows(Tensor(np.full((2, 3), 4.2)), tau)
            np.testing.assert_allclose(p.data, 1.0 / 3.0, atol=1e-6)

    def test_closed_form(self):
        p = ad.softmax_rows(Tensor(np.array([[np.log(2.0), 0.0]], dtype=np.float64)), 1.0)
        np.testing.assert_allclose(p.data, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-6)

    def test_rows_sum_to_one_extreme_logits(self):
        x = np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4], [1e4, 1e4, 1e4]], dtype=np.float32)
        p = ad.softmax_rows(Tensor(x), 0.1)
        assert np.isfinite(p.data).all()
        np.testing.assert_allclose(p.data.sum(axis=1), 1.0, atol=1e-6)

    def test_temperature_validation(self):
        with pytest.raises(ConfigError):
            ad.softmax_rows(Tensor(np.ones((1, 2))), 0.0)
        with pytest.raises(ConfigError):
            ad.softmax_rows(Tensor(np.ones((1, 2))), -1.0)

    def test_gradient(self):
        for tau in (0.07, 1.0):
            x = RNG.normal(size=(3, 5))
            err = grad_check(lambda t: scalarize(ad.softmax_rows(t, tau)), x)
            assert err < 1e-5


class TestL2NormalizeRows:
    def test_three_four_five(self):
        y = ad.l2_normalize_rows(Tensor(np.array([[3.0, 4.0]], dtype=np.float64)))
        np.testing.assert_allclose(y.data, [[0.6, 0.8]], atol=1e-7)

    def test_idempotent(self):
        x = RNG.normal(size=(4, 6))
        once = ad.l2_normalize_rows(Tensor(x)).data
        twice = ad.l2_normalize_rows(Tensor(once)).data
        np.testing.assert_allclose(once, twice, atol=1e-6)
        np.testing.assert_allclose(np.linalg.norm(twice, axis=1), 1.0, atol=1e-5)

    def test_degenerate_row_is_an_error(self):
        x = np.array([[1.0, 0.0], [0.0, 0.0]])
        with pytest.raises(DegenerateEmbeddingError):
            ad.l2_normalize_rows(Tensor(x))

    def test_gradient_matches_finite_differences(self):
        for _ in range(5):
            x = RNG.normal(size=(2, 5)) + 0.5
            err = grad_check(lambda t: scalarize(ad.l2_normalize_rows(t)), x)
            assert err < 1e-5


class TestCrossEntropyRows:
    def test_uniform_entropy(self):
        n = 7
        logq = np.log(np.full((3, n), 1.0 / n))
        target = np.full((3, n), 1.0 / n)
        loss = ad.cross_entropy_rows(Tensor(target), Tensor(logq))
        assert abs(loss.item() - np.log(n)) < 1e-9

    def test_perfect_one_hot(self):
        target = np.array([[0.0, 1.0, 0.0]])
        logq = np.array([[-50.0, 0.0, -50.0]])
        loss = ad.cross_entropy_rows(Tensor(target), Tensor(logq))
        assert loss.item() == 0.0

    def test_fixture_against_high_precision_oracle(self):
        # frozen from a 40-digit evaluation of -mean(sum(t*log(q)))
        t = np.array([[0.2, 0.5, 0.3], [0.7, 0.1, 0.2]], dtype=np.float64)
        q = np.array([[0.25, 0.25, 0.5], [0.6, 0.3, 0.1]], dtype=np.float64)
        loss = ad.cross_entropy_rows(Tensor(t), Tensor(np.log(q)))
        assert abs(loss.item() - 1.0584212213097516) < 1e-6

    def test_target_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            ad.cross_entropy_rows(Tensor(np.array([[0.9, 0.2]])), Tensor(np.zeros((1, 2))))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.cross_entropy_rows(Tensor(np.ones((1, 2)) / 2), Tensor(np.zeros((2, 2))))

    def test_gradient_only_into_log_q(self):
        target = Tensor(np.array([[0.3, 0.7]]), requires_grad=True)
        logq = Tensor(np.log(np.array([[0.4, 0.6]])), requires_grad=True)
        loss = ad.cross_entropy_rows(target, logq)
        backward(loss)
        assert target.grad is None
        assert logq.grad is not None


class TestCoreOps:
    def test_matmul_identity(self):
        a = RNG.normal(size=(3, 3))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_matmul_shape_error(self):
        with pytest.raises(ValueError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_layer_norm_statistics(self):
        x = RNG.normal(size=(6, 16), scale=3.0) + 1.5
        gamma = Tensor(np.ones(16))
        beta = Tensor(np.zeros(16))
        y = ad.layer_norm(Tensor(x), gamma, beta).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_add_requires_same_shape(self):
        with pytest.raises(ValueError):
            ad.add(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))

    def test_mixed_dtype_error(self):
        with pytest.raises(ValueError):
            ad.add(Tensor(np.ones(2, dtype=np.float32)), Tensor(np.ones(2, dtype=np.float64)))

    def test_concat_slice_roundtrip(self):
        a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(2, 4))
        cat = ad.concat([Tensor(a), Tensor(b)], axis=1)
        back = ad.slice_axis(cat, 1, 3, 7)
        np.testing.assert_array_equal(back.data, b)

    def test_every_core_op_gradient(self):
        checks = {
            "matmul": lambda t: scalarize(ad.matmul(t, Tensor(RNG0(4, 3)))),
            "bmm": lambda t: scalarize(ad.bmm(t, Tensor(RNG0(2, 4, 3)))),
            "add": lambda t: scalarize(ad.add(t, Tensor(RNG0(*t.shape)))),
            "multiply": lambda t: scalarize(ad.multiply(t, Tensor(RNG0(*t.shape)))),
            "multiply_scalar": lambda t: scalarize(ad.multiply_scalar(t, -1.7)),
            "add_bias": lambda t: scalarize(ad.add_bias(t, Tensor(RNG0(t.shape[-1])))),
            "layer_norm": lambda t: scalarize(
                ad.layer_norm(t, Tensor(RNG0(t.shape[-1])), Tensor(RNG0(t.shape[-1])))
            ),
            "mean_all": lambda t: ad.mean_all(t),
            "slice_axis": lambda t: scalarize(ad.slice_axis(t, 1, 1, 3)),
            "concat": lambda t: scalarize(ad.concat([t, Tensor(RNG0(*t.shape))], 0)),
            "reshape": lambda t: scalarize(ad.reshape(t, (t.data.size,))),
            "transpose": lambda t: scalarize(ad.transpose(t, (1, 0))),
        }
        for name, fn in checks.items():
            shape = (2, 4, 3) if name == "bmm" else (3, 4)
            x = RNG.normal(size=shape)
            if name == "bmm":
                x = RNG.normal(size=(2, 3, 4))
            err = grad_check(fn, x)
            assert err < 1e-5, f"{name}: {err}"


def RNG0(*shape):
    return np.random.default_rng(hash(shape) % 2**32).normal(size=shape)


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(RNG.normal(size=(2, 3)), requires_grad=True)
        loss = ad.multiply_scalar(ad.mean_all(x), x.data.size)  # == sum(x)
        backward(loss)
        np.testing.assert_allclose(x.grad, 1.0, atol=1e-12)

    def test_square_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        loss = ad.multiply_scalar(ad.mean_all(ad.multiply(x, x)), 2.0)  # sum(x*x)
        backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_requires_scalar(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            backward(ad.multiply_scalar(x, 2.0))

    def test_fanout_accumulation(self):
        # hand-built 3-node graph: loss = sum(x + x); each path contributes 1
        x = Tensor(np.array([3.0, -1.0]), requires_grad=True)
        s = ad.add(x, x)
        loss = ad.multiply_scalar(ad.mean_all(s), 2.0)
        backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 2.0], atol=1e-12)

    def test_grad_accumulates_across_calls(self):
        x = Tensor(np.ones(3), requires_grad=True)
        for _ in range(2):
            backward(ad.mean_all(x))
        np.testing.assert_allclose(x.grad, 2.0 / 3.0, atol=1e-12)

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = ad.multiply_scalar(x, 2.0)
        assert not y.requires_grad and y._backward is None


class TestGradCheckHarness:
    def test_linear_op_is_exact(self):
        x = RNG.normal(size=(3, 3))
        err = grad_check(lambda t: ad.multiply_scalar(ad.mean_all(t), 9.0), x)
        assert err < 1e-10

    def test_gelu_random_points(self):
        err = grad_check(lambda t: scalarize(ad.gelu(t)), RNG.normal(size=(4, 4)))
        assert err < 1e-5

    def test_softmax_cross_entropy_composite(self):
        target = np.abs(RNG.normal(size=(3, 4))) + 0.1
        target /= target.sum(axis=1, keepdims=True)

        def closure(t):
            return ad.cross_entropy_rows(Tensor(target), ad.log_softmax_rows(t,  0.5))

        err = grad_check(closure, RNG.normal(size=(3, 4)))
        assert err < 1e-5
