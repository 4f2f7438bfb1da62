"""Tensor-core tests: forward oracles, autodiff vs finite differences, Adam."""

import numpy as np
import pytest

from patchpyramid import tensor as T
from patchpyramid.errors import ShapeError
from patchpyramid.optim import Adam, AdamState, adam_step, finite_diff_gradient
from patchpyramid.tensor import Tensor, backward, no_grad


@pytest.fixture
def rng():
    return np.random.default_rng(42)


class TestMatmul:
    def test_identity(self):
        """I @ A == A."""
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_projector_selects_rows(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        out = T.matmul(p, b)
        np.testing.assert_array_equal(out.data, [[5.0, 6.0], [0.0, 0.0]])

    def test_against_triple_loop(self, rng):
        """Random 3x4 times 4x2 equals the naive triple-loop product."""
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        expected = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a), Tensor(b))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_batched_matches_per_slice(self, rng):
        a = rng.normal(size=(5, 3, 4))
        b = rng.normal(size=(5, 4, 2))
        out = T.matmul(Tensor(a), Tensor(b))
        for s in range(5):
            np.testing.assert_allclose(out.data[s], a[s] @ b[s], atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as err:
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_shift_invariance(self):
        for c in (-1e4, -7.0, 0.0, 3.5, 1e4):
            out = T.softmax(Tensor([c, c + np.log(2.0)]))
            np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_direct_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        e = np.exp(x)
        out = T.softmax(Tensor(x))
        np.testing.assert_allclose(out.data, e / e.sum(), atol=1e-12)

    def test_rows_sum_to_one_and_bounded(self, rng):
        x = rng.normal(scale=30.0, size=(10, 7))
        out = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-9)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_all_neg_inf_slice_is_zero(self):
        x = np.array([[0.0, 1.0], [-np.inf, -np.inf]])
        out = T.softmax(Tensor(x), axis=-1).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out[1], [0.0, 0.0])

    def test_huge_finite_inputs_stay_finite(self):
        out = T.softmax(Tensor([1e100, -1e100, 0.0])).data
        assert np.all(np.isfinite(out))

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0, 2.0]), axis=3)


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(4, 3))
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_input_gives_bias(self):
        b = np.array([1.5, -2.0])
        out = T.linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 2))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.broadcast_to(b, (3, 2)))

    def test_matches_matmul_plus_bias(self, rng):
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 2))
        b = rng.normal(size=2)
        out = T.linear(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, x @ w + b, atol=1e-12)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


class TestLayerNorm:
    def test_constant_slice(self):
        out = T.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-12)

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)

    def test_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        mean = x.mean()
        var = ((x - mean) ** 2).mean()
        expected = (x - mean) / np.sqrt(var + 1e-5)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, expected, atol=1e-9)

    def test_standardizes_random_slices(self, rng):
        x = rng.normal(size=(6, 9)) * 3.0 + 1.0
        out = T.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-4)


class TestAxisHandling:
    def test_layer_norm_arbitrary_axis(self, rng):
        """Normalizing a middle axis equals moving it last and back."""
        x = rng.normal(size=(3, 5, 2))
        gain = rng.normal(size=5)
        bias = rng.normal(size=5)
        out = T.layer_norm(Tensor(x), Tensor(gain), Tensor(bias), axis=1)
        moved = np.moveaxis(x, 1, -1)
        mean = moved.mean(-1, keepdims=True)
        var = ((moved - mean) ** 2).mean(-1, keepdims=True)
        ref = np.moveaxis((moved - mean) / np.sqrt(var + 1e-5) * gain + bias, -1, 1)
        np.testing.assert_allclose(out.data, ref, atol=1e-12)

    def test_softmax_axis_zero(self, rng):
        x = rng.normal(size=(4, 3))
        out = T.softmax(Tensor(x), axis=0).data
        np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        out = T.dropout(x, 0.0, training=True, rng=rng)
        assert out is x

    def test_eval_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        out = T.dropout(x, 0.9, training=False)
        assert out is x

    def test_statistics(self):
        rng = np.random.default_rng(7)
        x = Tensor(np.ones(1_000_000))
        out = T.dropout(x, 0.1, training=True, rng=rng).data
        zero_fraction = float((out == 0.0).mean())
        assert abs(out.mean() - 1.0) < 0.01
        assert abs(zero_fraction - 0.1) < 0.001

    def test_rate_out_of_range(self, rng):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, training=True, rng=rng)

    def test_seed_determinism(self):
        a = T.dropout(Tensor(np.ones(100)), 0.5, True, np.random.default_rng(3)).data
        b = T.dropout(Tensor(np.ones(100)), 0.5, True, np.random.default_rng(3)).data
        np.testing.assert_array_equal(a, b)


class TestBackward:
    def test_product_rule(self):
        x = Tensor(3.0, requires_grad=True)
        y = Tensor(-2.0, requires_grad=True)
        backward(T.mul(x, y))
        assert x.grad == pytest.approx(-2.0)
        assert y.grad == pytest.approx(3.0)

    def test_softmax_sum_has_zero_gradient(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        backward(T.sum_all(T.softmax(x)))
        np.testing.assert_allclose(x.grad, np.zeros(5), atol=1e-12)

    def test_fan_out_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        loss = T.add(T.mul(x, x), T.mul(3.0, x))  # x^2 + 3x -> d/dx = 2x + 3
        backward(loss)
        assert x.grad == pytest.approx(7.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(T.mul(x, 2.0))

    def test_two_layer_net_matches_finite_differences(self):
        """MSE of a 2-layer rectifier net: tape grads vs central differences."""
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 3))
        target = rng.normal(size=(4, 2))
        shapes = [(3, 5), (5,), (5, 2), (2,)]
        sizes = [int(np.prod(s)) for s in shapes]
        theta0 = rng.normal(size=sum(sizes)) * 0.7

        def unpack(theta):
            out, pos = [], 0
            for s, n in zip(shapes, sizes):
                out.append(theta[pos:pos + n].reshape(s))
                pos += n
            return out

        def loss_value(theta):
            w1, b1, w2, b2 = unpack(theta)
            h = np.maximum(x @ w1 + b1, 0.0)
            d = h @ w2 + b2 - target
            return float((d * d).mean())

        # Keep every rectifier preactivation away from its kink so the
        # finite-difference reference is clean at h=1e-5.
        w1, b1, _, _ = unpack(theta0)
        assert np.abs(x @ w1 + b1).min() > 1e-3

        params = [Tensor(a, requires_grad=True) for a in unpack(theta0)]
        h = T.relu(T.linear(Tensor(x), params[0], params[1]))
        pred = T.linear(h, params[2], params[3])
        diff = T.sub(pred, Tensor(target))
        backward(T.mean_all(T.square(diff)))
        auto = np.concatenate([p.grad.reshape(-1) for p in params])

        fd = finite_diff_gradient(loss_value, theta0, h=1e-5)
        rel = np.abs(auto - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-4

    def test_reshape_swap_expand_grads(self, rng):
        """Movement ops route gradients back unchanged."""
        x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        out = T.sum_all(T.swap_last_axes(T.reshape(x, (3, 2))))
        backward(out)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
        y = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        backward(T.sum_all(T.expand_batch(y, 5)))
        np.testing.assert_array_equal(y.grad, np.full((2, 2), 5.0))

    def test_layer_norm_grads_match_fd(self, rng):
        x0 = rng.normal(size=(2, 6))
        gain0 = rng.normal(size=6)
        bias0 = rng.normal(size=6)

        def f(theta):
            x = theta[:12].reshape(2, 6)
            g = theta[12:18]
            b = theta[18:]
            mean = x.mean(-1, keepdims=True)
            var = ((x - mean) ** 2).mean(-1, keepdims=True)
            out = (x - mean) / np.sqrt(var + 1e-5) * g + b
            return float((out ** 2).sum())

        theta = np.concatenate([x0.reshape(-1), gain0, bias0])
        xt = Tensor(x0, requires_grad=True)
        gt = Tensor(gain0, requires_grad=True)
        bt = Tensor(bias0, requires_grad=True)
        out = T.layer_norm(xt, gt, bt)
        backward(T.sum_all(T.square(out)))
        auto = np.concatenate([xt.grad.reshape(-1), gt.grad, bt.grad])
        fd = finite_diff_gradient(f, theta, h=1e-5)
        rel = np.abs(auto - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-3

    def test_matmul_grads_match_fd(self, rng):
        """Both matmul gradient cases: equal batch dims and 2-D weight."""
        for ash, bsh in (((3, 4), (4, 2)), ((2, 3, 4), (2, 4, 2)), ((2, 3, 4), (4, 2))):
            a0 = rng.normal(size=ash)
            b0 = rng.normal(size=bsh)
            w = rng.normal(size=np.broadcast_shapes(ash[:-2] + (ash[-2], bsh[-1]),
                                                    bsh[:-2] + (ash[-2], bsh[-1])))

            def f(theta):
                a = theta[:a0.size].reshape(ash)
                b = theta[a0.size:].reshape(bsh)
                return float(((a @ b) * w).sum())

            at = Tensor(a0, requires_grad=True)
            bt = Tensor(b0, requires_grad=True)
            backward(T.sum_all(T.mul(T.matmul(at, bt), Tensor(w))))
            auto = np.concatenate([at.grad.reshape(-1), bt.grad.reshape(-1)])
            fd = finite_diff_gradient(f, np.concatenate([a0.reshape(-1), b0.reshape(-1)]))
            rel = np.abs(auto - fd) / np.maximum(np.abs(fd), 1e-8)
            assert rel.max() < 1e-3, (ash, bsh)

    def test_softmax_grads_match_fd(self, rng):
        x0 = rng.normal(size=(3, 5))
        w = rng.normal(size=(3, 5))

        def f(theta):
            x = theta.reshape(3, 5)
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return float((e / e.sum(axis=-1, keepdims=True) * w).sum())

        xt = Tensor(x0, requires_grad=True)
        backward(T.sum_all(T.mul(T.softmax(xt), Tensor(w))))
        fd = finite_diff_gradient(f, x0.reshape(-1))
        rel = np.abs(xt.grad.reshape(-1) - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-3

    def test_elementwise_grads_match_fd(self, rng):
        """sub, mul, square, abs_ backward vs central differences."""
        x0 = rng.normal(size=6) + 0.3  # keep |.| away from its kink
        y0 = rng.normal(size=6)

        def f(theta):
            x, y = theta[:6], theta[6:]
            return float((np.abs(x) + (x - y) ** 2 * y).sum())

        xt = Tensor(x0, requires_grad=True)
        yt = Tensor(y0, requires_grad=True)
        expr = T.add(T.abs_(xt), T.mul(T.square(T.sub(xt, yt)), yt))
        backward(T.sum_all(expr))
        auto = np.concatenate([xt.grad, yt.grad])
        fd = finite_diff_gradient(f, np.concatenate([x0, y0]))
        rel = np.abs(auto - fd) / np.maximum(np.abs(fd), 1e-8)
        assert rel.max() < 1e-3

    def test_no_grad_records_nothing(self, rng):
        T.reset_tape()
        x = Tensor(rng.normal(size=4), requires_grad=True)
        with no_grad():
            T.softmax(x)
        assert T.tape_length() == 0


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        """Bias-corrected first step moves by about -lr * sign(g)."""
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(lr=0.1)
        adam_step([p], [np.ones(1)], state)
        assert p.data[0] == pytest.approx(-0.1, rel=1e-6)
        assert state.t == 1

    def test_identical_params_get_identical_updates(self):
        a = Tensor(np.array([0.5, 0.5]), requires_grad=True)
        b = Tensor(np.array([0.5, 0.5]), requires_grad=True)
        g = np.array([0.3, 0.3])
        adam_step([a, b], [g, g.copy()], AdamState(lr=0.01))
        np.testing.assert_array_equal(a.data, b.data)
        assert a.data[0] == a.data[1]

    def test_matches_reference_formula_over_steps(self, rng):
        """In-place update equals the textbook recurrence for several steps."""
        p0 = rng.normal(size=7)
        grads = [rng.normal(size=7) for _ in range(5)]
        p = Tensor(p0.copy(), requires_grad=True)
        state = AdamState(lr=0.01)
        m = np.zeros(7)
        v = np.zeros(7)
        ref = p0.copy()
        for t, g in enumerate(grads, start=1):
            adam_step([p], [g], state)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            np.testing.assert_allclose(p.data, ref, rtol=1e-12, atol=1e-12)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError):
            adam_step([p], [np.zeros(4)], AdamState(lr=0.1))

    def test_optimizer_wrapper_uses_schedule(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.ones(1)
        opt.lr = 0.2
        opt.step()
        assert p.data[0] == pytest.approx(-0.2, rel=1e-6)


class TestFiniteDifferences:
    def test_quadratic(self):
        grad = finite_diff_gradient(lambda t: float(t[0] ** 2), np.array([3.0]))
        assert grad[0] == pytest.approx(6.0, abs=1e-6)

    def test_constant(self):
        grad = finite_diff_gradient(lambda t: 1.25, np.array([0.3, -0.7]))
        np.testing.assert_allclose(grad, 0.0, atol=1e-8)


class TestDeterminism:
    def test_seeded_ops_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            out = T.dropout(T.softmax(x), 0.3, training=True, rng=rng)
            loss = T.mean_all(T.square(out))
            backward(loss)
            return loss.data.copy(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2)
        assert np.array_equal(g1, g2)
