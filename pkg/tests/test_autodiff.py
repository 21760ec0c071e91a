"""Engine tests: frozen analytic values, finite-difference oracles, replay."""

import numpy as np
import pytest

from advaug import autodiff as ad
from advaug.autodiff import Tape, Tensor


def fd_gradient(f, arrays, which, step=1e-5):
    """Central finite differences of scalar f(arrays) w.r.t. arrays[which]."""
    x = arrays[which]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(arrays)
        x[idx] = orig - step
        fm = f(arrays)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * step)
    return grad


def rel_err(analytic, numeric):
    denom = max(np.max(np.abs(numeric)), 1e-12)
    return np.max(np.abs(analytic - numeric)) / denom


def check_primitive_grad(build, arrays, tol=1e-4):
    """Compare taped gradients of sum(build(tensors) * S) against FD."""
    rng = np.random.default_rng(0)
    with Tape() as tape:
        tensors = [Tensor(a) for a in arrays]
        out = build(*tensors)
        s = Tensor(rng.normal(size=out.shape))
        target = ad.tsum(ad.mul(out, s))
        grads = tape.gradient(target, tensors)

    def scalar(arrs):
        vals = [Tensor(a) for a in arrs]
        return float(np.sum(build(*vals).value * s.value))

    for i in range(len(arrays)):
        fd = fd_gradient(scalar, [a.copy() for a in arrays], i)
        assert rel_err(grads[i].value, fd) < tol, f"input {i}"


class TestForward:
    def test_identity_matmul_leaves_input_unchanged(self):
        x = Tensor([[3.0, -1.5]])
        out = ad.matmul(x, Tensor(np.eye(2)))
        assert np.array_equal(out.value, x.value)

    def test_tanh_at_zero(self):
        assert ad.tanh(Tensor(0.0)).value == 0.0

    def test_logsumexp_large_logits_no_overflow(self):
        out = ad.logsumexp(Tensor([1000.0, 1000.0]), axis=0)
        assert np.isfinite(out.value)
        assert out.value == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)

    def test_logsumexp_shift_invariance(self):
        rng = np.random.default_rng(3)
        z = rng.normal(scale=4.0, size=(5, 7))
        m = z.max(axis=1, keepdims=True)
        full = ad.logsumexp(Tensor(z), axis=1).value
        shifted = ad.logsumexp(Tensor(z - m), axis=1).value + m.squeeze(1)
        assert np.max(np.abs(full - shifted)) < 1e-12

    def test_matmul_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))

    def test_add_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.add(Tensor(np.ones((3,))), Tensor(np.ones((4,))))


class TestBackward:
    def test_square_gradient(self):
        with Tape() as tape:
            x = Tensor(3.0)
            y = ad.mul(x, x)
            (g,) = tape.gradient(y, [x])
        assert g.value == pytest.approx(6.0)

    def test_softmax_ce_gradient_uniform_logits(self):
        with Tape() as tape:
            logits = Tensor([[0.0, 0.0, 0.0, 0.0]])
            loss = ad.softmax_cross_entropy(logits, np.array([0]))
            (g,) = tape.gradient(loss, [logits])
        assert np.allclose(g.value, [[-0.75, 0.25, 0.25, 0.25]], atol=1e-12)

    def test_sign_zero_value_and_zero_gradient(self):
        with Tape() as tape:
            x = Tensor([-2.0, 0.0, 5.0])
            s = ad.sign(x)
            y = ad.tsum(ad.mul(s, x))
            (g,) = tape.gradient(y, [x])
        assert np.array_equal(s.value, [-1.0, 0.0, 1.0])
        # only the mul contributes; the sign factor is piecewise constant
        assert np.array_equal(g.value, s.value)

    def test_unreached_source_gets_zeros(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0])
            z = Tensor([5.0])
            y = ad.tsum(x)
            gx, gz = tape.gradient(y, [x, z])
        assert np.array_equal(gx.value, [1.0, 1.0])
        assert np.array_equal(gz.value, [0.0])

    def test_seed_shape_mismatch_rejected(self):
        with Tape() as tape:
            x = Tensor([1.0, 2.0])
            y = ad.mul(x, x)
            with pytest.raises(ad.ShapeError):
                tape.gradient(y, [x], seed=np.ones((3,)))

    def test_three_layer_net_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 4))
        labels = rng.integers(0, 3, size=5)
        params = [rng.normal(size=s) * 0.5 for s in
                  [(4, 8), (8,), (8, 6), (6,), (6, 3), (3,)]]

        def net(tensors):
            w1, b1, w2, b2, w3, b3 = tensors
            h = ad.tanh(ad.add(ad.matmul(Tensor(x), w1), b1))
            h = ad.tanh(ad.add(ad.matmul(h, w2), b2))
            logits = ad.add(ad.matmul(h, w3), b3)
            return ad.mean(ad.softmax_cross_entropy(logits, labels))

        with Tape() as tape:
            tensors = [Tensor(p) for p in params]
            loss = net(tensors)
            grads = tape.gradient(loss, tensors)

        def scalar(arrs):
            return float(net([Tensor(a) for a in arrs]).value)

        for i in range(len(params)):
            fd = fd_gradient(scalar, [p.copy() for p in params], i)
            assert rel_err(grads[i].value, fd) < 1e-5, f"param {i}"


class TestPrimitiveGradients:
    """Every primitive vs central FD, step 1e-5, inputs in [-2, 2]."""

    rng = np.random.default_rng(11)

    def u(self, *shape, lo=-2.0, hi=2.0):
        return self.rng.uniform(lo, hi, size=shape)

    def test_add(self):
        check_primitive_grad(ad.add, [self.u(3, 4), self.u(3, 4)])

    def test_add_broadcast(self):
        check_primitive_grad(ad.add, [self.u(3, 4), self.u(4)])

    def test_sub(self):
        check_primitive_grad(ad.sub, [self.u(3, 4), self.u(1, 4)])

    def test_mul(self):
        check_primitive_grad(ad.mul, [self.u(5), self.u(5)])

    def test_mul_broadcast_scalar(self):
        check_primitive_grad(ad.mul, [self.u(3, 2), self.u()])

    def test_div(self):
        denom = self.u(4) + np.where(self.u(4) > 0, 3.0, -3.0)
        check_primitive_grad(ad.div, [self.u(4), denom])

    def test_neg(self):
        check_primitive_grad(ad.neg, [self.u(6)])

    def test_matmul(self):
        check_primitive_grad(ad.matmul, [self.u(3, 4), self.u(4, 2)])

    def test_transpose(self):
        check_primitive_grad(ad.transpose, [self.u(3, 5)])

    def test_reshape(self):
        check_primitive_grad(lambda a: ad.reshape(a, (2, 6)), [self.u(3, 4)])

    def test_broadcast_to(self):
        check_primitive_grad(lambda a: ad.broadcast_to(a, (4, 3)), [self.u(1, 3)])

    def test_tanh(self):
        check_primitive_grad(ad.tanh, [self.u(7)])

    def test_relu_away_from_kink(self):
        x = self.u(9)
        x[np.abs(x) < 0.2] += 0.5
        check_primitive_grad(ad.relu, [x])

    def test_exp(self):
        check_primitive_grad(ad.exp, [self.u(5)])

    def test_log_positive_inputs(self):
        check_primitive_grad(ad.log, [self.u(5, lo=0.5, hi=2.0)])

    def test_sum_all(self):
        check_primitive_grad(ad.tsum, [self.u(3, 4)])

    def test_sum_axis_keepdims(self):
        check_primitive_grad(lambda a: ad.tsum(a, axis=0, keepdims=True),
                             [self.u(3, 4)])

    def test_sum_negative_axis(self):
        check_primitive_grad(lambda a: ad.tsum(a, axis=-1), [self.u(3, 4)])

    def test_mean_axis(self):
        check_primitive_grad(lambda a: ad.mean(a, axis=1), [self.u(3, 4)])

    def test_logsumexp_rows(self):
        check_primitive_grad(lambda a: ad.logsumexp(a, axis=1), [self.u(4, 6)])

    def test_logsumexp_keepdims(self):
        check_primitive_grad(lambda a: ad.logsumexp(a, axis=0, keepdims=True),
                             [self.u(4, 3)])

    def test_gather_rows_with_repeats(self):
        idx = np.array([0, 2, 1, 0])
        check_primitive_grad(lambda a: ad.gather_rows(a, idx), [self.u(3, 4)])

    def test_scatter_rows(self):
        idx = np.array([4, 0, 4])
        check_primitive_grad(lambda a: ad.scatter_rows(a, idx, 5), [self.u(3, 2)])

    def test_softmax_cross_entropy(self):
        labels = np.array([2, 0, 1])
        check_primitive_grad(
            lambda a: ad.softmax_cross_entropy(a, labels), [self.u(3, 4)])


class TestSecondOrder:
    def test_cube_second_derivative(self):
        with Tape() as tape:
            x = Tensor(2.0)
            f = ad.mul(ad.mul(x, x), x)
            (g1,) = tape.gradient(f, [x])
            (g2,) = tape.gradient(g1, [x])
        assert g1.value == pytest.approx(12.0)
        assert g2.value == pytest.approx(12.0)

    def test_mixed_partial_through_inner_gradient(self):
        # f(a, x) = (a x)^2; d/dx f = 2 a^2 x; d/da of that = 4 a x = 8
        with Tape() as tape:
            a = Tensor(1.0)
            x = Tensor(2.0)
            ax = ad.mul(a, x)
            f = ad.mul(ax, ax)
            (dfdx,) = tape.gradient(f, [x])
            (mixed,) = tape.gradient(dfdx, [a])
        assert mixed.value == pytest.approx(8.0)

    def test_nested_tapes_second_derivative(self):
        with Tape() as outer:
            x = Tensor(2.0)
            with Tape() as inner:
                f = ad.mul(ad.mul(x, x), x)
            (g1,) = inner.gradient(f, [x])
            (g2,) = outer.gradient(g1, [x])
        assert g2.value == pytest.approx(12.0)

    def test_hypergradient_matches_finite_differences(self):
        # two-parameter meta objective differentiated through one SGD step
        c = np.array([0.7, -1.3])
        t = np.array([0.2, 0.4])
        lr = 0.1

        def pipeline(theta_val):
            with Tape() as tape:
                theta = Tensor(theta_val)
                train = ad.tsum(ad.mul(ad.tanh(theta), Tensor(c)))
                (g,) = tape.gradient(train, [theta])
                stepped = ad.sub(theta, ad.mul(Tensor(lr), g))
                diff = ad.sub(stepped, Tensor(t))
                meta = ad.tsum(ad.mul(diff, diff))
                (hyper,) = tape.gradient(meta, [theta])
            return float(meta.value), hyper.value

        theta0 = np.array([0.3, -0.5])
        _, analytic = pipeline(theta0)

        def scalar(arrs):
            return pipeline(arrs[0])[0]

        fd = fd_gradient(scalar, [theta0.copy()], 0)
        assert rel_err(analytic, fd) < 1e-3


class TestReplay:
    def build(self, w_val):
        tape = Tape()
        with tape:
            x = Tensor([[0.5, -1.0], [2.0, 0.25]])
            w = Tensor(w_val)
            h = ad.tanh(ad.matmul(x, w))
            out = ad.tsum(ad.logsumexp(h, axis=1))
        return tape, w, out

    def test_replay_is_bit_identical(self):
        tape, _, out = self.build(np.array([[0.3, -0.2], [1.1, 0.7]]))
        before = out.value.tobytes()
        tape.replay()
        assert out.value.tobytes() == before

    def test_replay_recomputes_from_updated_leaves(self):
        w_val = np.array([[0.3, -0.2], [1.1, 0.7]])
        tape, w, out = self.build(w_val)
        w.value = w_val * 2.0
        tape.replay()
        _, _, fresh = self.build(w_val * 2.0)
        assert out.value.tobytes() == fresh.value.tobytes()

    def test_gradient_of_untaped_target_rejected(self):
        with Tape() as tape:
            x = Tensor(1.0)
            ad.mul(x, x)
        stray = ad.tanh(Tensor(0.5))
        with pytest.raises(ad.ShapeError):
            tape.gradient(stray, [x])
