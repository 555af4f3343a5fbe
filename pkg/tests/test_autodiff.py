"""Backprop against central finite differences.

The engine runs its forward pass in float32; differencing that directly
would bury small gradient entries under rounding noise.  So each test
rebuilds the same pipeline out of the plain-numpy float64 references in
fdcheck.py and differences those instead.  Nothing on the numeric side
touches the backward code.
"""

import numpy as np
import pytest

import fdcheck as FD
from fdcheck import fd_grad, rel_err
from quantnet.errors import UsageError
from quantnet import tensor as T
from quantnet.quantizer import QuantConfig, learned_quantize, quantize_array


def random_targets(rng, batch, classes):
    t = rng.random((batch, classes)).astype(np.float64)
    t /= t.sum(axis=1, keepdims=True)
    return t.astype(np.float32)


TOL = 1e-3


class TestOpGradients:
    """Each op sits inside a small pipeline ending in cross-entropy, so the
    upstream gradient reaching it is dense and non-uniform."""

    def test_conv1d_input_and_weight(self):
        rng = np.random.default_rng(100)
        x = (rng.standard_normal((2, 3, 10)) * 0.5).astype(np.float32)
        w = (rng.standard_normal((4, 3, 3)) * 0.5).astype(np.float32)
        head = (rng.standard_normal((3, 4)) * 0.5).astype(np.float32)
        targets = random_targets(rng, 2, 3)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            wt = T.Tensor(w, requires_grad=True)
            h = T.conv1d(xt, wt, dilation=2, padding=1)
            h = T.global_avg_pool(h)
            loss = T.softmax_cross_entropy(T.dense(h, T.Tensor(head)), targets)
        T.backward(tape, loss)

        def ref(xv, wv):
            h = FD.global_avg_pool(FD.conv1d(xv, wv, dilation=2, padding=1))
            return FD.cross_entropy(FD.dense(h, head), targets)

        assert rel_err(xt.grad, fd_grad(lambda a: ref(a, w), x)) < TOL
        assert rel_err(wt.grad, fd_grad(lambda a: ref(x, a), w)) < TOL

    def test_conv2d_input_and_weight(self):
        rng = np.random.default_rng(101)
        x = (rng.standard_normal((2, 2, 6, 6)) * 0.5).astype(np.float32)
        w = (rng.standard_normal((3, 2, 3, 3)) * 0.5).astype(np.float32)
        head = (rng.standard_normal((4, 3)) * 0.5).astype(np.float32)
        targets = random_targets(rng, 2, 4)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            wt = T.Tensor(w, requires_grad=True)
            h = T.conv2d(xt, wt, stride=2, padding=1)
            h = T.global_avg_pool(h)
            loss = T.softmax_cross_entropy(T.dense(h, T.Tensor(head)), targets)
        T.backward(tape, loss)

        def ref(xv, wv):
            h = FD.global_avg_pool(FD.conv2d(xv, wv, stride=2, padding=1))
            return FD.cross_entropy(FD.dense(h, head), targets)

        assert rel_err(xt.grad, fd_grad(lambda a: ref(a, w), x)) < TOL
        assert rel_err(wt.grad, fd_grad(lambda a: ref(x, a), w)) < TOL

    def test_dense_input_weight_and_bias(self):
        rng = np.random.default_rng(102)
        x = (rng.standard_normal((3, 5)) * 0.5).astype(np.float32)
        w = (rng.standard_normal((4, 5)) * 0.5).astype(np.float32)
        b = (rng.standard_normal(4) * 0.5).astype(np.float32)
        targets = random_targets(rng, 3, 4)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            wt = T.Tensor(w, requires_grad=True)
            bt = T.Tensor(b, requires_grad=True)
            loss = T.softmax_cross_entropy(T.dense(xt, wt, bt), targets)
        T.backward(tape, loss)

        def ref(xv, wv, bv):
            return FD.cross_entropy(FD.dense(xv, wv, bv), targets)

        assert rel_err(xt.grad, fd_grad(lambda a: ref(a, w, b), x)) < TOL
        assert rel_err(wt.grad, fd_grad(lambda a: ref(x, a, b), w)) < TOL
        assert rel_err(bt.grad, fd_grad(lambda a: ref(x, w, a), b)) < TOL

    def test_batch_norm_input_gamma_beta(self):
        rng = np.random.default_rng(103)
        x = (rng.standard_normal((4, 2, 6)) * 0.7 + 0.3).astype(np.float32)
        gamma = (rng.random(2) + 0.5).astype(np.float32)
        beta = (rng.standard_normal(2) * 0.3).astype(np.float32)
        head = (rng.standard_normal((3, 2)) * 0.5).astype(np.float32)
        targets = random_targets(rng, 4, 3)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            gt = T.Tensor(gamma, requires_grad=True)
            bt = T.Tensor(beta, requires_grad=True)
            h, _, _, _ = T.batch_norm_train(xt, gt, bt)
            h = T.global_avg_pool(h)
            loss = T.softmax_cross_entropy(T.dense(h, T.Tensor(head)), targets)
        T.backward(tape, loss)

        def ref(xv, gv, bv):
            h = FD.global_avg_pool(FD.batch_norm(xv, gv, bv))
            return FD.cross_entropy(FD.dense(h, head), targets)

        assert rel_err(xt.grad, fd_grad(lambda a: ref(a, gamma, beta), x)) < TOL
        assert rel_err(gt.grad, fd_grad(lambda a: ref(x, a, beta), gamma)) < TOL
        assert rel_err(bt.grad, fd_grad(lambda a: ref(x, gamma, a), beta)) < TOL

    def test_softmax_cross_entropy_logits(self):
        rng = np.random.default_rng(104)
        logits = (rng.standard_normal((4, 5)) * 2).astype(np.float32)
        targets = random_targets(rng, 4, 5)

        with T.Tape() as tape:
            lt = T.Tensor(logits, requires_grad=True)
            loss = T.softmax_cross_entropy(lt, targets)
        T.backward(tape, loss)

        num = fd_grad(lambda a: FD.cross_entropy(a, targets), logits)
        assert rel_err(lt.grad, num) < TOL

    def test_relu_away_from_the_kink(self):
        rng = np.random.default_rng(105)
        x = rng.standard_normal((3, 4)).astype(np.float32)
        x[np.abs(x) < 0.05] = 0.1  # keep finite differences off the kink
        targets = random_targets(rng, 3, 4)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            loss = T.softmax_cross_entropy(T.relu(xt), targets)
        T.backward(tape, loss)

        num = fd_grad(lambda a: FD.cross_entropy(FD.relu(a), targets), x)
        assert rel_err(xt.grad, num) < TOL

    def test_global_avg_pool_and_scale(self):
        rng = np.random.default_rng(106)
        x = rng.standard_normal((2, 3, 5)).astype(np.float32)
        targets = random_targets(rng, 2, 3)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            h = T.scale(T.global_avg_pool(xt), 1.7)
            loss = T.softmax_cross_entropy(h, targets)
        T.backward(tape, loss)

        def ref(xv):
            return FD.cross_entropy(FD.global_avg_pool(xv) * 1.7, targets)

        assert rel_err(xt.grad, fd_grad(ref, x)) < TOL

    def test_add_with_shared_input(self):
        """x feeds both branches of an add: fan-out must accumulate."""
        rng = np.random.default_rng(107)
        x = rng.standard_normal((2, 4)).astype(np.float32)
        w = (rng.standard_normal((4, 4)) * 0.5).astype(np.float32)
        targets = random_targets(rng, 2, 4)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            branch = T.dense(xt, T.Tensor(w))
            out = T.add(branch, T.scale(xt, 0.5))
            loss = T.softmax_cross_entropy(out, targets)
        T.backward(tape, loss)

        def ref(xv):
            out = FD.dense(xv, w) + 0.5 * np.asarray(xv, dtype=np.float64)
            return FD.cross_entropy(out, targets)

        assert rel_err(xt.grad, fd_grad(ref, x)) < TOL

    def test_tensor_sum(self):
        rng = np.random.default_rng(108)
        x = rng.standard_normal((3, 4)).astype(np.float32)

        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            loss = T.tensor_sum(xt)
        T.backward(tape, loss)
        assert np.allclose(xt.grad, 1.0)


class TestQuantizerGradient:
    """learned_quantize backprops through the clip surrogate, not the
    staircase, so finite differences are taken on the surrogate directly."""

    @staticmethod
    def surrogate(x, s, lower):
        e = np.exp(np.float64(s))
        return np.clip(np.asarray(x, dtype=np.float64) / e, lower, 1.0) * e

    def test_input_and_scale_gradient_match_surrogate(self):
        rng = np.random.default_rng(120)
        for lower in (-1.0, 0.0):
            cfg = QuantConfig(4, lower)
            cfg.set_scale(float(np.log(0.3)))  # clip range e^s = 0.3
            x = (rng.standard_normal(40) * 0.6).astype(np.float32)
            # keep samples away from the clip knots where the surrogate
            # has kinks and finite differences are meaningless
            r = x / cfg.scale32
            ok = (np.abs(r - lower) > 0.05) & (np.abs(r - 1.0) > 0.05)
            x = x[ok]

            with T.Tape() as tape:
                xt = T.Tensor(x, requires_grad=True)
                out = learned_quantize(xt, cfg)
                loss = T.tensor_sum(out)
            T.backward(tape, loss)

            def project(vec):
                return float(np.sum(vec, dtype=np.float64))

            s0 = float(cfg.s.data)
            num_gx = fd_grad(lambda a: project(self.surrogate(a, s0, lower)), x)
            assert rel_err(xt.grad, num_gx) < TOL

            eps = 1e-6
            num_gs = (project(self.surrogate(x, s0 + eps, lower))
                      - project(self.surrogate(x, s0 - eps, lower))) / (2 * eps)
            assert abs(float(cfg.s.grad) - num_gs) <= max(1e-3 * abs(num_gs), 1e-4)
            cfg.s.grad = None

    def test_interior_gradient_is_identity_clipped_is_zero(self):
        cfg = QuantConfig(3, -1.0)
        cfg.set_scale(0.0)  # clip range e^0 = 1
        x = np.array([-2.0, -0.5, 0.25, 0.5, 3.0], dtype=np.float32)
        with T.Tape() as tape:
            xt = T.Tensor(x, requires_grad=True)
            loss = T.tensor_sum(learned_quantize(xt, cfg))
        T.backward(tape, loss)
        assert np.array_equal(xt.grad, [0.0, 1.0, 1.0, 1.0, 0.0])
        # the high clip contributes +e^s, the low clip b*e^s = -e^s
        assert float(cfg.s.grad) == pytest.approx(0.0, abs=1e-7)
        cfg.s.grad = None

    def test_forward_really_is_the_staircase(self):
        cfg = QuantConfig(4, 0.0)
        cfg.set_scale(0.0)
        x = np.linspace(-0.4, 1.3, 30, dtype=np.float32)
        out = learned_quantize(T.Tensor(x), cfg)
        assert np.array_equal(out.data, quantize_array(x, cfg))


class TestTapeMechanics:
    def test_backward_requires_scalar_loss(self):
        with T.Tape() as tape:
            x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
            out = T.relu(x)
        with pytest.raises(UsageError, match="scalar"):
            T.backward(tape, out)

    def test_tapes_do_not_nest(self):
        with T.Tape():
            with pytest.raises(UsageError, match="nest"):
                with T.Tape():
                    pass
        assert not T.tape_active()

    def test_tape_clears_even_after_an_error(self):
        try:
            with T.Tape():
                raise ValueError("boom")
        except ValueError:
            pass
        assert not T.tape_active()

    def test_grad_accumulates_across_backward_calls(self):
        x = T.Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32),
                     requires_grad=True)
        for _ in range(2):
            with T.Tape() as tape:
                loss = T.tensor_sum(T.scale(x, 2.0))
            T.backward(tape, loss)
        assert np.array_equal(x.grad, [4.0, 4.0, 4.0])

    def test_leaf_without_requires_grad_gets_no_grad(self):
        x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        w = T.Tensor(np.ones((2, 3), dtype=np.float32))
        with T.Tape() as tape:
            loss = T.tensor_sum(T.dense(x, w))
        T.backward(tape, loss)
        assert w.grad is None
        assert x.grad is not None
        x.zero_grad()
        assert x.grad is None

    def test_untaped_forward_records_nothing(self):
        x = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        out = T.relu(x)
        assert out.requires_grad is False

    def test_gradients_are_deterministic(self):
        def run():
            rng = np.random.default_rng(130)
            x = rng.standard_normal((2, 3, 10)).astype(np.float32)
            w = rng.standard_normal((4, 3, 3)).astype(np.float32)
            targets = random_targets(rng, 2, 4)
            with T.Tape() as tape:
                xt = T.Tensor(x, requires_grad=True)
                wt = T.Tensor(w, requires_grad=True)
                h = T.global_avg_pool(T.conv1d(xt, wt))
                loss = T.softmax_cross_entropy(h, targets)
            T.backward(tape, loss)
            return xt.grad.copy(), wt.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2)
        assert np.array_equal(gw1, gw2)
