"""Tape, op, and optimizer verification against finite-difference oracles."""

import math

import numpy as np
import pytest

from vaem import autodiff as ad
from vaem.autodiff import (
    AdamState,
    AutodiffError,
    ParamSet,
    Tape,
    Tensor,
    adam_step,
    backward,
    forward_op,
    gradient_check,
)


class TestForwardFixtures:
    def test_relu_sign_cases(self):
        out = forward_op("relu", Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 5))
        out = forward_op("matmul", Tensor(np.eye(3)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_softmax_uniform(self):
        out = forward_op("softmax_rows", Tensor([[0.0, 0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]], atol=1e-15)

    def test_softmax_rows_normalized(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(scale=5.0, size=(40, 7)))
        y = forward_op("softmax_rows", x).data
        assert np.all(y >= 0.0)
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_logsumexp_matches_numpy(self):
        rng = np.random.default_rng(2)
        x = rng.normal(scale=30.0, size=(8, 5))
        got = forward_op("logsumexp_rows", Tensor(x)).data[:, 0]
        want = np.log(np.exp(x - x.max(axis=1, keepdims=True)).sum(axis=1)) + x.max(axis=1)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_softplus_stable(self):
        x = Tensor([-800.0, 0.0, 800.0])
        y = forward_op("softplus", x).data
        np.testing.assert_allclose(y, [0.0, math.log(2.0), 800.0], atol=1e-12)

    def test_concat_slice_round_trip(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 2)), rng.normal(size=(4, 3))
        cat = forward_op("concat_cols", [Tensor(a), Tensor(b)])
        np.testing.assert_array_equal(forward_op("slice_cols", cat, 0, 2).data, a)
        np.testing.assert_array_equal(forward_op("slice_cols", cat, 2, 5).data, b)

    def test_forward_deterministic_bits(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(6, 6)))
        w = Tensor(rng.normal(size=(6, 6)))
        one = ad.tsum(ad.relu(ad.matmul(x, w))).data
        two = ad.tsum(ad.relu(ad.matmul(x, w))).data
        assert one.tobytes() == two.tobytes()


class TestErrors:
    def test_unknown_kind(self):
        with pytest.raises(AutodiffError, match="unknown op"):
            forward_op("convolve", Tensor([1.0]))

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(AutodiffError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            forward_op("matmul", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_shape_error(self):
        with pytest.raises(AutodiffError, match="add_broadcast"):
            forward_op("add_broadcast", Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))

    def test_non_scalar_loss(self):
        p = ParamSet()
        x = p.add("x", [1.0, 2.0])
        with Tape() as tape:
            y = ad.square(x)
            with pytest.raises(AutodiffError, match="scalar"):
                backward(tape, y)

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(AutodiffError, match="nested"):
                Tape().__enter__()
        assert ad._ACTIVE is None


class TestBackwardFixtures:
    def test_sum_of_squares_gradient(self):
        p = ParamSet()
        x = p.add("x", [1.0, 2.0])
        with Tape() as tape:
            loss = ad.tsum(ad.square(x))
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)

    def test_constant_loss_zero_grads(self):
        p = ParamSet()
        x = p.add("x", [1.0, 2.0])
        with Tape() as tape:
            loss = ad.tsum(ad.square(Tensor([3.0])))
            backward(tape, loss)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_sigmoid_gradient_at_zero(self):
        p = ParamSet()
        x = p.add("x", [0.0])
        with Tape() as tape:
            loss = ad.tsum(ad.sigmoid(x))
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, [0.25], atol=1e-12)

    def test_grad_accumulates_on_reuse(self):
        p = ParamSet()
        x = p.add("x", [3.0])
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, x))  # x reused: d/dx x*x = 2x
            backward(tape, loss)
        np.testing.assert_allclose(x.grad, [6.0], atol=1e-12)

    def test_tape_entries_topologically_ordered(self):
        p = ParamSet()
        x = p.add("x", np.ones((2, 2)))
        with Tape() as tape:
            y = ad.relu(ad.matmul(x, x))
            z = ad.tsum(ad.add(y, x))
            seen = {id(x)}
            for out, inputs, _ in tape.entries:
                for t in inputs:
                    if isinstance(t, Tensor) and (t.requires_grad or any(
                            id(t) == id(o) for o, _, _ in tape.entries)):
                        assert id(t) in seen or not t.requires_grad
                seen.add(id(out))
            backward(tape, z)


def _op_closures(p, rng):
    """One scalar-loss closure per op kind, each touching its parameters."""
    w = p.add("w", rng.normal(size=(3, 4)))
    b = p.add("b", rng.normal(size=(4,)))
    m = p.add("m", rng.normal(size=(5, 3)))
    # keep relu inputs away from the kink
    base = rng.normal(size=(5, 3)) + np.sign(rng.normal(size=(5, 3))) * 0.3
    x = Tensor(base)
    pos = Tensor(np.abs(rng.normal(size=(5, 4))) + 0.5)
    idx = np.array([0, 2, 1, 0, 2])
    col = np.array([1, 3, 0, 2, 1])
    return {
        "matmul": lambda: ad.tsum(ad.matmul(x, w)),
        "add_broadcast": lambda: ad.tsum(ad.add(ad.matmul(x, w), b)),
        "elementwise_mul": lambda: ad.tsum(ad.mul(ad.matmul(x, w), pos)),
        "relu": lambda: ad.tsum(ad.relu(ad.matmul(x, w))),
        "sigmoid": lambda: ad.tsum(ad.sigmoid(ad.matmul(x, w))),
        "softmax_rows": lambda: ad.tsum(ad.mul(ad.softmax_rows(ad.matmul(x, w)), pos)),
        "log": lambda: ad.tsum(ad.log(ad.add(ad.square(ad.matmul(x, w)), pos))),
        "exp": lambda: ad.tsum(ad.exp(ad.scale(ad.matmul(x, w), 0.3))),
        "square": lambda: ad.tsum(ad.square(ad.matmul(x, w))),
        "sum": lambda: ad.tsum(ad.tsum(ad.matmul(x, w), axis=0)),
        "mean": lambda: ad.tsum(ad.tmean(ad.matmul(x, w), axis=1)),
        "concat_cols": lambda: ad.tsum(ad.concat_cols([ad.matmul(x, w), ad.square(m)])),
        "slice_cols": lambda: ad.tsum(ad.slice_cols(ad.matmul(x, w), 1, 3)),
        "neg": lambda: ad.tsum(ad.neg(ad.matmul(x, w))),
        "sub": lambda: ad.tsum(ad.square(ad.sub(ad.matmul(x, w), pos))),
        "scale": lambda: ad.tsum(ad.scale(ad.matmul(x, w), -1.7)),
        "softplus": lambda: ad.tsum(ad.softplus(ad.matmul(x, w))),
        "logsumexp_rows": lambda: ad.tsum(ad.logsumexp_rows(ad.matmul(x, w))),
        "take_rows": lambda: ad.tsum(ad.square(ad.take_rows(m, idx))),
        "take_per_row": lambda: ad.tsum(ad.square(ad.take_per_row(ad.matmul(x, w), col))),
        "transpose": lambda: ad.tsum(ad.matmul(ad.transpose(w), ad.transpose(x))),
        "concat_rows": lambda: ad.tsum(ad.square(ad.concat_rows([ad.matmul(x, w), ad.add(ad.matmul(x, w), b)]))),
        "sum_segments": lambda: ad.tsum(ad.square(ad.sum_segments(ad.matmul(x, w), 5))),
    }


class TestGradientChecks:
    def test_every_op_kind_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        p = ParamSet()
        closures = _op_closures(p, rng)
        missing = set(ad._OPS) - set(closures)
        assert not missing, f"ops without a gradient check: {missing}"
        for kind, closure in closures.items():
            err = gradient_check(p, closure)
            assert err < 1e-4, f"{kind}: max relative error {err:.3e}"

    def test_linear_layer_tight(self):
        rng = np.random.default_rng(8)
        p = ParamSet()
        w = p.add("w", rng.normal(size=(4, 3)))
        b = p.add("b", rng.normal(size=(3,)))
        x = Tensor(rng.normal(size=(6, 4)))
        err = gradient_check(p, lambda: ad.tsum(ad.square(ad.add(ad.matmul(x, w), b))))
        assert err < 1e-6

    def test_two_layer_relu_mlp(self):
        rng = np.random.default_rng(9)
        p = ParamSet()
        ad.init_mlp(p, "net", [3, 8, 2], rng)
        x = Tensor(rng.normal(size=(5, 3)) + 0.1)
        err = gradient_check(
            p, lambda: ad.tsum(ad.square(ad.mlp_forward(p, "net", x, 2))))
        assert err < 1e-4

    def test_constant_network_zero_error(self):
        p = ParamSet()
        p.add("unused", [1.0])
        err = gradient_check(p, lambda: ad.tsum(Tensor([5.0])))
        assert err == 0.0

    def test_gaussian_log_density_gradcheck(self):
        rng = np.random.default_rng(10)
        p = ParamSet()
        mean = p.add("mean", rng.normal(size=(4, 2)))
        logvar = p.add("logvar", rng.normal(scale=0.5, size=(2,)))
        x = Tensor(rng.normal(size=(4, 2)))
        err = gradient_check(
            p, lambda: ad.tsum(ad.gaussian_log_density(x, mean, logvar)))
        assert err < 1e-5


class TestGaussianHelpers:
    def test_log_density_matches_closed_form(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(5, 3))
        mu = rng.normal(size=(5, 3))
        logvar = rng.normal(scale=0.5, size=(5, 3))
        got = ad.gaussian_log_density(Tensor(x), Tensor(mu), Tensor(logvar)).data
        var = np.exp(logvar)
        want = -0.5 * (np.log(2 * np.pi * var) + (x - mu) ** 2 / var)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_kl_standard_fixture(self):
        kl = ad.gaussian_kl(Tensor([1.0]), Tensor([0.0]), Tensor([0.0]), Tensor([0.0]))
        np.testing.assert_allclose(kl.data, [0.5], atol=1e-15)

    def test_kl_identical_is_zero(self):
        rng = np.random.default_rng(12)
        mu = Tensor(rng.normal(size=(3,)))
        lv = Tensor(rng.normal(size=(3,)))
        np.testing.assert_allclose(ad.gaussian_kl(mu, lv, mu, lv).data, 0.0, atol=1e-15)

    def test_kl_nonnegative_random(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            args = [Tensor(rng.normal(size=(4,))) for _ in range(4)]
            assert np.all(ad.gaussian_kl(*args).data >= -1e-14)


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = ParamSet()
        w = p.add("w", [1.0, -2.0])
        st = AdamState(p)
        adam_step(p, st)
        np.testing.assert_array_equal(w.data, [1.0, -2.0])

    def test_first_step_hand_computed(self):
        p = ParamSet()
        w = p.add("w", [0.0])
        w.grad[...] = 1.0
        st = AdamState(p)
        adam_step(p, st)
        # m_hat = v_hat = 1 after bias correction: delta = -lr / (1 + eps)
        np.testing.assert_allclose(w.data, [-0.001 / (1.0 + 1e-8)], atol=1e-15)
        assert st.step == 1
        np.testing.assert_array_equal(w.grad, [0.0])

    def test_identical_params_identical_updates(self):
        p = ParamSet()
        a = p.add("a", [0.3, 0.7])
        b = p.add("b", [0.3, 0.7])
        a.grad[...] = [0.1, -0.2]
        b.grad[...] = [0.1, -0.2]
        st = AdamState(p)
        for _ in range(3):
            adam_step(p, st)
            a.grad[...] = [0.05, 0.05]
            b.grad[...] = [0.05, 0.05]
        np.testing.assert_array_equal(a.data, b.data)

    def test_descends_quadratic(self):
        p = ParamSet()
        w = p.add("w", [5.0])
        st = AdamState(p, lr=0.05)
        for _ in range(2000):
            with Tape() as tape:
                loss = ad.tsum(ad.square(w))
                backward(tape, loss)
            adam_step(p, st)
        assert abs(w.data[0]) < 1e-2


class TestParamSet:
    def test_duplicate_name_rejected(self):
        p = ParamSet()
        p.add("w", [1.0])
        with pytest.raises(AutodiffError, match="duplicate"):
            p.add("w", [2.0])

    def test_state_dict_round_trip(self):
        rng = np.random.default_rng(14)
        p = ParamSet()
        p.add("w", rng.normal(size=(3, 2)))
        p.add("b", rng.normal(size=(2,)))
        q = ParamSet()
        q.load_state_dict(p.state_dict())
        for name, t in p.items():
            np.testing.assert_array_equal(q[name].data, t.data)

    def test_check_finite_raises(self):
        p = ParamSet()
        w = p.add("w", [1.0])
        w.data[0] = np.inf
        with pytest.raises(ad.NumericsError, match="w"):
            p.check_finite("after step 3")
