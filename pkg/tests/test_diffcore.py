import math

import numpy as np
import pytest

import reladapt.diffcore as dc


def scalar_square(x_value):
    """f(x) = x * x on a fresh tape; returns (tape, x, out)."""
    tape = dc.Tape()
    x = dc.Tensor(x_value, tape)
    out = dc.mul(x, x)
    return tape, x, out


class TestForward:
    def test_square_at_three(self):
        _, _, out = scalar_square(3.0)
        assert out.data == 9.0

    def test_softmax_of_zeros_is_uniform(self):
        tape = dc.Tape()
        z = dc.constant(tape, [0.0, 0.0, 0.0])
        p = dc.softmax(z)
        np.testing.assert_allclose(p.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=0)

    def test_conv_of_ones_with_ones_kernel(self):
        # valid region of a same-padded conv over ones(5) with kernel ones(3):
        # interior positions see the full window sum 3
        tape = dc.Tape()
        x = dc.constant(tape, np.ones((1, 5, 1)))
        k = dc.constant(tape, np.ones((1, 3, 1)))
        b = dc.constant(tape, np.zeros(1))
        out = dc.conv1d_same(x, k, b)
        np.testing.assert_array_equal(out.data[0, 1:4, 0], [3.0, 3.0, 3.0])
        # same-padding boundary positions see one zero pad each
        np.testing.assert_array_equal(out.data[0, [0, 4], 0], [2.0, 2.0])

    def test_forward_deterministic(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 3))
        k = rng.normal(size=(4, 3, 3))

        def run():
            tape = dc.Tape()
            out = dc.conv1d_same(dc.constant(tape, x), dc.constant(tape, k),
                                 dc.constant(tape, np.zeros(4)))
            return dc.tanh(out).data

        np.testing.assert_array_equal(run(), run())

    def test_non_finite_reports_node_id(self):
        tape = dc.Tape()
        x = dc.constant(tape, [1.0, 0.0])
        with pytest.raises(dc.NonFiniteError, match=r"node \d+"):
            dc.log(x)

    def test_shape_mismatch(self):
        tape = dc.Tape()
        a = dc.constant(tape, np.ones((2, 3)))
        b = dc.constant(tape, np.ones((2, 3)))
        with pytest.raises(dc.ShapeError):
            dc.matmul(a, b)


class TestBackward:
    def test_square_gradient(self):
        tape, x, out = scalar_square(3.0)
        tape.backward(out, 1.0)
        assert x.grad == 6.0

    def test_softmax_cross_entropy_identity(self):
        # d/dz of -log softmax(z)[k] is softmax(z) - onehot(k)
        z_val = np.array([[0.3, -1.2, 2.0, 0.1]])
        gold = np.array([2])
        tape = dc.Tape()
        z = dc.Tensor(z_val, tape)
        p = dc.softmax(z)
        loss = dc.neg(dc.sum_(dc.log(dc.take_rows(p, gold))))
        tape.backward(loss)
        expected = p.data.copy()
        expected[0, gold[0]] -= 1.0
        np.testing.assert_allclose(z.grad, expected, atol=1e-15)

    @pytest.mark.parametrize("lam", [0.0, 0.046212, 0.1])
    def test_grl_backward_is_exactly_minus_lambda(self, lam):
        upstream = np.array([1.0, -2.5, 0.75])
        tape = dc.Tape()
        x = dc.Tensor([1.0, 2.0, 3.0], tape)
        y = dc.grl(x, lam)
        np.testing.assert_array_equal(y.data, x.data)  # identity forward
        tape.backward(y, upstream)
        np.testing.assert_array_equal(x.grad, (-lam) * upstream)

    def test_grl_zero_lambda_blocks_gradient(self):
        tape = dc.Tape()
        x = dc.Tensor([1.0, 1.0, 1.0], tape)
        y = dc.grl(x, 0.0)
        tape.backward(y, np.array([1.0, 1.0, 1.0]))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0])

    def test_backward_before_forward(self):
        tape = dc.Tape()
        other_tape, _, out = scalar_square(1.0)
        with pytest.raises(dc.DiffcoreError, match="backward before forward"):
            tape.backward(out)

    def test_seed_shape_checked(self):
        tape, _, out = scalar_square(2.0)
        with pytest.raises(dc.ShapeError):
            tape.backward(out, np.ones(3))

    def test_shared_subexpression_accumulates(self):
        # q = (x + y) * (x + 1): dq/dx = (x + y) + (x + 1)
        tape = dc.Tape()
        x = dc.Tensor(2.0, tape)
        y = dc.Tensor(-4.0, tape)
        q = (x + y) * (x + 1.0)
        tape.backward(q)
        assert x.grad == pytest.approx((2.0 - 4.0) + (2.0 + 1.0))
        assert y.grad == pytest.approx(3.0)


class TestParamStore:
    def test_grad_slot_shapes_match(self):
        store = dc.ParamStore()
        store.add("w", np.ones((3, 2)))
        assert store.grad("w").shape == (3, 2)

    def test_duplicate_name_rejected(self):
        store = dc.ParamStore()
        store.add("w", 1.0)
        with pytest.raises(dc.DiffcoreError):
            store.add("w", 2.0)

    def test_gradient_accumulates_into_store(self):
        store = dc.ParamStore()
        store.add("w", np.array([1.0, 2.0]))
        tape = dc.Tape()
        w = store.tensor(tape, "w")
        out = dc.sum_(dc.mul(w, w))
        tape.backward(out)
        np.testing.assert_allclose(store.grad("w"), [2.0, 4.0])

    def test_same_param_used_twice_accumulates(self):
        store = dc.ParamStore()
        store.add("w", np.array(3.0))
        tape = dc.Tape()
        out = dc.mul(store.tensor(tape, "w"), store.tensor(tape, "w"))
        tape.backward(out)
        assert store.grad("w") == pytest.approx(6.0)

    def test_clone_is_independent(self):
        store = dc.ParamStore()
        store.add("w", np.array([1.0]))
        twin = store.clone()
        twin.value("w")[0] = 99.0
        assert store.value("w")[0] == 1.0

    def test_checkpoint_roundtrip(self, tmp_path):
        store = dc.ParamStore()
        rng = np.random.default_rng(0)
        store.add("alpha", rng.normal(size=(4, 5)))
        store.add("beta", rng.normal(size=7))
        store.add("gamma", np.array(2.5))
        path = tmp_path / "params.ckpt"
        store.save(path)
        back = dc.ParamStore.load(path)
        assert back.names() == store.names()
        for name in store.names():
            np.testing.assert_array_equal(back.value(name), store.value(name))


class TestGradCheck:
    def test_quadratic_tight(self):
        store = dc.ParamStore()
        store.add("x", np.array([1.5, -0.5, 2.0]))

        def build():
            tape = dc.Tape()
            x = store.tensor(tape, "x")
            return dc.sum_(dc.mul(x, x))

        assert dc.grad_check(build, store, epsilon=1e-5) < 1e-7

    def test_nonscalar_output_rejected(self):
        store = dc.ParamStore()
        store.add("x", np.array([1.0, 2.0]))

        def build():
            tape = dc.Tape()
            return store.tensor(tape, "x")

        with pytest.raises(dc.ShapeError):
            dc.grad_check(build, store)

    def test_mixed_op_graph(self):
        rng = np.random.default_rng(11)
        store = dc.ParamStore()
        store.add("w", rng.normal(size=(3, 4)))
        store.add("b", rng.normal(size=4))
        store.add("v", rng.normal(size=4))
        x = rng.normal(size=(5, 3))

        def build():
            tape = dc.Tape()
            h = dc.tanh(dc.affine(dc.constant(tape, x),
                                  store.tensor(tape, "w"),
                                  store.tensor(tape, "b")))
            s = dc.sigmoid(dc.matmul(h, dc.reshape(store.tensor(tape, "v"), (4, 1))))
            return dc.mean(dc.log(dc.clamp(s, 1e-7, 1 - 1e-7)))

        assert dc.grad_check(build, store, epsilon=1e-6) < 1e-7


class TestOpGradients:
    """Central-difference sweeps over each structured op."""

    def _check(self, store, build, tol=1e-7):
        assert dc.grad_check(build, store, epsilon=1e-6) < tol

    def test_conv1d(self):
        rng = np.random.default_rng(3)
        store = dc.ParamStore()
        store.add("x", rng.normal(size=(2, 7, 3)))
        store.add("k", rng.normal(size=(4, 3, 3)))
        store.add("b", rng.normal(size=4))

        def build():
            tape = dc.Tape()
            out = dc.conv1d_same(store.tensor(tape, "x"), store.tensor(tape, "k"),
                                 store.tensor(tape, "b"))
            return dc.sum_(dc.tanh(out))

        self._check(store, build)

    def test_masked_maxpool(self):
        rng = np.random.default_rng(4)
        store = dc.ParamStore()
        store.add("x", rng.normal(size=(3, 6, 2)))
        mask = np.ones((3, 6), dtype=bool)
        mask[1, 4:] = False
        mask[2, :] = False  # empty row pools to zero, no gradient

        def build():
            tape = dc.Tape()
            return dc.sum_(dc.masked_maxpool(store.tensor(tape, "x"), mask))

        self._check(store, build)

    def test_piecewise_maxpool(self):
        rng = np.random.default_rng(5)
        store = dc.ParamStore()
        store.add("x", rng.normal(size=(3, 8, 2)))
        p1 = np.array([2, 0, 5])
        p2 = np.array([5, 3, 7])
        lengths = np.array([8, 6, 8])

        def build():
            tape = dc.Tape()
            return dc.sum_(dc.piecewise_maxpool(
                store.tensor(tape, "x"), p1, p2, lengths))

        self._check(store, build)

    def test_embedding(self):
        rng = np.random.default_rng(6)
        store = dc.ParamStore()
        store.add("table", rng.normal(size=(5, 3)))
        ids = np.array([[0, 2, 2], [4, 1, 0]])

        def build():
            tape = dc.Tape()
            emb = dc.embedding(store.tensor(tape, "table"), ids)
            return dc.sum_(dc.mul(emb, emb))

        self._check(store, build)

    def test_embedding_out_of_range(self):
        tape = dc.Tape()
        table = dc.constant(tape, np.ones((3, 2)))
        with pytest.raises(dc.ShapeError, match="out of range"):
            dc.embedding(table, np.array([0, 3]))

    def test_softmax_take_rows(self):
        rng = np.random.default_rng(8)
        store = dc.ParamStore()
        store.add("z", rng.normal(size=(4, 5)))
        gold = np.array([1, 0, 4, 2])

        def build():
            tape = dc.Tape()
            p = dc.softmax(store.tensor(tape, "z"))
            return dc.neg(dc.mean(dc.log(dc.take_rows(p, gold))))

        self._check(store, build)

    def test_broadcast_arithmetic(self):
        rng = np.random.default_rng(9)
        store = dc.ParamStore()
        store.add("a", rng.normal(size=(3, 4)))
        store.add("b", rng.normal(size=4))
        store.add("c", np.array(0.7))

        def build():
            tape = dc.Tape()
            a = store.tensor(tape, "a")
            b = store.tensor(tape, "b")
            c = store.tensor(tape, "c")
            expr = dc.div(dc.mul(dc.add(a, b), c), dc.exp(b) + 2.0)
            return dc.sum_(expr)

        self._check(store, build)

    def test_concat_and_reductions(self):
        rng = np.random.default_rng(10)
        store = dc.ParamStore()
        store.add("a", rng.normal(size=(2, 3)))
        store.add("b", rng.normal(size=(2, 2)))

        def build():
            tape = dc.Tape()
            cat = dc.concat([store.tensor(tape, "a"), store.tensor(tape, "b")], axis=1)
            return dc.mean(dc.mul(cat, cat), axis=None)

        self._check(store, build)

    def test_dropout_deterministic_mode_is_identity(self):
        tape = dc.Tape()
        x = dc.constant(tape, np.ones((2, 3)))
        assert dc.dropout(x, 0.5, None, train=False) is x

    def test_dropout_inverted_scaling(self):
        rng = np.random.default_rng(12)
        tape = dc.Tape()
        x = dc.constant(tape, np.ones((2000,)))
        y = dc.dropout(x, 0.25, rng, train=True)
        kept = y.data > 0
        assert abs(kept.mean() - 0.75) < 0.05
        np.testing.assert_allclose(y.data[kept], 1.0 / 0.75)
