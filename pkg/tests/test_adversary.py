import math

import numpy as np
import pytest

import reladapt.adversary as adv
import reladapt.diffcore as dc


def zeroed_discriminator(width, hidden=None):
    disc = adv.init_discriminator(width, np.random.default_rng(0), hidden)
    for name in disc.params.names():
        disc.params.set_value(name, np.zeros_like(disc.params.value(name)))
    return disc


class TestDiscriminate:
    def test_zero_weights_give_half(self):
        disc = zeroed_discriminator(3)
        tape = dc.Tape()
        out = adv.discriminate(tape, disc, dc.constant(tape, np.ones((4, 3))))
        np.testing.assert_allclose(out.data, 0.5)

    def test_large_positive_logit_clamps_high(self):
        disc = zeroed_discriminator(2)
        disc.params.set_value("b2", np.array([20.0]))
        tape = dc.Tape()
        out = adv.discriminate(tape, disc, dc.constant(tape, np.zeros((1, 2))))
        assert out.data[0] == 1.0 - 1e-7

    def test_large_negative_logit_clamps_low(self):
        disc = zeroed_discriminator(2)
        disc.params.set_value("b2", np.array([-20.0]))
        tape = dc.Tape()
        out = adv.discriminate(tape, disc, dc.constant(tape, np.zeros((1, 2))))
        assert out.data[0] == 1e-7

    def test_width_mismatch(self):
        disc = zeroed_discriminator(3)
        tape = dc.Tape()
        with pytest.raises(adv.AdversaryError):
            adv.discriminate(tape, disc, dc.constant(tape, np.zeros((1, 5))))

    def test_output_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(1)
        disc = adv.init_discriminator(4, rng)
        tape = dc.Tape()
        out = adv.discriminate(tape, disc,
                               dc.constant(tape, rng.normal(size=(64, 4), scale=10)))
        assert np.all(out.data > 0) and np.all(out.data < 1)


class TestAdvLoss:
    def test_half_everywhere_gives_minus_log4(self):
        disc = zeroed_discriminator(2)
        tape = dc.Tape()
        batch = adv.AdvBatch(dc.constant(tape, np.zeros((3, 2))),
                             dc.constant(tape, np.zeros((5, 2))))
        loss = adv.adv_loss(tape, disc, batch)
        assert float(loss.data) == pytest.approx(-math.log(4), abs=1e-12)
        assert float(loss.data) == pytest.approx(-1.386294, abs=1e-6)

    def test_zero_weights_leave_target_term_only(self):
        disc = zeroed_discriminator(2)
        tape = dc.Tape()
        batch = adv.AdvBatch(dc.constant(tape, np.zeros((3, 2))),
                             dc.constant(tape, np.zeros((3, 2))),
                             source_weights=np.zeros(3))
        loss = adv.adv_loss(tape, disc, batch)
        assert float(loss.data) == pytest.approx(math.log(0.5), abs=1e-12)

    def test_hand_evaluated_weighted_case(self):
        # one source feature with D=0.8 and weight 2, one target with D=0.8:
        # 2*log(0.8) + log(0.2)
        disc = zeroed_discriminator(1)
        logit = math.log(0.8 / 0.2)
        disc.params.set_value("b2", np.array([logit]))
        tape = dc.Tape()
        batch = adv.AdvBatch(dc.constant(tape, np.zeros((1, 1))),
                             dc.constant(tape, np.zeros((1, 1))),
                             source_weights=np.array([2.0]))
        loss = adv.adv_loss(tape, disc, batch)
        expected = 2 * math.log(0.8) + math.log(0.2)
        assert float(loss.data) == pytest.approx(expected, abs=1e-12)

    def test_empty_side_rejected(self):
        tape = dc.Tape()
        with pytest.raises(adv.AdversaryError):
            adv.AdvBatch(dc.constant(tape, np.zeros((0, 2))),
                         dc.constant(tape, np.zeros((3, 2))))

    def test_negative_weights_rejected(self):
        tape = dc.Tape()
        with pytest.raises(adv.AdversaryError):
            adv.AdvBatch(dc.constant(tape, np.zeros((2, 2))),
                         dc.constant(tape, np.zeros((2, 2))),
                         source_weights=np.array([1.0, -0.5]))

    def test_mirrored_batches_swap_symmetrically(self):
        # swapping two identical-feature sides only exchanges the roles of
        # the log D and log(1-D) terms
        rng = np.random.default_rng(2)
        disc = adv.init_discriminator(3, rng)
        feats = rng.normal(size=(6, 3))

        def value(src, tgt):
            tape = dc.Tape()
            batch = adv.AdvBatch(dc.constant(tape, src), dc.constant(tape, tgt))
            return float(adv.adv_loss(tape, disc, batch).data)

        forward = value(feats, feats)
        swapped = value(feats, feats)
        assert forward == pytest.approx(swapped, abs=1e-15)

        tape = dc.Tape()
        d = adv.discriminate(tape, disc, dc.constant(tape, feats)).data
        manual = np.mean(np.log(d)) + np.mean(np.log(1 - d))
        assert forward == pytest.approx(manual, abs=1e-12)


class TestGrlWrap:
    def test_forward_identity(self):
        tape = dc.Tape()
        x = dc.constant(tape, np.array([1.0, 2.0, 3.0]))
        y = adv.grl_wrap(x, 0.1)
        np.testing.assert_array_equal(y.data, [1.0, 2.0, 3.0])

    def test_backward_scales_by_minus_lambda(self):
        tape = dc.Tape()
        x = dc.Tensor(np.array([1.0, 2.0, 3.0]), tape)
        y = adv.grl_wrap(x, 0.1)
        tape.backward(y, np.array([1.0, 1.0, 1.0]))
        np.testing.assert_allclose(x.grad, [-0.1, -0.1, -0.1], atol=0)

    def test_lambda_zero_blocks(self):
        tape = dc.Tape()
        x = dc.Tensor(np.array([5.0]), tape)
        y = adv.grl_wrap(x, 0.0)
        tape.backward(y, np.array([2.0]))
        np.testing.assert_array_equal(x.grad, [0.0])


class TestTrainingDirections:
    def _ascend_value(self, disc, src, tgt, lr=0.05, steps=50):
        values = []
        for _ in range(steps):
            tape = dc.Tape()
            batch = adv.AdvBatch(dc.constant(tape, src), dc.constant(tape, tgt))
            loss = adv.adv_loss(tape, disc, batch)
            values.append(float(loss.data))
            disc.params.zero_grads()
            tape.backward(loss)
            for name in disc.params.names():
                disc.params.value(name)[...] += lr * disc.params.grad(name)
        return values

    def test_gradient_ascent_increases_value_on_separable_batch(self):
        rng = np.random.default_rng(3)
        disc = adv.init_discriminator(2, rng)
        src = rng.normal(loc=+2.0, size=(32, 2), scale=0.3)
        tgt = rng.normal(loc=-2.0, size=(32, 2), scale=0.3)
        values = self._ascend_value(disc, src, tgt)
        diffs = np.diff(values)
        assert np.all(diffs > -1e-12)
        assert values[-1] > values[0]

    def test_adv_loss_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(4)
        disc = adv.init_discriminator(3, rng)
        merged = dc.ParamStore()
        merged.add("src", rng.normal(size=(4, 3)))
        merged.add("tgt", rng.normal(size=(5, 3)))
        for name in disc.params.names():
            merged.add(f"d.{name}", disc.params.value(name))

        class View(dc.ParamStore):
            def __init__(self):
                pass

            def names(self):
                return sorted(n[2:] for n in merged.names() if n.startswith("d."))

            def value(self, name):
                return merged.value(f"d.{name}")

            def tensor(self, tape, name):
                return merged.tensor(tape, f"d.{name}")

        dview = adv.Discriminator(View(), 3, 3)

        def build():
            tape = dc.Tape()
            batch = adv.AdvBatch(merged.tensor(tape, "src"),
                                 merged.tensor(tape, "tgt"),
                                 source_weights=np.array([1.0, 0.5, 2.0, 0.0]))
            return adv.adv_loss(tape, dview, batch)

        assert dc.grad_check(build, merged, epsilon=1e-6) < 1e-4

    def test_combined_step_directions(self):
        # one simultaneous step on the combined graph: the discriminator's
        # update ascends the adversarial value, the target features' update
        # (through the GRL) descends it
        rng = np.random.default_rng(5)
        disc = adv.init_discriminator(2, rng)
        store = dc.ParamStore()
        store.add("tgt", rng.normal(loc=-1.0, size=(16, 2)))
        src = rng.normal(loc=+1.0, size=(16, 2))
        lam = 0.5

        def combined():
            tape = dc.Tape()
            return tape, adv.combined_adversarial_loss(
                tape, disc, dc.constant(tape, src), store.tensor(tape, "tgt"), lam)

        tape, loss = combined()
        disc.params.zero_grads()
        store.zero_grads()
        tape.backward(loss)
        # value-function gradients, computed separately without GRL
        tape2 = dc.Tape()
        tgt_leaf = dc.Tensor(store.value("tgt"), tape2)
        batch = adv.AdvBatch(dc.constant(tape2, src), tgt_leaf)
        value = adv.adv_loss(tape2, disc, batch)
        dvals = {n: disc.params.grad(n).copy() for n in disc.params.names()}
        disc.params.zero_grads()
        tape2.backward(value)
        # a descent step on the combined loss moves params along -grad
        for name in disc.params.names():
            step = -dvals[name]
            ascent = disc.params.grad(name)
            inner = float((step * ascent).sum())
            if np.linalg.norm(ascent) > 0:
                assert inner > 0  # discriminator ascends the value
        tgt_step = -store.grad("tgt")
        tgt_value_grad = tgt_leaf.grad
        assert float((tgt_step * tgt_value_grad).sum()) < 0  # extractor descends
        np.testing.assert_allclose(store.grad("tgt"), lam * tgt_value_grad,
                                   atol=1e-15)
