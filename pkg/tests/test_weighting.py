import numpy as np
import pytest

import reladapt.adversary as adv
import reladapt.diffcore as dc
import reladapt.encoders as enc
import reladapt.weighting as wt


def make_target_batch(n=6, num_tokens=8):
    rng = np.random.default_rng(0)
    insts = [enc.SentenceInstance(rng.integers(1, num_tokens, size=5),
                                  (0, 1), (3, 4)) for _ in range(n)]
    cfg = enc.EncoderConfig(arch="cnn", word_dim=4, pos_dim=2, channels=3,
                            max_len=8)
    return cfg, enc.pack_sentences(insts, cfg)


class TestRelationWeights:
    def test_uniform_classifier_gives_uniform_weights(self):
        cfg, batch = make_target_batch()
        rng = np.random.default_rng(1)
        params = enc.init_sentence_params(cfg, vocab_size=8, rng=rng)
        cls = enc.init_classifier_params(cfg.feature_width, 4, rng)
        cls.set_value("w", np.zeros_like(cls.value("w")))
        cls.set_value("b", np.zeros_like(cls.value("b")))
        w = wt.relation_weights(cls, params, cfg, batch)
        np.testing.assert_allclose(w, [0.25, 0.25, 0.25, 0.25], atol=1e-15)

    def test_one_hot_classifier_gives_one_hot_weights(self):
        cfg, batch = make_target_batch()
        rng = np.random.default_rng(2)
        params = enc.init_sentence_params(cfg, vocab_size=8, rng=rng)
        cls = enc.init_classifier_params(cfg.feature_width, 4, rng)
        cls.set_value("w", np.zeros_like(cls.value("w")))
        cls.set_value("b", np.array([-800.0, 800.0, -800.0, -800.0]))
        w = wt.relation_weights(cls, params, cfg, batch)
        np.testing.assert_allclose(w, [0.0, 1.0, 0.0, 0.0], atol=1e-12)

    def test_mean_of_predictions_arithmetic(self):
        # predictions [0.9, 0.1] and [0.5, 0.5] average to [0.7, 0.3]
        preds = np.array([[0.9, 0.1], [0.5, 0.5]])
        np.testing.assert_allclose(preds.mean(axis=0), [0.7, 0.3])
        # same arithmetic through the module on a crafted two-instance batch
        cfg, batch = make_target_batch(n=2)
        rng = np.random.default_rng(3)
        params = enc.init_sentence_params(cfg, vocab_size=8, rng=rng)
        cls = enc.init_classifier_params(cfg.feature_width, 2, rng)
        w = wt.relation_weights(cls, params, cfg, batch)
        tape = dc.Tape()
        probs = enc.classify(tape, cls,
                             enc.encode(tape, params, cfg, batch)).data
        np.testing.assert_allclose(w, probs.mean(axis=0), atol=1e-15)

    def test_sums_to_one_for_random_classifiers(self):
        cfg, batch = make_target_batch(n=10)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            params = enc.init_sentence_params(cfg, vocab_size=8, rng=rng)
            cls = enc.init_classifier_params(cfg.feature_width, 6, rng)
            cls.set_value("w", rng.normal(size=cls.value("w").shape, scale=3.0))
            w = wt.relation_weights(cls, params, cfg, batch)
            assert abs(w.sum() - 1.0) < 1e-12
            assert np.all(w >= 0)

    def test_empty_target_rejected(self):
        cfg, batch = make_target_batch()
        rng = np.random.default_rng(4)
        params = enc.init_sentence_params(cfg, vocab_size=8, rng=rng)
        cls = enc.init_classifier_params(cfg.feature_width, 4, rng)
        empty = batch.rows(np.array([], dtype=int))
        with pytest.raises(wt.WeightingError):
            wt.relation_weights(cls, params, cfg, empty)


class TestInstanceWeights:
    def _disc_with_logit(self, logit):
        disc = adv.init_discriminator(2, np.random.default_rng(5))
        for name in disc.params.names():
            disc.params.set_value(name, np.zeros_like(disc.params.value(name)))
        disc.params.set_value("b2", np.array([logit]))
        return disc

    def test_perfectly_identified_source_gets_tiny_weight(self):
        disc = self._disc_with_logit(50.0)  # D_a -> 1 - 1e-7
        w = wt.instance_weights(disc, np.zeros((3, 2)))
        np.testing.assert_allclose(w, 1e-7, atol=1e-12)

    def test_half_maps_to_half(self):
        disc = self._disc_with_logit(0.0)
        w = wt.instance_weights(disc, np.zeros((2, 2)))
        np.testing.assert_allclose(w, 0.5)

    def test_point_two_maps_to_point_eight(self):
        disc = self._disc_with_logit(np.log(0.2 / 0.8))
        w = wt.instance_weights(disc, np.zeros((1, 2)))
        np.testing.assert_allclose(w, 0.8, atol=1e-12)

    def test_weights_open_interval_and_monotone(self):
        rng = np.random.default_rng(6)
        disc = adv.init_discriminator(3, rng)
        feats = rng.normal(size=(50, 3), scale=5.0)
        w = wt.instance_weights(disc, feats)
        assert np.all(w > 0) and np.all(w < 1)
        tape = dc.Tape()
        d = adv.discriminate(tape, disc, dc.constant(tape, feats)).data
        order = np.argsort(d)
        assert np.all(np.diff(w[order]) <= 0)  # larger D_a, smaller weight


class TestGateAlpha:
    def test_zero_gate_gives_half(self):
        gate = wt.init_gate_params(4)
        assert wt.gate_alpha(gate, np.ones((3, 4))) == 0.5

    def test_saturated_positive(self):
        gate = wt.init_gate_params(2)
        gate.set_value("w", np.array([20.0, 0.0]))
        a = wt.gate_alpha(gate, np.ones((2, 2)))
        assert a > 1 - 1e-8

    def test_saturated_negative(self):
        gate = wt.init_gate_params(2)
        gate.set_value("w", np.array([-20.0, 0.0]))
        a = wt.gate_alpha(gate, np.ones((2, 2)))
        assert a < 1e-8

    def test_empty_features_rejected(self):
        gate = wt.init_gate_params(2)
        with pytest.raises(wt.WeightingError):
            wt.gate_alpha(gate, np.zeros((0, 2)))

    def test_per_relation_readout(self):
        gate = wt.init_gate_params(1)
        gate.set_value("w", np.array([1.0]))
        feats = np.array([[-5.0], [5.0], [5.0]])
        labels = np.array([0, 1, 1])
        alphas = wt.gate_alpha_per_relation(gate, feats, labels, 3)
        assert alphas[0] < 0.01 and alphas[1] > 0.99 and np.isnan(alphas[2])


class TestTotalWeights:
    def test_alpha_one_keeps_instance_side_only(self):
        inst = np.array([0.8, 0.2, 0.4])
        rel = np.array([0.5, 0.5])
        labels = np.array([0, 1, 1])
        tot = wt.total_weights(1.0, inst, rel, labels)
        np.testing.assert_allclose(tot, 3 * inst / inst.sum())

    def test_alpha_zero_keeps_relation_side_only(self):
        inst = np.array([0.8, 0.2])
        rel = np.array([0.6, 0.4])
        labels = np.array([0, 1])
        tot = wt.total_weights(0.0, inst, rel, labels)
        np.testing.assert_allclose(tot, 2 * rel[labels] / rel[labels].sum())

    def test_worked_example(self):
        # alpha=0.5, inst=[0.8, 0.2], looked-up rel=[0.6, 0.4]
        # -> raw=[0.7, 0.3] -> totals=[1.4, 0.6]
        tot = wt.total_weights(0.5, np.array([0.8, 0.2]),
                               np.array([0.6, 0.4]), np.array([0, 1]))
        np.testing.assert_allclose(tot, [1.4, 0.6], atol=1e-15)

    def test_mean_is_exactly_one(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = int(rng.integers(2, 40))
            k = int(rng.integers(2, 6))
            inst = rng.uniform(0.01, 0.99, size=n)
            rel = rng.dirichlet(np.ones(k))
            labels = rng.integers(0, k, size=n)
            alpha = float(rng.uniform(0, 1))
            tot = wt.total_weights(alpha, inst, rel, labels)
            assert abs(tot.mean() - 1.0) < 1e-12
            assert np.all(tot >= 0)

    def test_degenerate_zero_raw_is_an_error(self):
        with pytest.raises(wt.WeightingError, match="degenerate"):
            wt.total_weights(1.0, np.zeros(3), np.array([1.0]), np.zeros(3, int))

    def test_bad_label_rejected(self):
        with pytest.raises(wt.WeightingError):
            wt.total_weights(0.5, np.array([0.5]), np.array([1.0]),
                             np.array([3]))


class TestFreeze:
    def _full_table(self):
        table = wt.WeightTable()
        table.relation_weights = np.array([0.7, 0.3])
        table.instance_weights = np.array([0.5, 0.5, 0.5])
        table.alpha = 0.5
        table.total_weights = wt.total_weights(
            0.5, table.instance_weights, table.relation_weights,
            np.array([0, 1, 0]))
        return table

    def test_mutation_after_freeze_errors(self):
        table = self._full_table().freeze()
        with pytest.raises(wt.FrozenTableError):
            table.relation_weights = np.array([1.0, 0.0])

    def test_freeze_idempotent(self):
        table = self._full_table()
        assert wt.freeze(wt.freeze(table)) is table
        assert table.frozen

    def test_read_after_freeze_is_identical(self):
        table = self._full_table()
        before = table.total_weights.copy()
        table.freeze()
        np.testing.assert_array_equal(table.total_weights, before)

    def test_freeze_requires_all_fields(self):
        table = wt.WeightTable()
        table.relation_weights = np.array([1.0])
        with pytest.raises(wt.WeightingError, match="unpopulated"):
            table.freeze()

    def test_serialization_roundtrip(self, tmp_path):
        table = self._full_table().freeze()
        path = tmp_path / "weights.txt"
        table.save(path)
        back = wt.WeightTable.load(path)
        np.testing.assert_array_equal(back.relation_weights, table.relation_weights)
        np.testing.assert_array_equal(back.instance_weights, table.instance_weights)
        np.testing.assert_array_equal(back.total_weights, table.total_weights)
        assert back.alpha == table.alpha
        assert back.frozen

    def test_malformed_line_reports_number(self):
        with pytest.raises(wt.WeightingError, match="line 2"):
            wt.WeightTable.loads("[relation_weights]\n0 not-a-number\n")
