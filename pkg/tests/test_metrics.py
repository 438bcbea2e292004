import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from npmatch import metrics
from npmatch.npmodel import ModelConfig, NPModel, PredictionBatch
from npmatch.metrics import (
    CalibrationReport,
    DropoutBaseline,
    bin_index,
    classwise_uncertainty,
    error_rate,
    expected_ece,
    expected_uce,
    mc_dropout_baseline_predict,
    normalized_uncertainty,
    timing_benchmark,
)


def random_set(seed, n=None, C=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 300))
    C = C or int(rng.integers(2, 11))
    conc = 10.0 ** rng.uniform(-1.5, 1)
    probs = rng.dirichlet(np.full(C, conc), size=n)
    labels = rng.integers(0, C, n)
    return probs, labels


class TestErrorRate:
    def test_examples(self):
        probs = np.eye(3)[[0, 1, 2, 0]]
        assert error_rate(probs, [0, 1, 2, 0]) == 0.0
        assert error_rate(probs, [1, 2, 0, 1]) == 1.0
        assert error_rate(probs, [0, 1, 0, 1]) == 0.5
        assert metrics.accuracy(probs, [0, 1, 0, 1]) == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            error_rate(np.zeros((0, 2)), [])

    def test_accepts_prediction_batch(self):
        batch = PredictionBatch(np.eye(2)[None, [1, 0]])
        assert error_rate(batch, [1, 1]) == 0.5


class TestBins:
    def test_edges(self):
        s = np.array([0.0, 0.1, 1 / 15, 2 / 15, 0.5, 1.0])
        np.testing.assert_array_equal(bin_index(s, 15), [0, 1, 0, 1, 7, 14])

    @given(st.floats(0.0, 1.0), st.integers(1, 30))
    def test_matches_oracle(self, s, n):
        assert bin_index(np.array([s]), n)[0] == oracles.bin_of(s, n)


class TestUCE:
    def test_certain_and_correct(self):
        rep = expected_uce(np.eye(4)[[0, 1, 2, 3]], [0, 1, 2, 3])
        assert rep.uce == 0.0

    def test_single_bin_example(self):
        # two samples, normalized uncertainty 0.2 each, one wrong
        C = 2
        target = 0.2 * math.log(C)
        from scipy.optimize import brentq

        p = brentq(lambda q: -(q * math.log(q) + (1 - q) * math.log(1 - q)) - target, 0.5, 1 - 1e-12,
                   xtol=1e-16, rtol=1e-15)
        probs = np.array([[p, 1 - p], [p, 1 - p]])
        rep = expected_uce(probs, [0, 1])
        np.testing.assert_allclose(normalized_uncertainty(probs), 0.2, rtol=1e-12)
        assert rep.uce == pytest.approx(0.3, abs=1e-12)
        assert sum(b[0] for b in rep.bins) == 2
        assert oracles.binned_gap([0.2, 0.2], [0.0, 1.0], 15) == pytest.approx(0.3, abs=1e-15)

    def test_one_bin_is_merged_oracle(self):
        probs, labels = random_set(3, n=200)
        rep = expected_uce(probs, labels, n_bins=1)
        s = normalized_uncertainty(probs)
        wrong = (probs.argmax(axis=1) != labels).astype(float)
        assert rep.uce == pytest.approx(abs(wrong.mean() - s.mean()), abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            expected_uce(np.zeros((0, 3)), [])

    def test_normalized_uncertainty_matches_reference(self):
        probs, _ = random_set(4, n=50)
        want = [oracles.entropy(r) / math.log(probs.shape[1]) for r in probs]
        np.testing.assert_allclose(normalized_uncertainty(probs), want, rtol=1e-12, atol=1e-15)


class TestECE:
    def test_perfectly_calibrated(self):
        # confidence 0.75 in one bin, three of four right
        probs = np.array([[0.75, 0.25]] * 4)
        assert expected_ece(probs, [0, 0, 0, 1]).ece == 0.0

    def test_all_same_confidence(self):
        probs = np.array([[0.6, 0.3, 0.1]] * 5)
        labels = [0, 1, 1, 2, 0]
        assert expected_ece(probs, labels).ece == pytest.approx(abs(0.4 - 0.6), abs=1e-15)

    def test_two_bins_by_hand(self):
        # bin (0.5, 1] with n_bins=2: scores 0.9, 0.8 (both right) -> |1 - 0.85|
        # bin (0, 0.5]: scores 0.4, 0.5 (one right) -> |0.5 - 0.45|
        probs = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.4, 0.3, 0.3], [0.5, 0.5, 0.0]])
        rep = expected_ece(probs, [0, 1, 0, 1], n_bins=2)
        assert rep.ece == pytest.approx(0.5 * 0.15 + 0.5 * 0.05, abs=1e-15)
        assert [b[0] for b in rep.bins] == [2, 2]


class TestOracle:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 30))
    def test_uce_and_ece_equal_brute_force(self, seed, n_bins):
        probs, labels = random_set(seed)
        pred = [oracles.argmax_low(list(r)) for r in probs]
        wrong = [float(p != y) for p, y in zip(pred, labels)]
        right = [1.0 - w for w in wrong]
        s_u = normalized_uncertainty(probs)
        s_c = probs.max(axis=1)
        assert expected_uce(probs, labels, n_bins).uce == oracles.binned_gap(s_u, wrong, n_bins)
        assert expected_ece(probs, labels, n_bins).ece == oracles.binned_gap(s_c, right, n_bins)
        assert expected_uce(probs, labels, n_bins).uce == pytest.approx(
            oracles.binned_gap_exact(s_u, wrong, n_bins), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariant(self, seed):
        probs, labels = random_set(seed)
        perm = np.random.default_rng(seed + 1).permutation(len(labels))
        a, b = expected_uce(probs, labels), expected_uce(probs[perm], labels[perm])
        assert a.uce == b.uce and a.bins == b.bins
        assert expected_ece(probs, labels).ece == expected_ece(probs[perm], labels[perm]).ece

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_report_invariants(self, seed):
        probs, labels = random_set(seed)
        for rep, value in ((r := expected_uce(probs, labels), r.uce),
                           (r2 := expected_ece(probs, labels), r2.ece)):
            assert isinstance(rep, CalibrationReport)
            assert sum(b[0] for b in rep.bins) == len(labels)
            assert 0.0 <= value <= 1.0


class TestClasswise:
    def test_single_class(self):
        probs, _ = random_set(5, n=30, C=3)
        labels = np.zeros(30, int)
        (row,) = classwise_uncertainty(probs, labels)
        assert row["count"] == 30
        assert row["accuracy"] == pytest.approx(1 - error_rate(probs, labels))
        assert row["mean_uncertainty"] == pytest.approx(PredictionBatch(probs[None]).uncertainty.mean())

    def test_bad_class_ranks_last(self):
        probs = np.vstack([np.tile([0.05, 0.9, 0.05], (5, 1)),   # class 1, right and sure
                           np.tile([0.4, 0.3, 0.3], (5, 1))])    # class 2, wrong and unsure
        rows = classwise_uncertainty(probs, [1] * 5 + [2] * 5)
        assert len(rows) == 2
        worst = max(rows, key=lambda r: r["mean_uncertainty"])
        assert worst["class"] == 2 and worst["accuracy"] == 0.0
        assert min(rows, key=lambda r: r["accuracy"]) is worst

    def test_csv(self):
        rows = classwise_uncertainty(np.eye(2)[[0, 1]], [0, 1])
        text = metrics.rows_to_csv(rows)
        assert text.splitlines()[0] == "class,count,mean_uncertainty,accuracy"
        assert len(text.splitlines()) == 3
        assert metrics.rows_to_csv([]) == ""


CFG = ModelConfig(n_classes=3, feature_dim=8, backbone_hidden=8, hidden_units=8, latent_dim=4)


class TestDropoutBaseline:
    def setup_method(self):
        self.x = np.random.default_rng(0).standard_normal((6, 2))

    def test_zero_rate_is_deterministic(self):
        model = DropoutBaseline(CFG, p=0.0, seed=1)
        batch = mc_dropout_baseline_predict(model, self.x, 5, seed=2)
        single = model.forward(self.x, None)
        for t in range(5):
            np.testing.assert_array_equal(batch.members[t], single)
        np.testing.assert_array_equal(batch.uncertainty, PredictionBatch(single[None]).uncertainty)

    def test_seeded(self):
        model = DropoutBaseline(CFG, p=0.3, seed=1)
        a = mc_dropout_baseline_predict(model, self.x, 4, seed=3)
        b = mc_dropout_baseline_predict(model, self.x, 4, seed=3)
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_one_pass(self):
        model = DropoutBaseline(CFG, p=0.3, seed=1)
        batch = mc_dropout_baseline_predict(model, self.x, 1, seed=4)
        np.testing.assert_array_equal(batch.probs, model.forward(self.x, np.random.default_rng(4)))

    def test_dropout_varies_passes(self):
        batch = mc_dropout_baseline_predict(DropoutBaseline(CFG, p=0.3, seed=1), self.x, 3, seed=5)
        assert not np.array_equal(batch.members[0], batch.members[1])

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            DropoutBaseline(CFG, p=1.0)
        with pytest.raises(ValueError):
            mc_dropout_baseline_predict(DropoutBaseline(CFG), self.x, 0, 0)


class TestTiming:
    def test_table_shape_and_single_draw_parity(self):
        np_model = NPModel(CFG, seed=0)
        baseline = DropoutBaseline(CFG, seed=0)
        x = np.random.default_rng(1).standard_normal((64, 2))
        table = timing_benchmark(np_model, baseline, x, [1, 2, 5], repeats=5)
        assert table["np_runs"].shape == (5, 3) and table["baseline_runs"].shape == (5, 3)
        assert np.all(table["np"] > 0) and np.all(table["baseline"] > 0)
        rows = metrics.timing_rows(table)
        assert [r["T"] for r in rows] == [1, 2, 5]

    def test_baseline_grows_with_T(self):
        cfg = ModelConfig(n_classes=3, input_kind="image", input_dim=16, feature_dim=16,
                          conv_channels=(8, 16), hidden_units=8, latent_dim=4)
        baseline = DropoutBaseline(cfg, seed=0)
        np_model = NPModel(cfg, seed=0)
        x = np.random.default_rng(2).uniform(size=(32, 1, 16, 16))
        table = timing_benchmark(np_model, baseline, x, [1, 4, 8], repeats=20)
        med = table["baseline"]
        # nondecreasing, allowing 5% noise
        assert med[1] >= 0.95 * med[0] and med[2] >= 0.95 * med[1]
        assert med[2] > med[0]
