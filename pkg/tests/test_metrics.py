import numpy as np
import pytest

from rankfed.errors import InputError, ShapeError, UndefinedMetricError
from rankfed.metrics import (CommLedger, ConfusionCounts, accuracy,
                             accuracy_score, auc, cka, communication_cost,
                             layer_averaged_cka, linear_hsic, weight_distance)
from rankfed.numerics import Rng


def pairwise_auc(scores, labels):
    """Brute-force oracle: P(score+ > score-) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def gram_hsic(z1, z2):
    """Oracle: tr(K1 H K2 H) / (n-1)^2 with centered Gram matrices."""
    n = z1.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k1 = z1 @ z1.T
    k2 = z2 @ z2.T
    return float(np.trace(k1 @ h @ k2 @ h) / (n - 1) ** 2)


class TestAccuracy:
    def test_perfect(self):
        assert accuracy(ConfusionCounts(5, 5, 0, 0)) == 1.0

    def test_all_equal_counts(self):
        assert accuracy(ConfusionCounts(3, 3, 3, 3)) == 0.5

    def test_hand_value(self):
        assert accuracy(ConfusionCounts(3, 2, 1, 4)) == 0.5

    def test_zero_total(self):
        with pytest.raises(InputError):
            accuracy(ConfusionCounts(0, 0, 0, 0))

    def test_multiclass_score(self):
        assert accuracy_score([0, 1, 2, 1], [0, 1, 1, 1]) == 0.75


class TestAuc:
    def test_perfect_separation(self):
        scores = [0.9, 0.8, 0.2, 0.1]
        labels = [1, 1, 0, 0]
        assert auc(scores, labels) == 1.0

    def test_all_scores_equal(self):
        assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auc([0.1, 0.2], [1, 1])

    def test_matches_pairwise_oracle_with_ties(self):
        rng = Rng(77)
        for i in range(50):
            s = rng.substream("case", i)
            n = 10 + int(s.substream("n").integers(0, 40))
            # coarse grid of score values forces ties
            scores = np.asarray(s.substream("scores").integers(0, 6, n), dtype=np.float64) / 5.0
            labels = np.asarray(s.substream("labels").integers(0, 2, n))
            if labels.min() == labels.max():
                continue
            assert auc(scores, labels) == pytest.approx(
                pairwise_auc(scores, labels), abs=1e-9)


class TestCommunicationCost:
    def test_hand_value(self):
        ledger = CommLedger(num_clients=5)
        ledger.add_round(100)
        ledger.add_round(100)
        count, _ = communication_cost(ledger)
        assert count == 2 * 5 * 200

    def test_zero_rounds(self):
        assert communication_cost(CommLedger(3)) == (0, 0.0)

    def test_megabytes(self):
        ledger = CommLedger(num_clients=1, bytes_per_param=4)
        ledger.add_round(2**18)  # 2^20 bytes each way
        count, mb = communication_cost(ledger)
        assert count == 2**19
        assert mb == 2.0

    def test_rank_halving_halves_per_layer_count(self):
        shapes = [(32, 16), (24, 20)]
        def param_count(r):
            return sum(r * (h1 + h2) for h1, h2 in shapes)
        assert param_count(4) * 2 == param_count(8)

    def test_cutoff_and_additivity(self):
        ledger = CommLedger(num_clients=2)
        for p in (10, 20, 30):
            ledger.add_round(p)
        c1, _ = communication_cost(ledger, 1)
        c2, _ = communication_cost(ledger, 2)
        c3, _ = communication_cost(ledger, 3)
        assert (c1, c2, c3) == (40, 120, 240)
        assert ledger.cumulative_transmitted() == [40, 120, 240]

    def test_linear_in_clients(self):
        a = CommLedger(num_clients=2)
        b = CommLedger(num_clients=6)
        for l in (a, b):
            l.add_round(50)
        assert communication_cost(b)[0] == 3 * communication_cost(a)[0]


class TestWeightDistance:
    def test_identical(self, rng):
        m = [rng.normal(3, 4)]
        assert weight_distance(m, [m[0].copy()]) == 0.0

    def test_symmetric(self, rng):
        a = [rng.substream("a").normal(3, 4), rng.substream("a2").normal(2, 5)]
        b = [rng.substream("b").normal(3, 4), rng.substream("b2").normal(2, 5)]
        assert weight_distance(a, b) == weight_distance(b, a)

    def test_pythagorean(self):
        a = [np.array([[3.0, 4.0]])]
        b = [np.zeros((1, 2))]
        assert weight_distance(a, b) == 5.0

    def test_metric_axioms_on_random_triples(self):
        rng = Rng(5)
        for i in range(20):
            s = rng.substream("triple", i)
            a = [s.substream("a").normal(4, 3)]
            b = [s.substream("b").normal(4, 3)]
            c = [s.substream("c").normal(4, 3)]
            ab = weight_distance(a, b)
            bc = weight_distance(b, c)
            ac = weight_distance(a, c)
            assert ab >= 0
            assert ac <= ab + bc + 1e-12

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            weight_distance([rng.normal(2, 2)], [rng.normal(3, 2)])


class TestHsic:
    def test_constant_representation_is_zero(self, rng):
        z1 = rng.normal(10, 4)
        z2 = np.ones((10, 3))
        assert linear_hsic(z1, z2) == pytest.approx(0.0, abs=1e-20)

    def test_self_positive(self, rng):
        z = rng.normal(12, 5)
        assert linear_hsic(z, z) > 0

    def test_matches_gram_oracle(self, rng):
        for i in range(10):
            s = rng.substream("pair", i)
            z1 = s.substream("z1").normal(9, 4)
            z2 = s.substream("z2").normal(9, 6)
            feat = linear_hsic(z1, z2)
            gram = gram_hsic(z1 - z1.mean(axis=0), z2 - z2.mean(axis=0))
            assert feat == pytest.approx(gram, rel=1e-9)

    def test_needs_two_samples(self, rng):
        with pytest.raises(InputError):
            linear_hsic(rng.normal(1, 3), rng.normal(1, 3))


class TestCka:
    def test_self_similarity(self, rng):
        z = rng.normal(16, 5)
        assert cka(z, z) == 1.0

    def test_positive_scaling_invariance(self, rng):
        z = rng.normal(16, 5)
        assert cka(z, 2.0 * z) == pytest.approx(1.0, abs=1e-9)

    def test_orthogonal_invariance(self, rng):
        z = rng.substream("z").normal(20, 6)
        q, _ = np.linalg.qr(rng.substream("q").normal(6, 6))
        assert cka(z, z @ q) == pytest.approx(1.0, abs=1e-9)

    def test_range(self, rng):
        for i in range(25):
            s = rng.substream("r", i)
            v = cka(s.substream("a").normal(11, 4), s.substream("b").normal(11, 7))
            assert 0.0 <= v <= 1.0

    def test_constant_rejected(self, rng):
        with pytest.raises(UndefinedMetricError):
            cka(np.ones((8, 3)), rng.normal(8, 3))


class TestLayerAveragedCka:
    def test_identical_models(self, rng):
        reps = [rng.substream("l", i).normal(12, 5) for i in range(3)]
        assert layer_averaged_cka(reps, [r.copy() for r in reps]) == 1.0

    def test_single_layer_equals_plain(self, rng):
        a = rng.substream("a").normal(10, 4)
        b = rng.substream("b").normal(10, 4)
        assert layer_averaged_cka([a], [b]) == cka(a, b)

    def test_constructed_mean(self, rng):
        z = rng.substream("z").normal(30, 6)
        w = rng.substream("w").normal(30, 6)
        target = 0.5 * (1.0 + cka(z, w))
        assert layer_averaged_cka([z, z], [z, w]) == pytest.approx(target, rel=1e-12)
