import numpy as np
import pytest

from pni import metrics


def pairwise_auroc(scores, labels):
    """Brute-force O(n^2) pair counting, ties at half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def trapezoid_auroc(scores, labels):
    """ROC integration oracle via thresholds at every distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    thresholds = np.unique(scores)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    n_pos, n_neg = (labels == 1).sum(), (labels == 0).sum()
    for t in thresholds:
        pred = scores >= t
        tpr.append(np.sum(pred & (labels == 1)) / n_pos)
        fpr.append(np.sum(pred & (labels == 0)) / n_neg)
    return float(np.trapezoid(tpr, fpr))


class TestAuroc:
    def test_perfect_separation(self):
        assert metrics.auroc([1, 2, 3, 10, 11, 12], [0, 0, 0, 1, 1, 1]) == 1.0

    def test_anchored_example(self):
        assert metrics.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_all_ties_give_half(self):
        assert metrics.auroc([3.0] * 8, [0, 1] * 4) == pytest.approx(0.5)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        scores = np.round(rng.normal(size=200), 2)  # rounding forces ties
        labels = rng.integers(0, 2, 200)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        assert metrics.auroc(scores, labels) == pytest.approx(
            pairwise_auroc(scores, labels), abs=1e-12
        )

    def test_monotone_transform_invariant(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=100)
        labels = rng.integers(0, 2, 100)
        labels[:2] = [0, 1]
        base = metrics.auroc(scores, labels)
        assert metrics.auroc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert metrics.auroc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)

    def test_label_flip_complements(self):
        rng = np.random.default_rng(2)
        scores = rng.permutation(50).astype(float)  # tie-free
        labels = rng.integers(0, 2, 50)
        labels[:2] = [0, 1]
        a = metrics.auroc(scores, labels)
        b = metrics.auroc(scores, 1 - labels)
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_matches_trapezoid_oracle(self):
        rng = np.random.default_rng(3)
        scores = np.round(rng.normal(size=150), 1)
        labels = rng.integers(0, 2, 150)
        labels[:2] = [0, 1]
        assert metrics.auroc(scores, labels) == pytest.approx(
            trapezoid_auroc(scores, labels), abs=1e-12
        )

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            metrics.auroc([1.0, 2.0], [1, 1])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            metrics.auroc([1.0], [1, 0])


class TestF1Threshold:
    def test_two_point_case(self):
        threshold, f1 = metrics.f1_optimal_threshold([0.0, 1.0], [0, 1])
        assert threshold == pytest.approx(0.5)
        assert f1 == 1.0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(4)
        for trial in range(20):
            scores = np.round(rng.normal(size=30), 1)
            labels = rng.integers(0, 2, 30)
            if labels.sum() == 0:
                labels[0] = 1
            got_t, got_f1 = metrics.f1_optimal_threshold(scores, labels)
            best_f1 = -1.0
            candidates = [scores.min() - 1.0] + [
                0.5 * (a + b) for a, b in zip(sorted(set(scores))[:-1],
                                              sorted(set(scores))[1:])
            ]
            for t in candidates:
                pred = scores > t
                tp = np.sum(pred & (labels == 1))
                fp = np.sum(pred & (labels == 0))
                fn = np.sum(~pred & (labels == 1))
                f1 = 2 * tp / max(2 * tp + fp + fn, 1e-300)
                if f1 > best_f1:
                    best_f1, best_t = f1, t
            assert got_f1 == pytest.approx(best_f1, abs=1e-12)
            assert got_t == pytest.approx(best_t, abs=1e-12)

    def test_all_positives_threshold_below_min(self):
        threshold, f1 = metrics.f1_optimal_threshold([2.0, 3.0, 4.0], [1, 1, 1])
        assert threshold < 2.0
        assert f1 == 1.0

    def test_tie_takes_lowest_threshold(self):
        # two thresholds reach F1=1; the lower one must win
        threshold, f1 = metrics.f1_optimal_threshold([0.0, 10.0, 20.0], [0, 1, 1])
        assert f1 == 1.0
        assert threshold == pytest.approx(5.0)

    def test_no_positives_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            metrics.f1_optimal_threshold([1.0, 2.0], [0, 0])


class TestErrorRates:
    def test_perfect_threshold(self):
        fpr, fnr = metrics.error_rates([1, 2, 8, 9], [0, 0, 1, 1], 5.0)
        assert (fpr, fnr) == (0.0, 0.0)

    def test_threshold_above_everything(self):
        fpr, fnr = metrics.error_rates([1, 2, 8, 9], [0, 0, 1, 1], 100.0)
        assert (fpr, fnr) == (0.0, 1.0)

    def test_matches_confusion_counting(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=100)
        labels = rng.integers(0, 2, 100)
        labels[:2] = [0, 1]
        threshold = float(np.median(scores))
        fpr, fnr = metrics.error_rates(scores, labels, threshold)
        pred = scores > threshold
        fp = np.sum(pred & (labels == 0))
        tn = np.sum(~pred & (labels == 0))
        fn = np.sum(~pred & (labels == 1))
        tp = np.sum(pred & (labels == 1))
        assert fpr == pytest.approx(fp / (fp + tn))
        assert fnr == pytest.approx(fn / (fn + tp))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            metrics.error_rates([1.0, 2.0], [0, 0], 1.5)


class TestScoreHistogram:
    def test_identical_scores_land_in_one_bin(self):
        edges, normal, anomal = metrics.score_histogram(
            [2.0, 2.0, 2.0], [0, 0, 1], bins=5
        )
        assert np.count_nonzero(normal) == 1
        assert np.count_nonzero(anomal) == 1

    def test_counts_sum_to_class_sizes(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=80)
        labels = rng.integers(0, 2, 80)
        _, normal, anomal = metrics.score_histogram(scores, labels, bins=10)
        assert normal.sum() == (labels == 0).sum()
        assert anomal.sum() == (labels == 1).sum()

    def test_matches_direct_binning(self):
        rng = np.random.default_rng(7)
        scores = rng.uniform(0, 1, 60)
        labels = rng.integers(0, 2, 60)
        edges, normal, anomal = metrics.score_histogram(scores, labels, bins=6)
        want_n, _ = np.histogram(scores[labels == 0], bins=edges)
        want_a, _ = np.histogram(scores[labels == 1], bins=edges)
        np.testing.assert_array_equal(normal, want_n)
        np.testing.assert_array_equal(anomal, want_a)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            metrics.score_histogram([], [], bins=4)

    def test_zero_bins_rejected(self):
        with pytest.raises(ValueError):
            metrics.score_histogram([1.0], [0], bins=0)
