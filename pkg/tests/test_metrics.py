import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmoe.errors import DataError
from nmoe.metrics import (accuracy, binary_auc, confusion_matrix,
                          evaluate_clients, macro_auc, macro_auc_detail,
                          macro_f1)
from oracles import confusion_f1, pairwise_auc, pairwise_macro_auc


class TestAccuracy:
    def test_perfect(self):
        y = np.array([0, 1, 2, 3])
        assert accuracy(y, y) == 1.0

    def test_cyclic_shift_is_zero(self):
        y = np.arange(12) % 4
        assert accuracy((y + 1) % 4, y) == 0.0

    def test_seven_of_ten(self):
        y = np.zeros(10, dtype=int)
        p = y.copy()
        p[:3] = 1
        assert accuracy(p, y) == 0.7

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            accuracy(np.array([0, 1]), np.array([0]))

    def test_empty(self):
        with pytest.raises(DataError):
            accuracy(np.array([]), np.array([]))


class TestConfusionMatrix:
    def test_hand_fixture(self):
        y = np.array([0, 0, 1, 1, 2, 2])
        p = np.array([0, 1, 1, 1, 0, 2])
        expected = np.array([[1, 1, 0],
                             [0, 2, 0],
                             [1, 0, 1]])
        assert np.array_equal(confusion_matrix(p, y, 3), expected)

    def test_rows_sum_to_class_counts(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 5, size=200)
        p = rng.integers(0, 5, size=200)
        conf = confusion_matrix(p, y, 5)
        assert np.array_equal(conf.sum(axis=1), np.bincount(y, minlength=5))
        assert np.array_equal(conf.sum(axis=0), np.bincount(p, minlength=5))

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            confusion_matrix(np.array([0]), np.array([5]), 3)


class TestMacroF1:
    def test_degenerate_majority_predictor(self):
        # always predicting the 80% class keeps accuracy high while the
        # class-averaged F1 collapses toward 1/C
        y = np.array([0] * 8 + [1, 2])
        p = np.zeros(10, dtype=int)
        assert accuracy(p, y) == 0.8
        expected = (2.0 * 0.8 * 1.0 / 1.8) / 10.0
        assert abs(macro_f1(p, y, 10) - expected) < 1e-12

    def test_perfect_balanced_equals_accuracy(self):
        y = np.repeat(np.arange(4), 5)
        assert macro_f1(y, y, 4) == accuracy(y, y) == 1.0

    def test_absent_classes_count_in_the_mean(self):
        y = np.array([0, 0, 1, 1])
        p = np.array([0, 0, 1, 1])
        assert abs(macro_f1(p, y, 4) - 2.0 / 4.0) < 1e-15

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(11)
        for trial in range(50):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(5, 40))
            y = rng.integers(0, c, size=n)
            p = rng.integers(0, c, size=n)
            assert abs(macro_f1(p, y, c) - confusion_f1(p, y, c)) < 1e-12


class TestBinaryAuc:
    def test_perfect_separation(self):
        s = np.array([0.9, 0.8, 0.2, 0.1])
        pos = np.array([True, True, False, False])
        assert binary_auc(s, pos) == 1.0

    def test_reversed_separation(self):
        s = np.array([0.1, 0.2, 0.8, 0.9])
        pos = np.array([True, True, False, False])
        assert binary_auc(s, pos) == 0.0

    def test_all_tied_is_half(self):
        s = np.full(6, 0.5)
        pos = np.array([True] * 3 + [False] * 3)
        assert binary_auc(s, pos) == 0.5

    def test_six_sample_fixture_matches_pairwise(self):
        s = np.array([0.4, 0.7, 0.4, 0.1, 0.9, 0.4])
        pos = np.array([True, False, True, False, True, False])
        assert binary_auc(s, pos) == pairwise_auc(s, pos)

    def test_single_class_rejected(self):
        with pytest.raises(DataError):
            binary_auc(np.array([0.1, 0.2]), np.array([True, True]))


class TestMacroAuc:
    def test_matches_pairwise_oracle_on_random_instances(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            c = int(rng.integers(2, 5))
            n = int(rng.integers(2 * c, 30))
            labels = np.concatenate([np.arange(c),
                                     rng.integers(0, c, size=n - c)])
            # eighth-grid scores force plenty of exact ties
            scores = rng.integers(0, 9, size=(n, c)) / 8.0
            assert macro_auc(scores, labels) == \
                pairwise_macro_auc(scores, labels)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        labels = rng.integers(0, 3, size=40)
        labels[:3] = [0, 1, 2]
        base = rng.integers(-40, 41, size=(40, 3)) / 8.0
        reference = macro_auc(base, labels)
        # exact strictly monotone maps on the eighth grid: scaling,
        # shifting, and cubing all preserve order and every tie
        for transformed in (2.0 * base, base - 3.0, base ** 3):
            assert macro_auc(transformed, labels) == reference

    def test_ineligible_classes_skipped_and_reported(self):
        labels = np.array([0, 2, 0, 2, 0])
        rng = np.random.default_rng(9)
        scores = rng.random((5, 3))
        value, skipped = macro_auc_detail(scores, labels)
        assert skipped == (1,)
        expected = np.mean([binary_auc(scores[:, 0], labels == 0),
                            binary_auc(scores[:, 2], labels == 2)])
        assert value == expected

    def test_no_eligible_class(self):
        scores = np.random.default_rng(0).random((4, 3))
        with pytest.raises(DataError):
            macro_auc(scores, np.zeros(4, dtype=int))

    def test_random_scores_near_half(self):
        rng = np.random.default_rng(13)
        labels = np.repeat(np.arange(2), 2000)
        scores = rng.random((4000, 2))
        assert abs(macro_auc(scores, labels) - 0.5) < 0.02

    def test_shape_mismatch(self):
        with pytest.raises(DataError):
            macro_auc(np.zeros((3, 2)), np.zeros(4, dtype=int))


@st.composite
def labeled_predictions(draw):
    c = draw(st.integers(2, 5))
    n = draw(st.integers(c, 30))
    y = draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    p = draw(st.lists(st.integers(0, c - 1), min_size=n, max_size=n))
    perm = draw(st.permutations(range(c)))
    return np.array(y), np.array(p), c, np.array(perm)


class TestPermutationInvariance:
    @settings(max_examples=40, deadline=None)
    @given(labeled_predictions())
    def test_f1_and_accuracy(self, case):
        y, p, c, perm = case
        assert accuracy(perm[p], perm[y]) == accuracy(p, y)
        assert abs(macro_f1(perm[p], perm[y], c) - macro_f1(p, y, c)) < 1e-12

    def test_auc(self):
        rng = np.random.default_rng(21)
        labels = np.concatenate([np.arange(4), rng.integers(0, 4, size=36)])
        scores = rng.random((40, 4))
        perm = np.array([2, 0, 3, 1])
        permuted = np.empty_like(scores)
        permuted[:, perm] = scores
        assert abs(macro_auc(permuted, perm[labels]) -
                   macro_auc(scores, labels)) < 1e-12


class TestEvalReport:
    def build(self):
        rng = np.random.default_rng(17)
        predictions, scores, labels = {}, {}, {}
        for cid in (0, 1, 2):
            n = 30 + 10 * cid
            labels[cid] = rng.integers(0, 4, size=n)
            predictions[cid] = rng.integers(0, 4, size=n)
            scores[cid] = rng.random((n, 4))
        return predictions, scores, labels

    def test_per_client_matches_direct_calls(self):
        predictions, scores, labels = self.build()
        report = evaluate_clients(predictions, scores, labels, 4)
        for entry in report.per_client:
            cid = entry.client_id
            assert entry.accuracy == accuracy(predictions[cid], labels[cid])
            assert entry.macro_f1 == macro_f1(predictions[cid], labels[cid],
                                              4)
            assert entry.macro_auc == macro_auc(scores[cid], labels[cid])
            assert entry.num_samples == labels[cid].size

    def test_pooled_matches_concatenation(self):
        predictions, scores, labels = self.build()
        report = evaluate_clients(predictions, scores, labels, 4)
        pooled_p = np.concatenate([predictions[c] for c in (0, 1, 2)])
        pooled_s = np.concatenate([scores[c] for c in (0, 1, 2)])
        pooled_y = np.concatenate([labels[c] for c in (0, 1, 2)])
        assert report.pooled_accuracy == accuracy(pooled_p, pooled_y)
        assert report.pooled_macro_f1 == macro_f1(pooled_p, pooled_y, 4)
        assert report.pooled_macro_auc == macro_auc(pooled_s, pooled_y)
        assert np.array_equal(report.confusion,
                              confusion_matrix(pooled_p, pooled_y, 4))
        assert report.confusion.sum() == sum(labels[c].size
                                             for c in (0, 1, 2))

    def test_client_means(self):
        predictions, scores, labels = self.build()
        report = evaluate_clients(predictions, scores, labels, 4)
        accs = [c.accuracy for c in report.per_client]
        assert report.client_mean_accuracy == float(np.mean(accs))
        f1s = [c.macro_f1 for c in report.per_client]
        assert report.client_mean_macro_f1 == float(np.mean(f1s))

    def test_auc_ineligible_client_reported_as_none(self):
        predictions, scores, labels = self.build()
        labels[1] = np.zeros(40, dtype=int)  # single class, no AUC
        report = evaluate_clients(predictions, scores, labels, 4)
        by_id = {c.client_id: c for c in report.per_client}
        assert by_id[1].macro_auc is None
        others = [by_id[0].macro_auc, by_id[2].macro_auc]
        assert report.client_mean_macro_auc == float(np.mean(others))

    def test_as_dict_is_json_ready(self):
        predictions, scores, labels = self.build()
        report = evaluate_clients(predictions, scores, labels, 4)
        payload = json.loads(json.dumps(report.as_dict()))
        assert payload["pooled"]["accuracy"] == report.pooled_accuracy
        assert len(payload["per_client"]) == 3
        assert payload["confusion"] == report.confusion.tolist()

    def test_mismatched_client_ids(self):
        predictions, scores, labels = self.build()
        del scores[2]
        with pytest.raises(DataError):
            evaluate_clients(predictions, scores, labels, 4)
