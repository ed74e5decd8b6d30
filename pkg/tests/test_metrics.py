"""F-measure and tatum error rate.

The TER implementation is checked against a brute-force oracle that
recursively explores every edit script (no tabulation), so the two
sides share no code path.
"""

import numpy as np
import pytest

from drumscribe.errors import ValidationError
from drumscribe.metrics import (
    InstrumentScores,
    PieceEval,
    corpus_metrics,
    f_measure,
    match_onsets,
    ter,
)
from drumscribe.score import DrumScore, OnsetEvent


def brute_force_ter(a: np.ndarray, b: np.ndarray) -> int:
    """Minimum edit cost by exhaustive recursion over edit scripts."""
    m = a.shape[0]

    def rec(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return max(i, j) * m
        sub = int(np.abs(a[:, i - 1] - b[:, j - 1]).sum())
        return min(rec(i - 1, j) + m, rec(i, j - 1) + m, rec(i - 1, j - 1) + sub)

    return rec(a.shape[1], b.shape[1])


def random_score(rng, n):
    return rng.integers(0, 2, size=(3, n), dtype=np.int64)


class TestTer:
    def test_identical_scores(self):
        y = DrumScore(np.eye(3, 5, dtype=int))
        assert ter(y, y) == 0

    def test_against_empty(self):
        y = np.ones((3, 2), dtype=int)
        assert ter(y, np.zeros((3, 0), dtype=int)) == 6
        assert ter(np.zeros((3, 0), dtype=int), y) == 6

    def test_single_column_substitution(self):
        a = np.array([[1], [0], [0]])
        b = np.array([[0], [1], [0]])
        assert ter(a, b) == 2  # substitution beats delete + insert (cost 6)

    def test_oracle_equivalence(self):
        rng = np.random.default_rng(42)
        for _ in range(60):
            a = random_score(rng, rng.integers(1, 7))
            b = random_score(rng, rng.integers(1, 7))
            assert ter(a, b) == brute_force_ter(a, b)

    def test_metric_properties(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a = random_score(rng, rng.integers(1, 7))
            b = random_score(rng, rng.integers(1, 7))
            c = random_score(rng, rng.integers(1, 7))
            ab, ba = ter(a, b), ter(b, a)
            assert ab == ba
            assert ter(a, b) + ter(b, c) >= ter(a, c)
            assert (ab == 0) == (a.shape == b.shape and (a == b).all())

    def test_upper_bound(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a = random_score(rng, rng.integers(1, 10))
            b = random_score(rng, rng.integers(1, 10))
            assert ter(a, b) <= 3 * max(a.shape[1], b.shape[1])

    def test_instrument_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            ter(np.zeros((3, 2), dtype=int), np.zeros((2, 2), dtype=int))


class TestFMeasure:
    def gt(self, *times):
        return [OnsetEvent(0, t) for t in times]

    def test_exact_match(self):
        events = self.gt(0.5, 1.0, 1.5)
        scores = f_measure(events, events)
        assert scores["total"].f_measure == 100.0

    def test_partial_recall(self):
        est = self.gt(0.5, 1.0)
        gt = self.gt(0.5, 1.0, 2.0, 3.0)
        sc = f_measure(est, gt)["BD"]
        assert sc.precision == 100.0
        assert sc.recall == 50.0
        assert sc.f_measure == pytest.approx(66.7, abs=0.05)

    def test_outside_tolerance(self):
        sc = f_measure(self.gt(1.060), self.gt(1.0))["total"]
        assert sc.n_correct == 0
        assert sc.f_measure == 0.0

    def test_tolerance_boundary(self):
        assert f_measure(self.gt(1.049), self.gt(1.0))["total"].f_measure == 100.0
        assert f_measure(self.gt(1.051), self.gt(1.0))["total"].f_measure == 0.0

    def test_perfect_silence_convention(self):
        sc = f_measure([], [])["total"]
        assert (sc.precision, sc.recall, sc.f_measure) == (100.0, 100.0, 100.0)

    def test_f_zero_when_nothing_matches(self):
        sc = f_measure(self.gt(5.0), self.gt(1.0))["total"]
        assert sc.f_measure == 0.0

    def test_symmetry_swaps_precision_and_recall(self):
        rng = np.random.default_rng(2)
        est = [OnsetEvent(int(rng.integers(0, 3)), float(t))
               for t in np.sort(rng.uniform(0, 10, 15))]
        gt = [OnsetEvent(int(rng.integers(0, 3)), float(t))
              for t in np.sort(rng.uniform(0, 10, 12))]
        fwd = f_measure(est, gt)["total"]
        rev = f_measure(gt, est)["total"]
        assert fwd.precision == rev.recall
        assert fwd.recall == rev.precision
        assert fwd.n_correct == rev.n_correct

    def test_one_to_one_matching(self):
        # two estimates near one reference: only one may match
        sc = f_measure(self.gt(1.00, 1.01), self.gt(1.0))["total"]
        assert sc.n_correct == 1

    def test_greedy_matching_consumes_in_time_order(self):
        assert match_onsets([1.0], [0.96, 1.04]) == 1


class TestCorpusMetrics:
    def make_piece(self, est_times, gt_times):
        est = [OnsetEvent(0, t) for t in est_times]
        gt = [OnsetEvent(0, t) for t in gt_times]
        n = max(len(gt_times), 1)
        act = np.zeros((3, n), dtype=int)
        act[0, : len(gt_times)] = 1
        gt_score = DrumScore(act)
        est_score = DrumScore(act)
        return PieceEval(est, gt, est_score, gt_score)

    def test_single_piece_matches_piece_metrics(self):
        piece = self.make_piece([0.5, 1.5], [0.5, 1.5])
        report = corpus_metrics([piece])
        direct = f_measure(piece.est_onsets, piece.gt_onsets)["total"]
        assert report.scores["total"].f_measure == direct.f_measure
        assert report.ter == 0

    def test_pooled_counts_not_average_of_f(self):
        perfect = self.make_piece([1.0, 2.0], [1.0, 2.0])
        allwrong = self.make_piece([11.0, 12.0], [5.0, 6.0])
        report = corpus_metrics([perfect, allwrong])
        # pooled: 2 correct of 4 estimated and 4 reference onsets
        assert report.scores["total"].precision == 50.0
        assert report.scores["total"].recall == 50.0
        assert report.scores["total"].f_measure == pytest.approx(50.0)

    def test_ter_sums_per_piece(self):
        a = self.make_piece([1.0], [1.0])
        b = self.make_piece([1.0], [1.0])
        report = corpus_metrics([a, b])
        assert report.ter == ter(a.gt_score, a.est_score) + ter(b.gt_score, b.est_score)
        assert report.gt_tatums == a.gt_score.num_tatums + b.gt_score.num_tatums

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValidationError):
            corpus_metrics([])

    def test_report_serializes(self, tmp_path):
        report = corpus_metrics([self.make_piece([1.0], [1.0])])
        report.save(tmp_path / "report.json", tmp_path / "report.txt")
        assert (tmp_path / "report.json").exists()
        table = (tmp_path / "report.txt").read_text()
        assert "F-measure" in table and "TER" in table


class TestInstrumentScores:
    def test_zero_estimates_with_ground_truth(self):
        sc = InstrumentScores(n_est=0, n_gt=4, n_correct=0)
        assert sc.precision == 0.0
        assert sc.recall == 0.0
        assert sc.f_measure == 0.0
