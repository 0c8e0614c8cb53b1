"""ROC construction, TPR at fixed FPR and log-AUROC against direct oracles."""

import math

import numpy as np
import pytest

from bitleak.metrics import ROCReport, log_auroc, mann_whitney_auroc, roc, tpr_at_fpr


def labels(pos, neg):
    return np.r_[np.asarray(pos, float), np.asarray(neg, float)], np.r_[np.ones(len(pos), bool), np.zeros(len(neg), bool)]


class TestRoc:
    def test_perfect(self):
        rep = roc(*labels([2, 3], [0, 1]))
        assert rep.auroc == 1.0
        assert tpr_at_fpr(rep, 0.001) == 1.0
        assert rep.log_auroc == pytest.approx(1.0)

    def test_all_tied(self):
        rep = roc(np.zeros(6), np.array([1, 0, 1, 0, 1, 0], bool))
        assert rep.auroc == 0.5
        np.testing.assert_array_equal(rep.fpr, [0, 1])
        np.testing.assert_array_equal(rep.tpr, [0, 1])

    def test_inverted(self):
        rep = roc(*labels([1, 0], [2, 3]))
        assert rep.auroc == 0.0
        assert tpr_at_fpr(rep, 0.001) == 0.0
        assert rep.log_auroc == 0.0

    def test_single_class(self):
        with pytest.raises(ValueError):
            roc(np.arange(3.0), np.ones(3, bool))

    def test_endpoints_and_monotone(self):
        rng = np.random.default_rng(0)
        rep = roc(rng.normal(size=300), rng.random(300) < 0.4)
        assert (rep.fpr[0], rep.tpr[0], rep.fpr[-1], rep.tpr[-1]) == (0, 0, 1, 1)
        assert np.all(np.diff(rep.fpr) >= 0) and np.all(np.diff(rep.tpr) >= 0)

    def test_mann_whitney_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(2, 80))
            scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
            truth = rng.random(n) < 0.5
            truth[:2] = [True, False]
            assert abs(roc(scores, truth).auroc - mann_whitney_auroc(scores, truth)) < 1e-9

    def test_increasing_transform_invariance(self):
        rng = np.random.default_rng(2)
        s, t = rng.normal(size=200), rng.random(200) < 0.5
        a, b = roc(s, t), roc(np.exp(3 * s) + 7, t)
        np.testing.assert_array_equal(a.tpr, b.tpr)
        np.testing.assert_array_equal(a.fpr, b.fpr)
        assert (a.auroc, a.log_auroc) == (b.auroc, b.log_auroc)


class TestTprAtFpr:
    def test_random_scores_null(self):
        rng = np.random.default_rng(3)
        vals = []
        for _ in range(20):
            s, t = rng.random(100_000), np.r_[np.ones(50_000, bool), np.zeros(50_000, bool)]
            vals.append(tpr_at_fpr(roc(s, t), 0.001))
        assert abs(np.mean(vals) - 0.001) <= 0.0005

    def test_interpolates(self):
        # negatives at 3, 1; positives at 2, 0 -> curve (0,0) (.5,0) (.5,.5) (1,.5) (1,1)
        rep = roc(*labels([2, 0], [3, 1]))
        assert tpr_at_fpr(rep, 0.25) == 0.0
        assert tpr_at_fpr(rep, 0.5) == 0.5

    def test_under_resolved_flag(self):
        rep = roc(*labels([5, 4, 1], [3, 2, 0]))
        assert tpr_at_fpr(rep, 0.001) == pytest.approx(2 / 3)
        assert 0.001 in rep.under_resolved

    def test_resolved_level_not_flagged(self):
        rng = np.random.default_rng(4)
        rep = roc(rng.normal(size=4000), np.r_[np.ones(2000, bool), np.zeros(2000, bool)])
        tpr_at_fpr(rep, 0.001)
        assert 0.001 not in rep.under_resolved

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.1])
    def test_level_range(self, level):
        with pytest.raises(ValueError):
            tpr_at_fpr(roc(*labels([1], [0])), level)


class TestLogAuroc:
    def test_diagonal_closed_form(self):
        rep = ROCReport.from_curve([0.0, 1.0], [0.0, 1.0])
        assert rep.auroc == 0.5
        assert abs(rep.log_auroc - 0.14462) <= 1e-4
        assert rep.log_auroc == pytest.approx((1 - 1e-3) / math.log(1000), abs=1e-4)

    def test_step_curve(self):
        # TPR jumps to 1 at FPR 0.01: area = ln(100) / ln(1000)
        rep = ROCReport.from_curve([0.0, 0.01, 0.01, 1.0], [0.0, 0.0, 1.0, 1.0])
        assert log_auroc(rep) == pytest.approx(2 / 3, abs=2e-3)

    def test_serialization(self):
        rep = roc(*labels([3, 2], [1, 0]))
        d = rep.to_dict()
        assert d["tpr_at"]["0.001"] == 1.0 and d["auroc"] == 1.0
        assert rep.curve_csv().splitlines()[0] == "fpr,tpr"
