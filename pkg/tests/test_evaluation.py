import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from seqfm.evaluation import (
    EvalReport,
    MetricError,
    RankedCase,
    auc,
    evaluate,
    hr_at_k,
    ndcg_at_k,
    rank_from_scores,
    regression_metrics,
)
from seqfm.featurestore import FeatureSpace, Instance
from seqfm.numerics import Rng


def cases(ranks, J=1000):
    return [RankedCase(r, J) for r in ranks]


class TestRank:
    def test_truth_highest(self):
        assert rank_from_scores(5.0, [1.0, 2.0, 4.9]) == 1

    def test_truth_lowest_of_1001(self):
        assert rank_from_scores(-1.0, np.arange(1000.0)) == 1001

    def test_pessimistic_ties(self):
        assert rank_from_scores(1.0, [1.0, 1.0, 2, 3, 4, 5, 6, 0.5]) == 8

    def test_case_bounds(self):
        with pytest.raises(ValueError):
            RankedCase(0, 10)
        with pytest.raises(ValueError):
            RankedCase(11, 10)


class TestRankingMetrics:
    def test_hr(self):
        assert hr_at_k(cases([1, 5, 30]), 10) == 2 / 3
        assert hr_at_k(cases([1, 1, 1]), 10) == 1.0
        assert hr_at_k(cases([11]), 10) == 0.0

    def test_ndcg(self):
        assert ndcg_at_k(cases([1]), 10) == 1.0
        assert ndcg_at_k(cases([3]), 5) == 0.5
        assert ndcg_at_k(cases([1, 3, 12]), 10) == 0.5

    def test_empty(self):
        with pytest.raises(MetricError):
            hr_at_k([], 5)
        with pytest.raises(MetricError):
            ndcg_at_k([], 5)

    @given(st.lists(st.integers(1, 60), min_size=1, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_monotone_and_bounded(self, ranks):
        cs = cases(ranks, 60)
        prev_hr = prev_nd = 0.0
        for k in (1, 5, 10, 20, 60):
            h, n = hr_at_k(cs, k), ndcg_at_k(cs, k)
            assert h >= prev_hr and n >= prev_nd and n <= h + 1e-15
            assert abs(h - oracles.hr(ranks, k)) <= 1e-12
            assert abs(n - oracles.ndcg(ranks, k)) <= 1e-12
            prev_hr, prev_nd = h, n


class TestAuc:
    def test_brute_force_example(self):
        assert auc([0.9, 0.4], [0.3, 0.5]) == 0.75

    def test_separated(self):
        assert auc([2, 3], [0, 1]) == 1.0

    def test_all_ties(self):
        assert auc([1, 1, 1], [1, 1]) == 0.5

    def test_empty_side(self):
        with pytest.raises(MetricError):
            auc([], [1.0])

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=20),
           st.lists(st.integers(-5, 5), min_size=1, max_size=20))
    @settings(max_examples=150, deadline=None)
    def test_matches_pairs_and_monotone_invariant(self, pos, neg):
        a = auc(pos, neg)
        assert abs(a - oracles.auc_pairs(pos, neg)) <= 1e-12
        f = lambda x: np.exp(np.asarray(x, float) / 3.0) * 7 - 2  # noqa: E731
        assert abs(auc(f(pos), f(neg)) - a) <= 1e-12


class TestRegressionMetrics:
    def test_mae(self):
        assert regression_metrics([3.5, 4.0], [3, 5])[0] == 0.75

    def test_rrse_hand(self):
        assert regression_metrics([2, 2], [1, 3]) == (1.0, 1.0, 1.0)

    def test_perfect(self):
        assert regression_metrics([1, 2, 5], [1, 2, 5]) == (0.0, 0.0, 0.0)

    def test_constant_truths(self):
        with pytest.raises(MetricError):
            regression_metrics([1, 2], [3, 3])

    def test_mean_predictor_rrse_is_one(self):
        y = np.array([1.0, 2.0, 4.0, 7.5])
        assert regression_metrics(np.full(4, y.mean()), y)[2] == pytest.approx(1.0, abs=1e-15)

    def test_oracle(self):
        p, y = [1.2, 3.3, 2.0, 4.8], [1.0, 3.0, 2.5, 5.0]
        got = regression_metrics(p, y)
        for a, b in zip(got, oracles.mae_rmse_rrse(p, y)):
            assert abs(a - b) <= 1e-12


class FixedScorer:
    """Scores candidates by a per-object table so ranks are known in advance."""

    def __init__(self, space, table):
        self.space = space
        self.table = table

    def score(self, insts):
        return np.array([self.table(i) for i in insts], dtype=float)


def space(objects=20):
    return FeatureSpace(m_static=3 + objects, m_dynamic=objects, user_count=3, object_count=objects)


class TestEvaluate:
    def test_ranking_known_ranks(self):
        sp = space(20)
        # object o scores -o, so the truth's rank is 1 + #unvisited objects with a smaller id
        insts = [Instance((0, 3 + 0), (), 1, 0, 0, 0), Instance((1, 3 + 2), (), 1, 1, 0, 2),
                 Instance((2, 3 + 11), (), 1, 2, 0, 11)]
        visited = {0: {0}, 1: {2}, 2: {11}}
        rep = evaluate(FixedScorer(sp, lambda i: -i.object_id), insts, "ranking", visited, Rng(0), J=1000, ks=(10,))
        assert rep.metrics["HR@10"] == 2 / 3
        assert rep.metrics["NDCG@10"] == 0.5
        assert rep.case_count == 3

    def test_six_metrics(self):
        sp = space(20)
        insts = [Instance((0, 3), (), 1, 0, 0, 0)]
        rep = evaluate(FixedScorer(sp, lambda i: 0.0), insts, "ranking", {}, Rng(0))
        assert list(rep.metrics) == ["HR@5", "HR@10", "HR@20", "NDCG@5", "NDCG@10", "NDCG@20"]

    def test_regression_perfect(self):
        sp = space()
        insts = [Instance((0, 3 + k), (), float(k), 0, 0, k) for k in range(5)]
        rep = evaluate(FixedScorer(sp, lambda i: i.label), insts, "regression", {}, Rng(0))
        assert rep.metrics["MAE"] == 0.0 and rep.metrics["RRSE"] == 0.0

    def test_classification_constant(self):
        sp = space()
        insts = [Instance((0, 3 + k), (), 1.0, 0, 0, k) for k in range(5)]
        rep = evaluate(FixedScorer(sp, lambda i: 0.0), insts, "classification", {0: set(range(5))}, Rng(0))
        assert rep.metrics["AUC"] == 0.5
        assert rep.case_count == 10
        assert rep.metrics["RMSE"] == pytest.approx(0.5, abs=1e-12)

    def test_classification_labeled(self):
        sp = space()
        insts = [Instance((0, 3 + k), (), float(k % 2), 0, 0, k) for k in range(6)]
        rep = evaluate(FixedScorer(sp, lambda i: i.object_id % 2), insts, "classification", {}, Rng(0))
        assert rep.metrics["AUC"] == 1.0 and rep.case_count == 6

    def test_unknown_task(self):
        with pytest.raises(MetricError):
            evaluate(FixedScorer(space(), lambda i: 0), [Instance((0, 3), (), 1, 0, 0, 0)], "cluster", {}, Rng(0))

    def test_deterministic(self):
        sp = space(50)
        insts = [Instance((u, 3 + u), (), 1, u, 0, u) for u in range(3)]
        scorer = FixedScorer(sp, lambda i: math.sin(i.object_id))
        a = evaluate(scorer, insts, "ranking", {}, Rng(5), J=10)
        b = evaluate(scorer, insts, "ranking", {}, Rng(5), J=10)
        assert a == b and a.to_json(timing=False) == b.to_json(timing=False)

    def test_report_formats(self):
        rep = EvalReport("ranking", {"HR@5": 0.25, "NDCG@5": 0.125}, 4, 1.5)
        text = rep.to_text()
        assert "HR@5=0.250000" in text and "wall_time=1.500" in text
        assert "wall_time" not in rep.to_text(timing=False)
        d = json.loads(rep.to_json())
        assert d["metrics"] == rep.metrics and d["case_count"] == 4
