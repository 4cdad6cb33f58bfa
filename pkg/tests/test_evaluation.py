import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from plncf.errors import EmptyResults, LengthMismatch, TooFewSeeds, ZeroVariance
from plncf.evaluation import (
    EvalReport,
    RankResult,
    aggregate_seeds,
    average_ranks,
    evaluate,
    hr_at_k,
    load_report,
    mean_std,
    ndcg_at_k,
    rank_candidate_sets,
    rank_positive,
    save_report,
    separability_accuracy_analysis,
    spearman_rho,
    write_metric_table,
)
from plncf.models import ARCHS, forward, init_model
from plncf.splits import CandidateSet


def _candidate_sets(n, m, rng):
    sets = []
    for u in range(n):
        groups = rng.choice(m, size=100, replace=False)
        sets.append(CandidateSet(u, int(groups[0]), tuple(int(g) for g in groups[1:])))
    return sets


def brute_average_ranks(values):
    return [1 + sum(w < v for w in values) + (sum(w == v for w in values) - 1) / 2 for v in values]


def brute_spearman(xs, ys):
    rx, ry = brute_average_ranks(xs), brute_average_ranks(ys)
    mx, my = sum(rx) / len(rx), sum(ry) / len(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    return cov / math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))


class TestRanking:
    @pytest.mark.parametrize("arch", ARCHS)
    def test_matches_sort_oracle(self, arch):
        rng = np.random.default_rng(1)
        state = init_model(arch, 12, 150, 3)
        X = rng.dirichlet(np.ones(16), size=12)
        sets = _candidate_sets(12, 150, rng)
        got = rank_candidate_sets(state, sets, X)
        for cs, res in zip(sets, got):
            logits = forward(state, np.full(100, cs.user_id), cs.groups, np.repeat(X[[cs.user_id]], 100, 0)).logit
            order = sorted(range(100), key=lambda i: -logits[i])
            assert res.rank == order.index(0) + 1

    def test_positive_strictly_best(self):
        state = init_model("MF", 1, 100, 0)
        state.params["Q"][:] = 0.0
        state.params["Q"][7] = state.params["P"][0]
        cs = CandidateSet(0, 7, tuple(g for g in range(100) if g != 7))
        assert rank_positive(state, cs, np.ones(16)).rank == 1

    def test_all_ties_rank_last(self):
        state = init_model("MF", 1, 100, 0)
        state.params["P"][:] = 0.0
        cs = CandidateSet(0, 3, tuple(g for g in range(100) if g != 3))
        assert rank_positive(state, cs, np.ones(16)).rank == 100

    def test_batched_equals_single(self):
        rng = np.random.default_rng(2)
        state = init_model("NeuMF_PL", 5, 120, 1)
        X = rng.dirichlet(np.ones(16), size=5)
        sets = _candidate_sets(5, 120, rng)
        batched = rank_candidate_sets(state, sets, X)
        single = [rank_positive(state, cs, X[cs.user_id]) for cs in sets]
        assert batched == single


class TestMetrics:
    def test_hr_all_first(self):
        assert hr_at_k([1] * 10) == 100.0

    def test_hr_half(self):
        assert hr_at_k([RankResult(0, 1), RankResult(1, 6)]) == 50.0

    def test_hr_percentage_scale(self):
        assert hr_at_k([1] * 7 + [50] * 158) == pytest.approx(700 / 165, abs=1e-12)

    def test_ndcg_values(self):
        assert ndcg_at_k([1]) == 100.0
        assert ndcg_at_k([3]) == pytest.approx(50.0, abs=1e-12)
        assert ndcg_at_k([6]) == 0.0

    def test_empty(self):
        with pytest.raises(EmptyResults):
            hr_at_k([])
        with pytest.raises(EmptyResults):
            ndcg_at_k([])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 100), min_size=1, max_size=50))
    def test_ndcg_below_hr_and_monotone_in_k(self, ranks):
        assert ndcg_at_k(ranks) <= hr_at_k(ranks) + 1e-12
        for k in range(1, 100):
            assert hr_at_k(ranks, k) <= hr_at_k(ranks, k + 1)
            assert ndcg_at_k(ranks, k) <= ndcg_at_k(ranks, k + 1) + 1e-12

    def test_evaluate_report(self):
        rng = np.random.default_rng(0)
        state = init_model("MLP", 6, 110, 0)
        rep = evaluate(state, _candidate_sets(6, 110, rng), rng.random((6, 16)), protocol="loo", seed=42)
        assert rep.model == "MLP" and len(rep.per_user) == 6
        assert rep.hr_at_5 == hr_at_k(rep.per_user)

    def test_report_round_trip(self, tmp_path):
        rep = EvalReport("MF", "loo", 42, 4.2, 2.1, [RankResult(0, 3), RankResult(1, 90)])
        save_report(rep, tmp_path / "r.json")
        assert load_report(tmp_path / "r.json") == rep


class TestAggregation:
    def test_constant(self):
        assert mean_std([4, 4, 4, 4, 4]) == (4.0, 0.0)

    def test_two_point(self):
        mean, std = mean_std([2, 4])
        assert mean == 3.0 and std == pytest.approx(math.sqrt(2), abs=1e-15)

    def test_too_few(self):
        with pytest.raises(TooFewSeeds):
            mean_std([1.0])

    def test_table_shape(self, tmp_path):
        reports = [EvalReport(a, "loo", s, 1.0 + s / 100, 0.5, []) for a in ARCHS for s in (42, 52)]
        rows = write_metric_table(aggregate_seeds(reports), tmp_path / "t.csv")
        assert len(rows) == 7 and all(len(r) == 3 for r in rows)
        assert rows[1] == ["MF", "1.47 ± 0.07", "0.50 ± 0.00"]
        assert [r[0] for r in rows[1:]] == ["MF", "MF-PL", "MLP", "MLP-PL", "NeuMF", "NeuMF-PL"]

    def test_mixed_protocols(self):
        with pytest.raises(ValueError):
            aggregate_seeds([EvalReport("MF", "loo", 1, 1, 1), EvalReport("MF", "ratio", 2, 1, 1)])

    def test_single_seed_cell(self):
        with pytest.raises(TooFewSeeds):
            aggregate_seeds([EvalReport("MF", "loo", 1, 1, 1)])


class TestSpearman:
    def test_monotone(self):
        assert spearman_rho([1, 2, 3, 4], [2, 5, 9, 100]) == pytest.approx(1.0, abs=1e-12)
        assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0, abs=1e-12)

    def test_ties(self):
        assert spearman_rho([1, 2, 2, 4], [10, 20, 20, 40]) == pytest.approx(1.0, abs=1e-12)

    def test_average_ranks(self):
        np.testing.assert_array_equal(average_ranks([3, 1, 3, 2, 3]), [4, 1, 4, 2, 4])

    @settings(max_examples=300, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=30))
    def test_matches_brute_force_and_scipy(self, pairs):
        xs, ys = [p[0] for p in pairs], [p[1] for p in pairs]
        if len(set(xs)) < 2 or len(set(ys)) < 2:
            with pytest.raises(ZeroVariance):
                spearman_rho(xs, ys)
            return
        rho = spearman_rho(xs, ys)
        assert abs(rho - brute_spearman(xs, ys)) < 1e-12
        assert abs(rho - scipy.stats.spearmanr(xs, ys).statistic) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=20, unique=True), st.integers(0, 2**31))
    def test_monotone_transform_invariance(self, xs, seed):
        ys = np.random.default_rng(seed).normal(size=len(xs))
        xs = np.array(xs, dtype=float)
        assert spearman_rho(xs, ys) == pytest.approx(spearman_rho(np.exp(xs / 100), ys), abs=1e-12)
        assert spearman_rho(xs, ys) == pytest.approx(-spearman_rho(-(xs**3), ys), abs=1e-12)

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            spearman_rho([1, 2, 3], [1, 2])
        with pytest.raises(LengthMismatch):
            spearman_rho([1, 2], [1, 2])
        with pytest.raises(ZeroVariance):
            spearman_rho([1, 1, 1], [1, 2, 3])

    def test_separability_antimonotone(self):
        runs = [(0.1 * i, 10 - i) for i in range(30)]
        assert separability_accuracy_analysis(runs) == pytest.approx(-1.0, abs=1e-12)

    def test_permutation_null(self):
        rng = np.random.default_rng(5)
        xs = rng.normal(size=30)
        rhos = [spearman_rho(xs, rng.permutation(xs)) for _ in range(2000)]
        assert abs(np.mean(rhos)) < 0.02
