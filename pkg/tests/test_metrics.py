import math

import numpy as np
import pytest
from scipy import optimize

from gma import metrics as mt
from gma.errors import ContractError
from gma.metrics import RankedRound


def brute_rank(scores, gt):
    """Position of gt after sorting by score, averaged over every tie order."""
    n = len(scores)
    positions = []
    for i in range(n):
        better = sum(1 for j in range(n) if scores[j] > scores[i])
        tied = [j for j in range(n) if scores[j] == scores[i]]
        if i == gt:
            # every slot the tie group can occupy is equally likely
            positions = [better + 1 + k for k in range(len(tied))]
    return sum(positions) / len(positions)


def brute_dcg(scores, rel):
    n = len(scores)
    total = 0.0
    for i in range(n):
        better = sum(1 for j in range(n) if scores[j] > scores[i])
        tied = sum(1 for j in range(n) if scores[j] == scores[i])
        total += rel[i] * np.mean([1 / math.log2(better + k + 2) for k in range(tied)])
    return total


class TestRetrieval:
    def test_perfect_ranking(self):
        rounds = [RankedRound(np.arange(10.0)[::-1], 0, np.linspace(1, 0.1, 10)) for _ in range(3)]
        m = mt.retrieval_metrics(rounds)
        assert m.r_at == {1: 1.0, 5: 1.0, 10: 1.0}
        assert (m.mrr, m.mean_rank, m.ndcg) == (1.0, 1.0, 1.0)

    def test_rank_four_of_hundred(self):
        scores = np.linspace(1, 0, 100)
        m = mt.retrieval_metrics([RankedRound(scores, 3)])
        assert m.r_at[1] == 0.0 and m.r_at[5] == 1.0
        assert m.mrr == 0.25 and m.mean_rank == 4.0

    def test_ties_take_mean_rank(self):
        assert mt.gt_rank(np.array([1.0, 3.0, 3.0, 3.0]), 2) == 2.0
        assert mt.gt_rank(np.array([5.0, 5.0]), 1) == 1.5

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        rounds = []
        for _ in range(50):
            n = int(rng.integers(5, 30))
            scores = np.round(rng.normal(size=n), 1)  # coarse rounding forces ties
            rel = rng.integers(0, 4, size=n) / 3.0
            gt = int(rng.integers(n))
            rel[gt] = 1.0
            rounds.append(RankedRound(scores, gt, rel))
        ranks = [brute_rank(r.scores.tolist(), r.gt_index) for r in rounds]
        ndcgs = [brute_dcg(r.scores, r.relevance) / (np.sort(r.relevance)[::-1] @ (1 / np.log2(np.arange(2, len(r.scores) + 2))))
                 for r in rounds]
        m = mt.retrieval_metrics(rounds)
        for k in (1, 5, 10):
            assert m.r_at[k] == np.mean([x <= k for x in ranks])
        assert m.mrr == np.mean([1 / x for x in ranks])
        assert m.mean_rank == np.mean(ranks)
        assert m.ndcg == pytest.approx(np.mean(ndcgs), abs=1e-12)

    def test_invariants_on_random_rounds(self):
        rng = np.random.default_rng(1)
        n = 20
        rounds = [RankedRound(rng.normal(size=n), int(rng.integers(n))) for _ in range(200)]
        m = mt.retrieval_metrics(rounds)
        assert 0 <= m.r_at[1] <= m.r_at[5] <= m.r_at[10] <= 1
        assert m.mrr >= m.r_at[1] + (1 - m.r_at[1]) / n
        assert m.mean_rank >= 1 and 0 <= m.ndcg <= 1

    def test_table_row_keys(self):
        row = mt.retrieval_metrics([RankedRound([1.0, 0.0], 0)]).to_table_row()
        assert list(row) == ["R@1", "R@5", "R@10", "MRR", "Mean", "NDCG"]

    def test_contract_errors(self):
        with pytest.raises(ContractError):
            mt.retrieval_metrics([])
        with pytest.raises(ContractError):
            RankedRound([1.0, 2.0], 2)
        with pytest.raises(ContractError):
            RankedRound([1.0, 2.0], 0, [0.0, 1.0])


def rank_then_pearson(a, b):
    def ranks(x):
        x = list(x)
        return [sum(1 for y in x if y < v) + (sum(1 for y in x if y == v) + 1) / 2 for v in x]

    ra, rb = np.array(ranks(a)), np.array(ranks(b))
    ra, rb = ra - ra.mean(), rb - rb.mean()
    return float(ra @ rb / math.sqrt((ra @ ra) * (rb @ rb)))


class TestSpearman:
    def test_identity_and_reversal(self):
        a = np.random.default_rng(2).normal(size=(4, 4))
        assert mt.spearman_rc(a, a)[0] == 1.0
        assert mt.spearman_rc(a, -a)[0] == -1.0

    def test_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        b[0, :2] = b[1, 0]  # include ties
        rho, p = mt.spearman_rc(a, b)
        assert abs(rho - rank_then_pearson(a.ravel(), b.ravel())) <= 1e-12
        assert 0.0 <= p <= 1.0

    def test_p_value_t_approximation(self):
        from scipy import stats
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        rho, p = mt.spearman_rc(a, b)
        t = rho * math.sqrt(7 / (1 - rho ** 2))
        assert p == pytest.approx(2 * stats.t.sf(abs(t), 7), abs=1e-15)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((5, 5)), rng.random((5, 5))
        assert mt.spearman_rc(np.exp(3 * a), b ** 3)[0] == pytest.approx(mt.spearman_rc(a, b)[0], abs=1e-15)

    def test_errors(self):
        with pytest.raises(ContractError, match="constant"):
            mt.spearman_rc(np.ones((3, 3)), np.arange(9.0).reshape(3, 3))
        with pytest.raises(ContractError):
            mt.spearman_rc(np.ones((2, 1)), np.ones((2, 1)))
        with pytest.raises(ContractError):
            mt.spearman_rc(np.ones((3, 3)), np.ones((2, 2)))


def dual_lp_oracle(a, b):
    """Dual LP of the same transport problem: max <a,u> + <b,v> s.t. u_i + v_j <= c_ij."""
    pa, pb = a.ravel() / a.sum(), b.ravel() / b.sum()
    cost = mt.grid_cost(a.shape)
    n = len(pa)
    rows = []
    for i in range(n):
        for j in range(n):
            r = np.zeros(2 * n)
            r[i], r[n + j] = 1.0, 1.0
            rows.append(r)
    res = optimize.linprog(-np.concatenate([pa, pb]), A_ub=np.array(rows), b_ub=cost.ravel(),
                           bounds=(None, None), method="highs")
    assert res.success
    return -res.fun


class TestEMD:
    def test_identical_is_zero(self):
        a = np.random.default_rng(6).random((4, 4))
        assert mt.emd_2d(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift(self):
        a, b = np.zeros((3, 3)), np.zeros((3, 3))
        a[0, 0], b[0, 1] = 1.0, 1.0
        assert mt.emd_2d(a, b) == pytest.approx(1.0, abs=1e-12)

    def test_diagonal_shift_is_euclidean(self):
        a, b = np.zeros((3, 3)), np.zeros((3, 3))
        a[0, 0], b[2, 2] = 2.0, 5.0
        assert mt.emd_2d(a, b) == pytest.approx(2 * math.sqrt(2), abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_primal_and_dual_lp(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((3, 3)), rng.random((3, 3))
        got = mt.emd_2d(a, b)
        pa, pb = a.ravel() / a.sum(), b.ravel() / b.sum()
        assert abs(got - mt.transport_linprog(pa, pb, mt.grid_cost((3, 3)))) <= 1e-9
        assert abs(got - dual_lp_oracle(a, b)) <= 1e-9

    def test_sparse_masses(self):
        rng = np.random.default_rng(7)
        a, b = rng.random((4, 4)), rng.random((4, 4))
        a[a < 0.6] = 0.0
        b[b < 0.6] = 0.0
        pa, pb = a.ravel() / a.sum(), b.ravel() / b.sum()
        assert abs(mt.emd_2d(a, b) - mt.transport_linprog(pa, pb, mt.grid_cost((4, 4)))) <= 1e-9

    def test_metric_properties(self):
        rng = np.random.default_rng(8)
        for _ in range(5):
            a, b, c = rng.random((3, 3)), rng.random((3, 3)), rng.random((3, 3))
            assert abs(mt.emd_2d(a, b) - mt.emd_2d(b, a)) <= 1e-9
            assert mt.emd_2d(a, c) <= mt.emd_2d(a, b) + mt.emd_2d(b, c) + 1e-6

    def test_large_grid_uses_regularised_path(self):
        rng = np.random.default_rng(9)
        a, b = rng.random((9, 9)), rng.random((9, 9))
        res = mt.emd_2d_detailed(a, b)
        assert not res.exact and res.iterations > 0
        exact = mt.transport_linprog(a.ravel() / a.sum(), b.ravel() / b.sum(), mt.grid_cost((9, 9)))
        assert res.distance == pytest.approx(exact, rel=0.05)
        assert mt.emd_2d_detailed(a[:8, :8], b[:8, :8]).exact

    def test_errors(self):
        with pytest.raises(ContractError):
            mt.emd_2d(np.zeros((3, 3)), np.ones((3, 3)))
        with pytest.raises(ContractError):
            mt.emd_2d(-np.ones((3, 3)), np.ones((3, 3)))
        with pytest.raises(ContractError):
            mt.emd_2d(np.ones((3, 3)), np.ones((2, 2)))


class TestCompareMaps:
    def test_fields(self):
        a = np.random.default_rng(10).random((3, 3))
        d = mt.compare_maps(a, a).to_dict()
        assert d["rank_correlation"] == 1.0 and d["emd"] == pytest.approx(0.0, abs=1e-12) and d["emd_exact"]


class TestNemenyi:
    def test_hand_table_value(self):
        ranks = np.tile(np.array([[1.0], [2.0], [3.0]]), (1, 10))
        res = mt.nemenyi_cd(ranks, 0.05)
        assert res.cd == pytest.approx(2.343 * math.sqrt(12 / 60), abs=1e-3)
        assert res.cd == pytest.approx(mt.NEMENYI_Q[0.05][1] * 0.4472135955, abs=1e-9)
        assert res.significant_pairs() == [(0, 2)]

    def test_table_matches_studentized_range(self):
        from scipy import stats
        for alpha, table in mt.NEMENYI_Q.items():
            for k in (2, 3, 5, 10, 20):
                q = stats.studentized_range.ppf(1 - alpha, k, np.inf) / math.sqrt(2)
                assert table[k - 2] == pytest.approx(q, abs=2e-5)

    def test_sqrt_n_scaling(self):
        ranks = np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 3.0]])
        cd_n = mt.nemenyi_cd(np.tile(ranks, (1, 5)), 0.10).cd
        cd_4n = mt.nemenyi_cd(np.tile(ranks, (1, 20)), 0.10).cd
        assert cd_n == pytest.approx(2 * cd_4n, rel=1e-12)

    def test_monotone_in_k_and_n(self):
        def cd(k, n):
            return mt.nemenyi_cd(np.tile(np.arange(1.0, k + 1)[:, None], (1, n))).cd

        assert cd(4, 10) > cd(4, 11) and cd(5, 10) > cd(4, 10)

    def test_identical_ranks_never_significant(self):
        res = mt.nemenyi_cd(np.full((2, 6), 1.5))
        assert np.all(res.avg_ranks == 1.5) and not res.significant.any()

    def test_rank_models_ties(self):
        scores = np.array([[0.9, 0.5], [0.9, 0.7], [0.1, 0.6]])
        assert mt.rank_models(scores).tolist() == [[1.5, 3.0], [1.5, 1.0], [3.0, 2.0]]
        assert mt.rank_models(scores, higher_is_better=False)[:, 1].tolist() == [1.0, 3.0, 2.0]

    @pytest.mark.parametrize("ranks, alpha", [
        (np.ones((1, 3)), 0.05),
        (np.tile(np.arange(1.0, 22.0)[:, None], (1, 3)), 0.05),
        (np.array([[1.0, 2.0], [2.0, 1.0]]), 0.01),
        (np.array([[1.0, 1.0], [1.0, 1.0]]), 0.05),
    ])
    def test_errors(self, ranks, alpha):
        with pytest.raises(ContractError):
            mt.nemenyi_cd(ranks, alpha)

    def test_to_dict_names(self):
        res = mt.nemenyi_cd(np.tile(np.array([[1.0], [2.0]]), (1, 4)), names=["a", "b"])
        d = res.to_dict()
        assert d["avg_ranks"] == {"a": 1.0, "b": 2.0} and d["n_datasets"] == 4

