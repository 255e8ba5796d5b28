import itertools
import math

import numpy as np
import pytest
from scipy import stats

from gma.errors import ContractError
from gma.saliency import (MaskSet, ScorerError, candidate_pairs, pairwise_word_mask_search, rise_combine,
                          rise_saliency, sample_masks)


def linear_setup(N=7, seed=0):
    w = np.random.default_rng(seed).permutation(N * N).reshape(N, N) + 1.0
    X = np.ones((N, N, 2))

    def scorer(masked):
        return float((masked[..., 0] * w).sum())

    return X, w, scorer


class TestMasks:
    def test_values_in_unit_interval(self):
        m = sample_masks(7, 0.5, 4, 300, seed=1)
        assert m.masks.shape == (300, 7, 7)
        assert m.masks.min() >= 0.0 and m.masks.max() <= 1.0

    def test_near_one_keep_probability(self):
        assert sample_masks(7, 0.999, None, 100, seed=0).masks.mean() > 0.99

    def test_mean_approaches_p(self):
        assert abs(sample_masks(7, 0.3, 4, 4000, seed=2).masks.mean() - 0.3) < 0.02

    def test_deterministic(self):
        a, b = sample_masks(7, 0.5, 4, 50, seed=3), sample_masks(7, 0.5, 4, 50, seed=3)
        assert a.masks.tobytes() == b.masks.tobytes()
        assert a.masks.tobytes() != sample_masks(7, 0.5, 4, 50, seed=4).masks.tobytes()

    @pytest.mark.parametrize("s", [3, 4, 7])
    def test_antithetic_pairs_complement(self, s):
        m = sample_masks(7, 0.5, s, 40, seed=2, antithetic=True)
        np.testing.assert_allclose(m.masks[0::2] + m.masks[1::2], 1.0, atol=1e-15)
        np.testing.assert_allclose(m.masks.mean(axis=0), 0.5, atol=1e-15)

    def test_antithetic_needs_half_and_even(self):
        with pytest.raises(ContractError):
            sample_masks(7, 0.4, 4, 10, antithetic=True)
        with pytest.raises(ContractError):
            sample_masks(7, 0.5, 4, 11, antithetic=True)

    def test_full_resolution_is_binary(self):
        m = sample_masks(5, 0.5, 5, 20, seed=0)
        assert set(np.unique(m.masks).tolist()) <= {0.0, 1.0}

    def test_read_only(self):
        with pytest.raises(ValueError):
            sample_masks(3, 0.5, 2, 2).masks[0, 0, 0] = 5.0

    @pytest.mark.parametrize("kw", [dict(p=0.0), dict(p=1.0), dict(s=0), dict(s=8), dict(count=0)])
    def test_invalid_params(self, kw):
        args = dict(N=7, p=0.5, s=4, count=10) | kw
        with pytest.raises(ContractError):
            sample_masks(**args)


class TestRise:
    def test_single_full_mask(self):
        masks = MaskSet(np.ones((1, 3, 3)), p=1.0, s=3, count=1, seed=0)
        S = rise_saliency(np.ones((3, 3, 2)), lambda x: 0.6, masks)
        np.testing.assert_array_equal(S, np.full((3, 3), 0.6))

    def test_constant_scorer_all_ones_masks(self):
        masks = MaskSet(np.ones((4, 3, 3)), p=0.5, s=3, count=4, seed=0)
        S = rise_saliency(np.ones((3, 3, 1)), lambda x: 0.3, masks)
        assert np.ptp(S) == 0.0
        assert S[0, 0] == pytest.approx(0.6, abs=1e-15)

    def test_constant_scorer_monte_carlo(self):
        masks = sample_masks(7, 0.5, 4, 3000, seed=5)
        S = rise_saliency(np.ones((7, 7, 1)), lambda x: 0.8, masks)
        np.testing.assert_allclose(S, 0.8 / 0.5 * masks.masks.mean(axis=0), atol=1e-12)
        assert abs(S.mean() - 0.8) < 0.05

    def test_linear_in_scorer(self):
        X, _, f = linear_setup(5)
        masks = sample_masks(5, 0.5, 3, 200, seed=6)
        base = rise_saliency(X, f, masks)
        assert np.array_equal(rise_saliency(X, lambda x: 2.0 * f(x), masks), 2.0 * base)
        np.testing.assert_allclose(rise_saliency(X, lambda x: 3.0 * f(x), masks), 3.0 * base, rtol=1e-15)

    def test_recovers_linear_weights(self):
        # per-cell antithetic masks; coarse masks blur an unstructured weight grid
        X, w, f = linear_setup(7)
        masks = sample_masks(7, 0.5, 7, 2000, seed=0, antithetic=True)
        rho = stats.spearmanr(rise_saliency(X, f, masks).ravel(), w.ravel())[0]
        assert rho > 0.9

    def test_batched_matches_sequential_bitwise(self):
        X, _, f = linear_setup(5)
        masks = sample_masks(5, 0.5, 3, 230, seed=7)

        def batched(xs):
            return [f(x) for x in xs]

        seq = rise_saliency(X, f, masks)
        assert rise_saliency(X, batched, masks, batched=True, batch_size=37).tobytes() == seq.tobytes()
        assert rise_saliency(X, batched, masks, batched=True, batch_size=500).tobytes() == seq.tobytes()

    def test_combine_batched_scores(self):
        masks = sample_masks(4, 0.5, 2, 10, seed=8)
        scores = np.random.default_rng(0).random((3, 10))
        out = rise_combine(scores, masks)
        assert out.shape == (3, 4, 4)
        np.testing.assert_allclose(out[1], rise_combine(scores[1], masks), atol=1e-15)
        with pytest.raises(ContractError):
            rise_combine(np.ones(9), masks)

    def test_scorer_failure_carries_index(self):
        masks = sample_masks(3, 0.5, 2, 10, seed=0)
        calls = []

        def scorer(x):
            calls.append(1)
            if len(calls) == 4:
                raise RuntimeError("boom")
            return 0.5

        with pytest.raises(ScorerError) as info:
            rise_saliency(np.ones((3, 3, 1)), scorer, masks)
        assert info.value.index == 3

    def test_non_finite_score_rejected(self):
        masks = sample_masks(3, 0.5, 2, 5, seed=0)
        with pytest.raises(ScorerError):
            rise_saliency(np.ones((3, 3, 1)), lambda x: float("nan"), masks)

    def test_grid_mismatch(self):
        with pytest.raises(ContractError):
            rise_saliency(np.ones((4, 4, 1)), lambda x: 1.0, sample_masks(3, 0.5, 2, 2))


class TestWordMaskSearch:
    def counting(self, fn):
        calls = []

        def scorer(tokens):
            calls.append(tokens.copy())
            return fn(tokens)

        return scorer, calls

    def test_two_tokens_single_candidate(self):
        scorer, calls = self.counting(lambda t: (0.1, None))
        res = pairwise_word_mask_search(np.ones((2, 3)), scorer)
        assert res.masked_pair == (0, 1) and res.calls == 1 and len(calls) == 1

    @pytest.mark.parametrize("T", [2, 3, 5, 8])
    def test_call_count_is_binomial(self, T):
        scorer, calls = self.counting(lambda t: (0.5, None))
        assert pairwise_word_mask_search(np.ones((T, 2)), scorer).calls == math.comb(T, 2) == len(calls)

    def test_analytic_optimum(self):
        rng = np.random.default_rng(9)
        tokens = rng.normal(size=(6, 4))
        norms = np.linalg.norm(tokens, axis=1)

        # exp keeps the score a probability without moving the optimum of -(kept norms)
        def scorer(t):
            return math.exp(-np.linalg.norm(t, axis=1).sum()), t

        res = pairwise_word_mask_search(tokens, scorer)
        assert res.masked_pair == tuple(sorted(np.argsort(-norms)[:2].tolist()))
        assert not res.attention_map[list(res.masked_pair)].any()

    def test_masks_are_zero_vectors(self):
        scorer, calls = self.counting(lambda t: (0.5, None))
        pairwise_word_mask_search(np.ones((3, 2)), scorer)
        for (i, j), t in zip(itertools.combinations(range(3), 2), calls):
            assert not t[i].any() and not t[j].any()
            assert t[3 - i - j].tolist() == [1.0, 1.0]

    def test_ties_resolve_to_first_pair(self):
        assert pairwise_word_mask_search(np.ones((4, 2)), lambda t: (0.25, None)).masked_pair == (0, 1)

    def test_short_question_rejected(self):
        with pytest.raises(ContractError):
            pairwise_word_mask_search(np.ones((1, 2)), lambda t: (0.5, None))
        with pytest.raises(ContractError):
            candidate_pairs(0)

    def test_probability_out_of_range(self):
        with pytest.raises(ScorerError):
            pairwise_word_mask_search(np.ones((3, 2)), lambda t: (1.5, None))
