import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccf.choice_model import (
    ModelParams,
    axiom1_choice,
    choice_probabilities,
    position_strength,
    positioned_utility,
    predict_reaction,
    read_model,
    sample_reaction,
    utility,
    write_model,
)


def params_with_scores(scores, theta=0.0, bias=False):
    """A one-user model whose item i has utility ``scores[i]`` (k=1, psi_i = score)."""
    M = len(scores)
    return ModelParams(np.ones((1, 1)), np.asarray(scores, float).reshape(M, 1),
                       np.array([theta]), np.ones((M, 1)), bias)


def random_params(rng, N=4, M=7, k=3, l=3, bias=True, scale=1.0):
    return ModelParams(scale * rng.standard_normal((N, k)), scale * rng.standard_normal((M, k)),
                       rng.standard_normal(N), 1 + 0.5 * rng.standard_normal((l, k)), bias)


class TestUtility:
    def test_zero_user_factor(self):
        p = ModelParams(np.zeros((1, 2)), np.random.default_rng(0).standard_normal((5, 2)),
                        np.zeros(1), np.ones((3, 2)))
        assert all(utility(p, 0, i) == 0.0 for i in range(5))

    def test_hand_inner_product(self):
        p = ModelParams(np.array([[1.0, 2.0]]), np.array([[3.0, -1.0]]), np.zeros(1), np.ones((1, 2)))
        assert utility(p, 0, 0) == 1.0

    def test_unit_basis(self):
        e1 = np.array([[1.0, 0.0, 0.0]])
        assert utility(ModelParams(e1, e1, np.zeros(1), np.ones((1, 3))), 0, 0) == 1.0

    def test_out_of_range(self):
        p = ModelParams.zeros(2, 3, 2, 2)
        with pytest.raises(IndexError):
            utility(p, 2, 0)
        with pytest.raises(IndexError):
            utility(p, 0, 3)


class TestPositionedUtility:
    def test_reduces_to_utility_with_unit_beta(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        p.beta[1] = 1.0
        assert positioned_utility(p, 2, 5, 2) == pytest.approx(utility(p, 2, 5), abs=1e-14)

    def test_three_way_product(self):
        p = ModelParams(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.zeros(1), np.ones((1, 2)), True)
        assert positioned_utility(p, 0, 0, 1) == 11.0

    def test_zero_factor(self):
        p = ModelParams(np.array([[1.0, 2.0]]), np.array([[3.0, 4.0]]), np.zeros(1), np.zeros((1, 2)), True)
        assert positioned_utility(p, 0, 0, 1) == 0.0

    def test_position_range(self):
        p = ModelParams.zeros(1, 3, 2, 2, True)
        with pytest.raises(IndexError):
            positioned_utility(p, 0, 0, 3)
        with pytest.raises(IndexError):
            positioned_utility(p, 0, 0, 0)


class TestChoiceProbabilities:
    def test_uniform(self):
        dist = choice_probabilities(ModelParams.zeros(1, 4, 2, 4), 0, [0, 1, 2, 3])
        assert [p for _, p in dist.item_probs] == pytest.approx([0.2] * 4, abs=1e-15)
        assert dist.null_prob == pytest.approx(0.2, abs=1e-15)

    def test_low_propensity_single_item(self):
        dist = choice_probabilities(params_with_scores([0.0], theta=-30.0), 0, [0])
        assert dist.item_probs[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_two_items(self):
        dist = choice_probabilities(params_with_scores([1.0, 0.0]), 0, [0, 1])
        e = math.e
        assert dist.prob(0) == pytest.approx(e / (2 + e), abs=1e-15)
        assert dist.prob(1) == pytest.approx(1 / (2 + e), abs=1e-15)
        assert dist.null_prob == pytest.approx(1 / (2 + e), abs=1e-15)
        assert (round(dist.prob(0), 4), round(dist.prob(1), 4)) == (0.5761, 0.2119)

    def test_overflow_safe(self):
        dist = choice_probabilities(params_with_scores([800.0, 799.0], theta=-800.0), 0, [0, 1])
        assert dist.prob(0) == pytest.approx(1 / (1 + math.exp(-1)))
        assert dist.null_prob == 0.0

    def test_non_finite_rejected(self):
        p = params_with_scores([np.nan, 0.0])
        with pytest.raises(ValueError):
            choice_probabilities(p, 0, [0, 1])

    def test_biased_needs_full_length(self):
        p = ModelParams.zeros(1, 5, 2, 3, True)
        with pytest.raises(ValueError):
            choice_probabilities(p, 0, [0, 1])


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    bias = draw(st.booleans())
    scale = draw(st.floats(0.1, 3.0))
    rng = np.random.default_rng(seed)
    p = random_params(rng, bias=bias, scale=scale)
    u = int(rng.integers(p.num_users))
    action = rng.permutation(p.num_items)[:p.action_length].tolist()
    return p, u, action


class TestProbabilityLaws:
    @given(instances())
    @settings(max_examples=200, deadline=None)
    def test_normalization(self, inst):
        p, u, action = inst
        dist = choice_probabilities(p, u, action)
        probs = [q for _, q in dist.item_probs] + [dist.null_prob]
        assert all(0.0 <= q <= 1.0 for q in probs)
        assert abs(sum(probs) - 1.0) <= 1e-12

    @given(instances(), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_iia_odds_ratio(self, inst, seed):
        p, u, action = inst
        rng = np.random.default_rng(seed)
        i, j = action[0], action[1]
        others = [x for x in range(p.num_items) if x not in (i, j)]
        filler = rng.permutation(others)[:len(action) - 2].tolist()
        other_action = [i, j] + filler      # same slots for i and j
        d1 = choice_probabilities(p, u, action)
        d2 = choice_probabilities(p, u, other_action)
        assert d1.prob(i) / d1.prob(j) == pytest.approx(d2.prob(i) / d2.prob(j), rel=1e-10)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.floats(-5, 5), st.floats(-50, 50))
    @settings(max_examples=200, deadline=None)
    def test_translation_invariance(self, scores, theta, c):
        base = choice_probabilities(params_with_scores(scores, theta), 0, list(range(len(scores))))
        shifted = choice_probabilities(params_with_scores([s + c for s in scores], theta + c), 0,
                                       list(range(len(scores))))
        for (_, a), (_, b) in zip(base.item_probs, shifted.item_probs):
            assert abs(a - b) <= 1e-12
        assert abs(base.null_prob - shifted.null_prob) <= 1e-12

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=6), st.floats(-3, 3),
           st.integers(0, 5), st.floats(0.01, 2.0))
    @settings(max_examples=200, deadline=None)
    def test_monotonicity(self, scores, theta, which, delta):
        which %= len(scores)
        action = list(range(len(scores)))
        before = choice_probabilities(params_with_scores(scores, theta), 0, action)
        bumped = list(scores)
        bumped[which] += delta
        after = choice_probabilities(params_with_scores(bumped, theta), 0, action)
        assert after.prob(which) > before.prob(which)
        for i in action:
            if i != which:
                assert after.prob(i) < before.prob(i)
        assert after.null_prob < before.null_prob


def _frequencies(p, u, action, n, seed, **kw):
    rng = np.random.default_rng(seed)
    counts = {i: 0 for i in list(action) + [None]}
    for _ in range(n):
        counts[sample_reaction(p, u, action, rng, **kw)] += 1
    return {i: c / n for i, c in counts.items()}


class TestSampling:
    def test_degenerate(self):
        p = params_with_scores([0.0, -1e3], theta=-1e3)
        rng = np.random.default_rng(0)
        assert all(sample_reaction(p, 0, [0, 1], rng) == 0 for _ in range(200))

    def test_uniform_five_way(self):
        freq = _frequencies(ModelParams.zeros(1, 4, 2, 4), 0, [0, 1, 2, 3], 100_000, seed=3)
        sigma = math.sqrt(0.2 * 0.8 / 100_000)
        for f in freq.values():
            assert abs(f - 0.2) <= 3 * sigma

    def test_matches_closed_form(self):
        rng = np.random.default_rng(11)
        p = random_params(rng, bias=True)
        action = [4, 0, 6]
        dist = choice_probabilities(p, 1, action)
        n = 100_000
        freq = _frequencies(p, 1, action, n, seed=5)
        for item in action + [None]:
            q = dist.prob(item)
            assert abs(freq[item] - q) <= 3 * math.sqrt(q * (1 - q) / n)


class TestAxiom1:
    def test_argmax(self):
        assert axiom1_choice([0.1, 0.9, 0.5]) == 1

    def test_ties_lowest_index(self):
        assert axiom1_choice([0.3, 0.3, 0.3]) == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            axiom1_choice([])

    def test_noise_free_limit(self):
        scores = [0.2, 0.7, 0.5, 0.65]
        p = params_with_scores(scores, theta=-5.0)
        rng = np.random.default_rng(2)
        draws = [sample_reaction(p, 0, [0, 1, 2, 3], rng, noise_scale=1e-3) for _ in range(10_000)]
        values, counts = np.unique([-1 if d is None else d for d in draws], return_counts=True)
        assert values[np.argmax(counts)] == axiom1_choice(scores)

    def test_profit_argmax_is_utility_argmax(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            r = rng.standard_normal(5)
            profit = [r[i] - max(np.delete(r, i)) for i in range(5)]
            assert int(np.argmax(profit)) == axiom1_choice(r)


class TestPredictReaction:
    def test_first_item(self):
        p = params_with_scores([1.0, 0.0, 0.0, 0.0])
        assert predict_reaction(p, 0, [0, 1, 2, 3]) == 0

    def test_all_zero_tie_break(self):
        assert predict_reaction(ModelParams.zeros(1, 6, 3, 4), 0, [5, 2, 3, 1]) == 5

    def test_position_bias_can_change_prediction(self):
        phi = np.array([[1.0, 1.0]])
        psi = np.array([[1.0, 0.0], [0.9, 0.0], [0.8, 0.0], [0.2, 0.5]])
        beta = np.ones((4, 2))
        beta[3] = [1.0, 3.0]          # slot 4 amplifies the second coordinate
        p = ModelParams(phi, psi, np.zeros(1), beta, True)
        action = [0, 1, 2, 3]
        raw = [utility(p, 0, i) for i in action]
        assert action[int(np.argmax(raw))] == 0
        assert positioned_utility(p, 0, 3, 4) > max(positioned_utility(p, 0, i, s + 1) for s, i in enumerate(action[:3]))
        assert predict_reaction(p, 0, action) == 3
        p.position_bias_enabled = False
        assert predict_reaction(p, 0, action) == 0


class TestModelFile:
    def test_round_trip_exact(self):
        rng = np.random.default_rng(9)
        p = random_params(rng, N=5, M=6, k=3, l=2, bias=True)
        p.phi[0, 0] = 1 / 3
        p.psi[1, 1] = -2.5e-300
        text = write_model(p)
        assert text.splitlines()[:2] == ["#ccf-model v1", "5 6 3 2 bias=1"]
        q = read_model(text)
        assert q == p
        assert write_model(q) == text

    def test_truncated(self):
        text = write_model(ModelParams.zeros(2, 3, 2, 2))
        with pytest.raises(ValueError):
            read_model("\n".join(text.splitlines()[:-1]))


def test_position_strength_orders_additive_offsets():
    rng = np.random.default_rng(0)
    phi = rng.standard_normal((20, 3))
    psi = rng.standard_normal((30, 3))
    phi[:, 0] = psi[:, 0] = 1.0
    beta = np.ones((4, 3))
    beta[:, 0] = [0.8, 0.0, 0.1, 0.6]
    s = position_strength(ModelParams(phi, psi, np.zeros(20), beta, True))
    assert list(np.argsort(-s)) == [0, 3, 2, 1]
