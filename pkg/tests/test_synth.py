import math

import numpy as np
import pytest

from ccf.choice_model import ModelParams, ranking_matrix
from ccf.core import Catalog, Dataset, InteractionRecord
from ccf.synth import (
    SyntheticWorld,
    analytic_response_rate,
    generate_interactions,
    generate_world,
    read_world,
    write_world,
)

SMALL = dict(N=60, M=40, k=5, l=4, num_dates=5, pool_size=20)


@pytest.fixture(scope="module")
def bench():
    world = generate_world(1000, 200, 5, 4, 40, 50, seed=0)
    return world, generate_interactions(world, 100_000, seed=1)


def test_same_seed_same_world():
    a, b = generate_world(seed=4, **SMALL), generate_world(seed=4, **SMALL)
    assert write_world(a) == write_world(b)
    assert write_world(a) != write_world(generate_world(seed=5, **SMALL))


def test_same_seed_same_log():
    w = generate_world(seed=4, **SMALL)
    a = generate_interactions(w, 500, seed=2)
    b = generate_interactions(w, 500, seed=2)
    assert a.records == b.records


def test_all_ones_factors_give_unit_utility():
    p = ModelParams(np.ones((3, 1)), np.ones((4, 1)), np.zeros(3), np.ones((2, 1)), True)
    assert np.array_equal(ranking_matrix(p), np.ones((3, 4)))


@pytest.mark.parametrize("kwargs", [
    dict(SMALL, N=0), dict(SMALL, l=50), dict(SMALL, pool_size=3), dict(SMALL, pool_size=41),
    dict(SMALL, k=0), dict(SMALL, num_dates=0),
])
def test_invalid_sizes(kwargs):
    with pytest.raises(ValueError):
        generate_world(seed=0, **kwargs)


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        generate_world(seed=0, production_corruption=-1.0, **SMALL)


def test_world_fields():
    w = generate_world(seed=1, **SMALL)
    assert all(1.0 <= c <= 5.0 for c in w.catalog.prices)
    assert sum(w.catalog.loyalty) == pytest.approx(1.0)
    assert all(len(pool) == 20 and set(pool) <= set(range(40)) for pool in w.pools)
    # slots 1 and 4 carry a larger weight than slots 2 and 3
    strength = w.params.beta.sum(axis=1)
    assert min(strength[0], strength[3]) > max(strength[1], strength[2])


def test_calibrated_response_rate(bench):
    world, _ = bench
    rng = np.random.default_rng(11)
    recs = []
    for t in range(20_000):
        pool = world.pools[int(rng.integers(world.num_dates))]
        recs.append(InteractionRecord(t, int(rng.integers(1000)),
                                      tuple(rng.choice(pool, size=4, replace=False).tolist()), None))
    rate = analytic_response_rate(world.params, Dataset(Catalog(1000, 200, 4), recs)).mean()
    assert 0.4 <= rate <= 0.6


def test_empirical_response_rate_matches_closed_form(bench):
    world, data = bench
    p = analytic_response_rate(world.params, data)
    observed = np.mean([r.responded for r in data.records])
    sigma = math.sqrt(np.sum(p * (1 - p))) / len(p)
    assert abs(observed - p.mean()) < 3 * sigma


def test_reactions_lie_in_action(bench):
    _, data = bench
    assert all(r.reaction is None or r.reaction in r.action for r in data.records)


def test_empty_log():
    w = generate_world(seed=0, **SMALL)
    assert len(generate_interactions(w, 0)) == 0


def test_symmetric_world_has_uniform_click_share():
    N, M, l = 50, 30, 4
    params = ModelParams.zeros(N, M, 3, l)
    cat = Catalog(N, M, l, tuple([1.0] * M), tuple([1.0 / N] * N))
    world = SyntheticWorld(params, cat, [tuple(range(M))] * 4, seed=0)
    data = generate_interactions(world, 100_000, seed=3)
    slots = data.arrays()[2]
    slots = slots[slots >= 0]
    n = len(slots)
    sigma = math.sqrt(0.25 * 0.75 / n)
    for p in range(l):
        assert abs(np.mean(slots == p) - 0.25) < 3 * sigma


def test_position_ctr_u_shape(bench):
    _, data = bench
    slots = data.arrays()[2]
    n = len(slots)
    ctr = np.array([np.mean(slots == p) for p in range(4)])
    se = np.sqrt(ctr * (1 - ctr) / n)
    for hi in (0, 3):
        for lo in (1, 2):
            assert ctr[hi] - ctr[lo] > 1.96 * math.hypot(se[hi], se[lo])


def test_production_beats_random_but_is_imperfect(bench):
    world, _ = bench
    truth = world.true_scores()
    prod = world.production_scores()
    corr = np.corrcoef(truth.ravel(), prod.ravel())[0, 1]
    assert 0.2 < corr < 0.95


def test_world_round_trip():
    w = generate_world(seed=3, production_noise=0.25, production_corruption=1.5, **SMALL)
    back = read_world(write_world(w))
    assert write_world(back) == write_world(w)
    assert back.production_corruption == 1.5 and back.production_noise == 0.25
    assert np.array_equal(back.production_scores(), w.production_scores())


def test_world_missing_section():
    w = generate_world(seed=3, **SMALL)
    text = write_world(w).replace("#ccf-world v1\n", "")
    with pytest.raises(ValueError):
        read_world(text)
