"""Synthetic ground-truth worlds and logs drawn from them.

A world is a true MLF model plus a catalog (prices, user loyalty) and one item
pool per date. Logs are produced by a "production" recommender that ranks the
date's pool by a corrupted copy of the true utilities: a fixed per-(user, item)
Gaussian error, drawn once per world, plus fresh noise in every session.
Reactions are drawn from the true model, position bias included.

Latent coordinates of a world with ``k >= 3``:

* 0 -- position channel: user and item factors are 1, so the slot factor
  ``beta_p[0]`` adds a per-slot offset to every score;
* 1 -- popularity channel: user factor 1, item factor a per-item popularity;
* 2.. -- Gaussian taste factors.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO, Union

import numpy as np

from .choice_model import ModelParams, batch_scores, ranking_matrix, read_model, write_model
from .core import SECONDS_PER_DATE, Catalog, Dataset, InteractionRecord

WORLD_MAGIC = "#ccf-world v1"


@dataclass
class SyntheticWorld:
    params: ModelParams
    catalog: Catalog
    pools: list
    seed: int
    production_noise: float = 0.5
    production_corruption: float = 2.0

    @property
    def num_dates(self) -> int:
        return len(self.pools)

    def true_scores(self) -> np.ndarray:
        return ranking_matrix(self.params)

    def production_scores(self) -> np.ndarray:
        """True ranking scores plus the world's fixed corruption."""
        scores = self.true_scores()
        rng = np.random.default_rng([self.seed, 1])
        return scores + self.production_corruption * rng.standard_normal(scores.shape)

    def production_policy(self) -> "ProductionPolicy":
        return ProductionPolicy(self.production_scores(), self.production_noise,
                                self.catalog.action_length)


def default_position_offsets(l: int, edge: float = 0.8, last: float = 0.6) -> np.ndarray:
    """Additive slot offsets shaped like a U: first and last slots boosted."""
    offsets = np.zeros(l)
    offsets[0] = edge
    if l > 1:
        offsets[-1] = last
    return offsets


def _calibrate_theta(params: ModelParams, pools: list, rng: np.random.Generator,
                     target: float, samples: int = 200) -> np.ndarray:
    """Per-user propensity giving response rate ``target`` on uniformly random pool actions."""
    N, l = params.num_users, params.action_length
    date_idx = rng.integers(0, len(pools), size=samples)
    acts = np.stack([rng.choice(np.asarray(pools[d]), size=l, replace=False) for d in date_idx])
    theta = np.empty(N)
    for u in range(N):
        scores = batch_scores(params, np.full(samples, u), acts)
        shift = scores.max()
        lw = np.log(np.exp(scores - shift).sum(axis=1)) + shift   # log sum exp per action
        lo, hi = lw.min() - 20, lw.max() + 20
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            rate = np.mean(1.0 / (1.0 + np.exp(mid - lw)))
            lo, hi = (mid, hi) if rate > target else (lo, mid)
        theta[u] = 0.5 * (lo + hi)
    return theta


def generate_world(N: int, M: int, k: int, l: int, num_dates: int, pool_size: int, seed: int,
                   position_offsets: Optional[Sequence[float]] = None,
                   popularity_scale: float = 0.7, propensity_spread: float = 0.5,
                   response_rate: float = 0.5, zipf_exponent: float = 0.7,
                   production_noise: float = 0.5,
                   production_corruption: float = 2.0) -> SyntheticWorld:
    """Draw a random world.

    Taste factors have variance ``1/sqrt(k)`` per entry so a full-rank score
    has roughly unit variance. Propensities are calibrated per user to the
    target response rate on random actions, then jittered by
    ``propensity_spread``. The production recommender's persistent error has
    standard deviation ``production_corruption`` and its per-session noise
    ``production_noise``.
    """
    if production_noise < 0 or production_corruption < 0:
        raise ValueError("production noise levels must be nonnegative")
    for name, value in (("N", N), ("M", M), ("k", k), ("l", l),
                        ("num_dates", num_dates), ("pool_size", pool_size)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    if l > M:
        raise ValueError(f"action length {l} exceeds catalog size {M}")
    if pool_size < l or pool_size > M:
        raise ValueError(f"pool_size must lie in [{l}, {M}], got {pool_size}")
    rng = np.random.default_rng(seed)
    offsets = (default_position_offsets(l) if position_offsets is None
               else np.asarray(position_offsets, dtype=float))
    if offsets.shape != (l,):
        raise ValueError("need one position offset per slot")

    sd = (1.0 / np.sqrt(k)) ** 0.5
    phi = sd * rng.standard_normal((N, k))
    psi = sd * rng.standard_normal((M, k))
    beta = np.ones((l, k))
    if k >= 2:
        phi[:, 0] = 1.0
        psi[:, 0] = 1.0
        beta[:, 0] = offsets
    else:
        beta[:, 0] = 1.0 + offsets
    if k >= 3:
        phi[:, 1] = 1.0
        psi[:, 1] = popularity_scale * rng.standard_normal(M)
    params = ModelParams(phi, psi, np.zeros(N), beta, True)

    pools = [tuple(sorted(rng.choice(M, size=pool_size, replace=False).tolist()))
             for _ in range(num_dates)]
    theta = _calibrate_theta(params, pools, rng, response_rate)
    params.theta = theta + propensity_spread * rng.standard_normal(N)

    prices = rng.uniform(1.0, 5.0, size=M)
    ranks = rng.permutation(N) + 1
    loyalty = 1.0 / ranks ** zipf_exponent
    catalog = Catalog(N, M, l, tuple(prices.tolist()), tuple((loyalty / loyalty.sum()).tolist()))
    return SyntheticWorld(params, catalog, pools, seed, production_noise, production_corruption)


class ProductionPolicy:
    """Shows the ``l`` pool items with the highest noisy ``scores``, best first.

    Noise is redrawn for every session.
    """

    def __init__(self, scores: np.ndarray, noise: float, l: int):
        self.scores = np.asarray(scores, dtype=float)
        self.noise = float(noise)
        self.l = l

    def act(self, user: int, pool: Sequence[int], rng: np.random.Generator) -> tuple:
        return tuple(self.act_batch(np.array([user]), pool, rng)[0].tolist())

    def act_batch(self, users: np.ndarray, pool: Sequence[int], rng: np.random.Generator) -> np.ndarray:
        pool = np.asarray(pool, dtype=np.int64)
        noisy = self.scores[np.ix_(users, pool)] + self.noise * rng.standard_normal((len(users), len(pool)))
        top = np.argsort(-noisy, axis=1, kind="stable")[:, :self.l]
        return pool[top]


def generate_interactions(world: SyntheticWorld, num_records: int, production_policy=None,
                          seed: int = 0) -> Dataset:
    """Simulate ``num_records`` sessions.

    Dates are filled in order with equal shares of the records; each session's
    user is drawn by loyalty weight, its action comes from
    ``production_policy`` on that date's pool, and the reaction is sampled from
    the true model by Gumbel-max.
    """
    if num_records < 0:
        raise ValueError("num_records must be nonnegative")
    policy = world.production_policy() if production_policy is None else production_policy
    rng = np.random.default_rng(seed)
    cat = world.catalog
    params = world.params
    loyalty = np.asarray(cat.loyalty)
    D = world.num_dates
    bounds = np.linspace(0, num_records, D + 1).round().astype(int)
    records = []
    for d in range(D):
        n = bounds[d + 1] - bounds[d]
        if n == 0:
            continue
        users = rng.choice(cat.num_users, size=n, p=loyalty)
        if hasattr(policy, "act_batch"):
            actions = np.asarray(policy.act_batch(users, world.pools[d], rng), dtype=np.int64)
        else:
            actions = np.asarray([policy.act(int(u), world.pools[d], rng) for u in users], dtype=np.int64)
        scores = batch_scores(params, users, actions)
        outcomes = np.concatenate([scores, params.theta[users][:, None]], axis=1)
        chosen = np.argmax(outcomes + rng.gumbel(size=outcomes.shape), axis=1)
        step = max(1, SECONDS_PER_DATE // n)
        for j in range(n):
            slot = chosen[j]
            reaction = None if slot == cat.action_length else int(actions[j, slot])
            ts = d * SECONDS_PER_DATE + min(j * step, SECONDS_PER_DATE - 1)
            records.append(InteractionRecord(int(ts), int(users[j]), tuple(actions[j].tolist()), reaction))
    return Dataset(Catalog(cat.num_users, cat.num_items, cat.action_length), records)


def analytic_response_rate(params: ModelParams, dataset: Dataset) -> np.ndarray:
    """Model probability of a response for every record's (user, action)."""
    users, actions, _ = dataset.arrays()
    scores = batch_scores(params, users, actions)
    theta = params.theta[users]
    shift = np.maximum(scores.max(axis=1), theta)
    w = np.exp(scores - shift[:, None]).sum(axis=1)
    return w / (w + np.exp(theta - shift))


def write_world(world: SyntheticWorld) -> str:
    cat = world.catalog
    out = [write_model(world.params).rstrip("\n"), WORLD_MAGIC,
           f"seed={world.seed}", f"production_noise={world.production_noise:.17g}",
           f"production_corruption={world.production_corruption:.17g}",
           "prices\t" + " ".join(f"{c:.17g}" for c in cat.prices),
           "loyalty\t" + " ".join(f"{f:.17g}" for f in cat.loyalty)]
    for d, pool in enumerate(world.pools):
        out.append(f"pool\t{d}\t{','.join(map(str, pool))}")
    return "\n".join(out) + "\n"


def read_world(stream: Union[TextIO, str]) -> SyntheticWorld:
    text = stream if isinstance(stream, str) else stream.read()
    model_text, sep, rest = text.partition(WORLD_MAGIC + "\n")
    if not sep:
        raise ValueError(f"missing {WORLD_MAGIC!r} section")
    params = read_model(io.StringIO(model_text))
    seed, noise, corruption, prices, loyalty, pools = None, None, None, None, None, []
    for line in rest.splitlines():
        if line.startswith("seed="):
            seed = int(line[5:])
        elif line.startswith("production_noise="):
            noise = float(line[len("production_noise="):])
        elif line.startswith("production_corruption="):
            corruption = float(line[len("production_corruption="):])
        elif line.startswith("prices\t"):
            prices = [float(x) for x in line.split("\t", 1)[1].split()]
        elif line.startswith("loyalty\t"):
            loyalty = [float(x) for x in line.split("\t", 1)[1].split()]
        elif line.startswith("pool\t"):
            _, d, items = line.split("\t")
            if int(d) != len(pools):
                raise ValueError(f"pools out of order at date {d}")
            pools.append(tuple(int(i) for i in items.split(",")))
        elif line:
            raise ValueError(f"unexpected world line {line!r}")
    if None in (seed, noise, corruption, prices, loyalty):
        raise ValueError("world section is incomplete")
    catalog = Catalog(params.num_users, params.num_items, params.action_length, prices, loyalty)
    return SyntheticWorld(params, catalog, pools, seed, noise, corruption)
