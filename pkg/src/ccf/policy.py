"""Strategic action optimization over the reaction model.

A payoff scores each (action, reaction) outcome; the expected payoff of an
action averages it over the model's reaction distribution. Actions come from
an alpha-randomized ranking: each of the ``l`` slots keeps the user's
``j``-th best item with probability ``1 - alpha`` and otherwise shows a random
candidate. ``alpha`` is tuned by a grid scan followed by golden-section search.
"""

from __future__ import annotations

import io
import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO, Union

import numba
import numpy as np

from .choice_model import ModelParams, choice_probabilities, ranking_scores
from .core import Catalog

CTR = "CTR"
SR = "SR"
CD = "CD"
PAYOFF_KINDS = (CTR, SR, CD)

ENUMERATION_LIMIT = 10 ** 6
POLICY_MAGIC = "#ccf-policy v1"
GOLDEN = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class PayoffSpec:
    kind: str = CTR
    prices: Optional[tuple] = None
    ctr_floor_ratio: float = 0.995

    def __post_init__(self):
        kind = self.kind.upper()
        if kind not in PAYOFF_KINDS:
            raise ValueError(f"payoff kind must be one of {PAYOFF_KINDS}, got {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.prices is not None:
            object.__setattr__(self, "prices", tuple(float(c) for c in self.prices))
        if kind == SR and self.prices is None:
            raise ValueError("SR payoff requires item prices")
        if not 0 < self.ctr_floor_ratio <= 1:
            raise ValueError("ctr_floor_ratio must lie in (0, 1]")

    def price_array(self) -> np.ndarray:
        return np.asarray(self.prices, dtype=float)


@dataclass(frozen=True)
class AlphaPolicy:
    """Randomized ranking for one user.

    ``ranking`` is the user's top items in slot order; random slots draw from
    ``pool`` (the whole catalog when None).
    """

    alpha: float
    ranking: tuple
    pool: Optional[tuple] = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "ranking", tuple(int(i) for i in self.ranking))
        if len(set(self.ranking)) != len(self.ranking):
            raise ValueError("ranking items must be distinct")
        if self.pool is not None:
            object.__setattr__(self, "pool", tuple(int(i) for i in self.pool))


def outcome_payoff(spec: PayoffSpec, params: ModelParams, u: int, action: Sequence[int],
                   reaction: Optional[int]) -> float:
    if reaction is None:
        return 0.0
    if reaction not in action:
        raise ValueError(f"reaction {reaction} not in action")
    if spec.kind == CTR:
        return 1.0
    if spec.kind == SR:
        return spec.prices[reaction]
    return -math.log(choice_probabilities(params, u, action).prob(reaction))


def expected_payoff(spec: PayoffSpec, params: ModelParams, u: int, action: Sequence[int]) -> float:
    dist = choice_probabilities(params, u, action)
    if spec.kind == CTR:
        return sum(p for _, p in dist.item_probs)
    if spec.kind == SR:
        return sum(spec.prices[i] * p for i, p in dist.item_probs)
    return -sum(p * math.log(p) for _, p in dist.item_probs if p > 0)


def _payoff_and_ctr(spec: PayoffSpec, params: ModelParams, u: int, actions: np.ndarray,
                    prices: Optional[np.ndarray] = None) -> tuple:
    """Vectorized expected payoff and response probability for rows of ``actions``."""
    if params.position_bias_enabled:
        scores = np.sum(params.phi[u] * params.psi[actions] * params.beta, axis=2)
    else:
        scores = params.psi[actions] @ params.phi[u]
    theta = params.theta[u]
    shift = np.maximum(scores.max(axis=1), theta)
    w = np.exp(scores - shift[:, None])
    z = np.exp(theta - shift) + w.sum(axis=1)
    p = w / z[:, None]
    ctr = p.sum(axis=1)
    if spec.kind == CTR:
        return ctr, ctr
    if spec.kind == SR:
        if prices is None:
            prices = spec.price_array()
        return (p * prices[actions]).sum(axis=1), ctr
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(p > 0, -p * np.log(p), 0.0)
    return h.sum(axis=1), ctr


def item_contributions(spec: PayoffSpec, params: ModelParams, u: int) -> np.ndarray:
    """Per-item sort key for the base ranking: utility, or log(price) + utility for SR."""
    scores = ranking_scores(params, u)
    if spec.kind == SR:
        with np.errstate(divide="ignore"):
            return np.log(spec.price_array()) + scores
    return scores


def top_items(keys: np.ndarray, l: int, pool: Optional[Sequence[int]] = None) -> tuple:
    """The ``l`` best candidates by ``keys``, best first; ties go to the lower item id."""
    cand = np.arange(len(keys)) if pool is None else np.asarray(sorted(pool), dtype=np.int64)
    if len(cand) < l:
        raise ValueError(f"pool of {len(cand)} items cannot fill {l} slots")
    order = np.lexsort((cand, -keys[cand]))
    return tuple(int(i) for i in cand[order[:l]])


def base_ranking(spec: PayoffSpec, params: ModelParams, u: int, l: int,
                 pool: Optional[Sequence[int]] = None) -> tuple:
    return top_items(item_contributions(spec, params, u), l, pool)


def best_action_exhaustive(spec: PayoffSpec, params: ModelParams, u: int, catalog: Catalog,
                           l: Optional[int] = None) -> tuple:
    """Exact payoff-maximizing action by enumeration.

    Ordered tuples are enumerated when position bias is on, sets otherwise.
    Returns ``(action, value)``; ties go to the lexicographically smallest action.
    """
    l = catalog.action_length if l is None else l
    M = catalog.num_items
    if math.perm(M, l) > ENUMERATION_LIMIT:
        raise ValueError(
            f"P({M},{l}) = {math.perm(M, l)} actions exceed the enumeration limit "
            f"{ENUMERATION_LIMIT}; optimize an AlphaPolicy instead"
        )
    gen = itertools.permutations if params.position_bias_enabled else itertools.combinations
    actions = np.array(list(gen(range(M), l)), dtype=np.int64)
    values, _ = _payoff_and_ctr(spec, params, u, actions)
    best = values.max()
    # re-check near-ties exactly so float noise in the vector path cannot decide the winner
    near = np.flatnonzero(values >= best - 1e-9 * max(1.0, abs(best)))
    exact = [(expected_payoff(spec, params, u, actions[j]), tuple(actions[j].tolist())) for j in near]
    top = max(v for v, _ in exact)
    action = min(a for v, a in exact if top - v <= 1e-12 * max(1.0, abs(top)))
    return action, top


@numba.njit(cache=True)
def _fill_actions(ranking, pool, alpha, uniforms, cand, out):
    S, l = uniforms.shape
    P = pool.shape[0]
    C = cand.shape[1]
    for s in range(S):
        for j in range(l):
            if uniforms[s, j] >= alpha:
                out[s, j] = ranking[j]
            else:
                out[s, j] = -1
        c = 0
        for j in range(l):
            if out[s, j] != -1:
                continue
            placed = False
            while c < C and not placed:
                item = pool[cand[s, c]]
                c += 1
                clash = False
                for q in range(l):
                    if out[s, q] == item:
                        clash = True
                        break
                if not clash:
                    out[s, j] = item
                    placed = True
            if not placed:
                start = cand[s, 0]
                for step in range(P):
                    item = pool[(start + step) % P]
                    clash = False
                    for q in range(l):
                        if out[s, q] == item:
                            clash = True
                            break
                    if not clash:
                        out[s, j] = item
                        break


def _draws(rng: np.random.Generator, num_samples: int, l: int, pool_size: int) -> tuple:
    uniforms = rng.random((num_samples, l))
    cand = rng.integers(0, pool_size, size=(num_samples, 4 * l + 16))
    return uniforms, cand


def _sample_actions(policy: AlphaPolicy, pool: np.ndarray, uniforms, cand) -> np.ndarray:
    ranking = np.asarray(policy.ranking, dtype=np.int64)
    l = len(ranking)
    if len(pool) < l:
        raise ValueError("candidate pool smaller than the action length")
    out = np.empty(uniforms.shape, dtype=np.int64)
    _fill_actions(ranking, pool, float(policy.alpha), uniforms, cand, out)
    return out


def _pool_array(policy: AlphaPolicy, catalog_items: int) -> np.ndarray:
    if policy.pool is None:
        return np.arange(catalog_items, dtype=np.int64)
    return np.asarray(policy.pool, dtype=np.int64)


def sample_action(policy: AlphaPolicy, catalog: Catalog, rng: np.random.Generator) -> tuple:
    """Draw one action from an alpha-policy.

    Kept slots are fixed first; each randomized slot then takes a uniform
    candidate that is not already shown.
    """
    pool = _pool_array(policy, catalog.num_items)
    uniforms, cand = _draws(rng, 1, len(policy.ranking), len(pool))
    return tuple(int(i) for i in _sample_actions(policy, pool, uniforms, cand)[0])


def policy_payoff_estimate(spec: PayoffSpec, params: ModelParams, u: int, policy: AlphaPolicy,
                           num_samples: int, rng: np.random.Generator) -> tuple:
    """Monte-Carlo ``(mean payoff, standard error, mean response probability)``.

    ``alpha == 0`` is evaluated exactly with zero standard error.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if policy.alpha == 0.0:
        values, ctr = _payoff_and_ctr(spec, params, u, np.asarray([policy.ranking], dtype=np.int64))
        return float(values[0]), 0.0, float(ctr[0])
    pool = _pool_array(policy, params.num_items)
    uniforms, cand = _draws(rng, num_samples, len(policy.ranking), len(pool))
    values, ctr = _payoff_and_ctr(spec, params, u, _sample_actions(policy, pool, uniforms, cand))
    se = float(values.std(ddof=1) / math.sqrt(num_samples)) if num_samples > 1 else float("inf")
    return float(values.mean()), se, float(ctr.mean())


def policy_expected_payoff(spec: PayoffSpec, params: ModelParams, u: int, policy: AlphaPolicy,
                           num_samples: int, rng: np.random.Generator) -> float:
    return policy_payoff_estimate(spec, params, u, policy, num_samples, rng)[0]


def user_seed(seed: int, user: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(user)])


@dataclass
class AlphaResult:
    alpha: float
    value: float
    ctr: float
    stderr: float
    evaluations: dict


class PopulationObjective:
    """Loyalty-weighted expected payoff of a shared alpha over many users.

    Each user's random draws are fixed by ``(seed, user)`` and reused for every
    alpha, so differences between alphas are not swamped by sampling noise.
    """

    def __init__(self, spec: PayoffSpec, params: ModelParams, users: Sequence[int],
                 weights: Sequence[float], num_samples: int, seed: int, l: int,
                 pools: Optional[dict] = None):
        self.spec = spec
        self.params = params
        self.users = [int(u) for u in users]
        w = np.asarray(weights, dtype=float)
        if len(self.users) == 0:
            raise ValueError("need at least one user")
        if w.shape != (len(self.users),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative, one per user, with positive sum")
        self.weights = w / w.sum()
        self.num_samples = num_samples
        self.prices = spec.price_array() if spec.prices is not None else None
        self._cache: dict = {}
        self._draws = []
        self._rankings = []
        self._pools = []
        for u in self.users:
            pool = None if pools is None else pools.get(u)
            pool_arr = (np.arange(params.num_items, dtype=np.int64) if pool is None
                        else np.asarray(sorted(pool), dtype=np.int64))
            self._pools.append(pool_arr)
            self._rankings.append(base_ranking(spec, params, u, l, pool))
            rng = np.random.default_rng(user_seed(seed, u))
            self._draws.append(_draws(rng, num_samples, l, len(pool_arr)))

    def evaluate(self, alpha: float) -> tuple:
        """``(payoff, standard error, response rate)`` at ``alpha``."""
        alpha = float(alpha)
        if alpha in self._cache:
            return self._cache[alpha]
        total = var = ctr_total = 0.0
        for w, u, ranking, pool, (uniforms, cand) in zip(
                self.weights, self.users, self._rankings, self._pools, self._draws):
            if alpha == 0.0:
                acts = np.asarray([ranking], dtype=np.int64)
            else:
                acts = _sample_actions(AlphaPolicy(alpha, ranking), pool, uniforms, cand)
            values, ctr = _payoff_and_ctr(self.spec, self.params, u, acts, self.prices)
            total += w * values.mean()
            ctr_total += w * ctr.mean()
            if len(values) > 1:
                var += w * w * values.var(ddof=1) / len(values)
        result = (float(total), float(math.sqrt(var)), float(ctr_total))
        self._cache[alpha] = result
        return result

    def rankings(self) -> dict:
        return dict(zip(self.users, self._rankings))


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-3, max_iter: int = 200) -> tuple:
    """Maximize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))`` of the best point probed."""
    a, b = lo, hi
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = f(x1), f(x2)
    best = max((f1, -x1, x1), (f2, -x2, x2))
    it = 0
    while b - a > tol and it < max_iter:
        if f1 >= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = f(x1)
            best = max(best, (f1, -x1, x1))
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = f(x2)
            best = max(best, (f2, -x2, x2))
        it += 1
    return best[2], best[0]


def optimize_alpha(spec: PayoffSpec, params: ModelParams, users: Sequence[int],
                   weights: Sequence[float], num_samples: int = 1000, seed: int = 0,
                   l: Optional[int] = None, pools: Optional[dict] = None,
                   grid_points: int = 11, tol: float = 1e-3) -> AlphaResult:
    """Find the alpha maximizing the loyalty-weighted expected payoff.

    An evenly spaced grid over [0, 1] picks the best bracket, which golden-section
    search then refines. For the CD payoff, alphas whose response rate falls
    below ``ctr_floor_ratio`` times the unrandomized rate are infeasible.
    """
    l = params.action_length if l is None else l
    objective = PopulationObjective(spec, params, users, weights, num_samples, seed, l, pools)
    floor = None
    if spec.kind == CD:
        base_ctr = objective.evaluate(0.0)[2]
        floor = spec.ctr_floor_ratio * base_ctr

    def score(alpha):
        value, _, ctr = objective.evaluate(alpha)
        if floor is not None and alpha > 0 and ctr < floor:
            return -math.inf
        return value

    grid = np.linspace(0.0, 1.0, grid_points)
    grid_vals = [score(a) for a in grid]
    b = int(np.argmax(grid_vals))
    lo, hi = grid[max(b - 1, 0)], grid[min(b + 1, grid_points - 1)]
    x, fx = golden_section_max(score, float(lo), float(hi), tol)
    alpha, value = (x, fx) if fx > grid_vals[b] else (float(grid[b]), grid_vals[b])

    infeasible = floor is not None and all(score(a) == -math.inf for a in objective._cache if a > 0)
    if alpha == 0.0 and infeasible:
        warnings.warn("no alpha > 0 satisfies the CTR floor; returning alpha = 0", RuntimeWarning)
    value, se, ctr = objective.evaluate(alpha)
    return AlphaResult(float(alpha), value, ctr, se, dict(objective._cache))


class ScorePolicy:
    """Alpha-randomized ranking of any candidate pool by a fixed score matrix.

    ``scores`` is ``(N, M)``; for the SR payoff the ranking key is
    ``log(price) + score``. With ``alpha == 0`` this is plain utility ranking.
    """

    def __init__(self, scores: np.ndarray, l: int, alpha: float = 0.0,
                 spec: Optional[PayoffSpec] = None):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        keys = np.asarray(scores, dtype=float)
        if spec is not None and spec.kind == SR:
            with np.errstate(divide="ignore"):
                keys = keys + np.log(spec.price_array())
        self.keys = keys
        self.l = l
        self.alpha = float(alpha)

    def ranking(self, user: int, pool: Optional[Sequence[int]] = None) -> tuple:
        return top_items(self.keys[user], self.l, pool)

    def act(self, user: int, pool: Sequence[int], rng: np.random.Generator) -> tuple:
        ranking = self.ranking(user, pool)
        if self.alpha == 0.0:
            return ranking
        pool_arr = np.asarray(sorted(pool), dtype=np.int64)
        uniforms, cand = _draws(rng, 1, self.l, len(pool_arr))
        return tuple(int(i) for i in _sample_actions(AlphaPolicy(self.alpha, ranking), pool_arr,
                                                     uniforms, cand)[0])


def write_policy(alpha: float, rankings: dict) -> str:
    out = [POLICY_MAGIC, f"alpha={float(alpha):.17g}"]
    for u in sorted(rankings):
        out.append(f"{u}\t{','.join(map(str, rankings[u]))}")
    return "\n".join(out) + "\n"


def read_policy(stream: Union[TextIO, str]) -> tuple:
    """Parse a policy file into ``(alpha, {user: ranking})``."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = [line.rstrip("\n") for line in stream]
    if not lines or lines[0] != POLICY_MAGIC:
        raise ValueError(f"line 1: expected {POLICY_MAGIC!r}")
    if len(lines) < 2 or not lines[1].startswith("alpha="):
        raise ValueError("line 2: expected alpha=<real>")
    alpha = float(lines[1][len("alpha="):])
    rankings = {}
    for n, line in enumerate(lines[2:], start=3):
        user, sep, items = line.partition("\t")
        if not sep:
            raise ValueError(f"line {n}: expected user<TAB>items")
        rankings[int(user)] = tuple(int(i) for i in items.split(","))
    return alpha, rankings
