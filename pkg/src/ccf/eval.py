"""Offline ranking metrics, reaction-prediction accuracy and the relative-surplus simulation."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .choice_model import ModelParams, batch_scores, ranking_matrix
from .core import Dataset

METRICS = ("CTR", "SR", "CD")


def ranking_metrics(ranked: Sequence[int], relevant, n: int = 4) -> tuple:
    """Binary-relevance ``(AP@n, AR@n, nDCG@n)`` of one ranked list.

    AP@n averages precision at each relevant hit within the top ``n`` and
    divides by ``min(n, |relevant|)``; AR@n is the fraction of relevant items
    retrieved in the top ``n``; nDCG@n uses gain 1 and discount
    ``1 / log2(rank + 1)``. All three are 0 for an empty relevant set.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    relevant = set(relevant)
    if not relevant:
        return 0.0, 0.0, 0.0
    hits = 0
    precision_sum = 0.0
    dcg = 0.0
    for rank, item in enumerate(list(ranked)[:n], start=1):
        if item in relevant:
            hits += 1
            precision_sum += hits / rank
            dcg += 1.0 / math.log2(rank + 1)
    ideal = sum(1.0 / math.log2(r + 1) for r in range(1, min(n, len(relevant)) + 1))
    return precision_sum / min(n, len(relevant)), hits / len(relevant), dcg / ideal


def _score_matrix(model) -> np.ndarray:
    if isinstance(model, ModelParams):
        return ranking_matrix(model)
    return np.asarray(model, dtype=float)


def offline_eval(model, test: Dataset, n: int = 4) -> dict:
    """Macro-averaged AP@n, AR@n and nDCG@n over (user, date) pairs.

    Each date's candidates are the items shown that date in ``test``; an
    item is relevant when the user took it that date. ``model`` is a
    ``ModelParams`` or an ``(N, M)`` score matrix.
    """
    scores = _score_matrix(model)
    pools = {d: np.asarray(sorted(items)) for d, items in test.date_pools().items()}
    clicked = defaultdict(set)
    for rec in test.records:
        if rec.reaction is not None:
            clicked[(rec.user, rec.date)].add(rec.reaction)
    if not clicked:
        raise ValueError("no (user, date) pair in the test log has a response")
    totals = np.zeros(3)
    for (u, d), relevant in sorted(clicked.items()):
        pool = pools[d]
        order = np.lexsort((pool, -scores[u, pool]))
        totals += ranking_metrics(pool[order[:n]].tolist(), relevant, n)
    ap, ar, ndcg = totals / len(clicked)
    return {f"AP@{n}": ap, f"AR@{n}": ar, f"nDCG@{n}": ndcg, "pairs": len(clicked)}


class RandomPredictor:
    """Picks a shown item uniformly at random."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def __call__(self, users: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.rng.integers(0, actions.shape[1], size=len(users))


def predict_slots(model: Union[ModelParams, Callable], users: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """0-based slot each record's predicted item occupies (lowest slot on ties)."""
    if isinstance(model, ModelParams):
        return np.argmax(batch_scores(model, users, actions), axis=1)
    return np.asarray(model(users, actions))


def reaction_hits(model, records: Dataset) -> np.ndarray:
    """Boolean per responded record: did the model predict the taken item?"""
    users, actions, slots = records.arrays()
    if len(users) == 0:
        raise ValueError("no records to evaluate")
    if np.any(slots < 0):
        raise ValueError("reaction accuracy needs responded records only")
    return predict_slots(model, users, actions) == slots


def reaction_accuracy(model, records: Dataset) -> float:
    return float(reaction_hits(model, records).mean())


def paired_pvalue(hits_a: np.ndarray, hits_b: np.ndarray) -> float:
    """One-sided paired t-test p-value for ``mean(hits_a) > mean(hits_b)``."""
    diff = hits_a.astype(float) - hits_b.astype(float)
    if not diff.any():
        return 1.0
    return float(stats.ttest_1samp(diff, 0.0, alternative="greater").pvalue)


@dataclass(frozen=True)
class ProbeDay:
    user: int
    date: int
    positives: frozenset
    negatives: frozenset

    def __post_init__(self):
        object.__setattr__(self, "positives", frozenset(self.positives))
        object.__setattr__(self, "negatives", frozenset(self.negatives))
        if self.positives & self.negatives:
            raise ValueError("positive and negative sets overlap")

    @property
    def pool(self) -> tuple:
        return tuple(sorted(self.positives | self.negatives))


def build_probe_days(log: Dataset, pools: Optional[dict] = None,
                     num_users: Optional[int] = None) -> list:
    """Probe days for the most frequent visitors of ``log``.

    For each selected user and each date they visited, positives are the items
    they took that date and negatives the rest of the date's pool (``pools``
    maps date to items; defaults to the items shown that date in ``log``).
    """
    pools = log.date_pools() if pools is None else pools
    visits = Counter(rec.user for rec in log.records)
    ranked = sorted(visits, key=lambda u: (-visits[u], u))
    chosen = set(ranked if num_users is None else ranked[:num_users])
    taken: dict = {}
    for rec in log.records:
        if rec.user in chosen:
            day = taken.setdefault((rec.user, rec.date), set())
            if rec.reaction is not None:
                day.add(rec.reaction)
    days = []
    for (u, d), pos in sorted(taken.items()):
        pool = set(pools[d])
        days.append(ProbeDay(u, d, pos & pool, pool - pos))
    return days


def simulate_reaction(day: ProbeDay, action: Sequence[int], rng: np.random.Generator,
                      literal: bool = False) -> Optional[int]:
    """Replay a probe user's reaction to ``action``.

    The user takes one of the shown positives uniformly at random, or nothing
    if none is shown. With ``literal=True`` each shown positive is instead taken
    with probability ``1/|A & N|`` (capped so the total stays a distribution).
    """
    shown_pos = [i for i in action if i in day.positives]
    if not shown_pos:
        return None
    if not literal:
        return int(shown_pos[rng.integers(len(shown_pos))])
    shown_neg = sum(1 for i in action if i in day.negatives)
    each = 1.0 / shown_neg if shown_neg else 1.0
    probs = np.full(len(shown_pos), each)
    if probs.sum() > 1.0:
        probs /= probs.sum()
    slot = rng.choice(len(shown_pos) + 1, p=np.append(probs, max(0.0, 1.0 - probs.sum())))
    return None if slot == len(shown_pos) else int(shown_pos[slot])


def consumption_entropy(takes: Sequence[int]) -> float:
    """Natural-log entropy of the item distribution of ``takes``."""
    if not takes:
        return 0.0
    counts = np.fromiter(Counter(takes).values(), dtype=float)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _simulate(policy, days, prices, seed, literal, sessions):
    responses = 0
    revenue = 0.0
    takes = []
    for idx, day in enumerate(days):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        pool = day.pool
        for _ in range(sessions):
            action = policy.act(day.user, pool, rng)
            r = simulate_reaction(day, action, rng, literal)
            if r is not None:
                responses += 1
                revenue += prices[r]
                takes.append(r)
    total = len(days) * sessions
    return {"CTR": responses / total, "SR": revenue / total, "CD": consumption_entropy(takes)}


@dataclass
class SurplusReport:
    model: dict
    production: dict

    def surplus(self, metric: str) -> Optional[float]:
        base = self.production[metric]
        if base == 0:
            return None
        return (self.model[metric] - base) / base

    def to_tsv(self, name: str = "model") -> str:
        lines = [f"metric\t{name}\tproduction\tsurplus"]
        for m in METRICS:
            s = self.surplus(m)
            lines.append(f"{m}\t{self.model[m]:.10g}\t{self.production[m]:.10g}\t"
                         + ("undefined" if s is None else f"{s:.10g}"))
        return "\n".join(lines) + "\n"


def relative_surplus(model_policy, production_policy, days: Sequence[ProbeDay], prices,
                     seed: int = 0, literal: bool = False, sessions: int = 1) -> SurplusReport:
    """Replay both policies on the probe days and compare CTR, SR and CD.

    Policies expose ``act(user, pool, rng) -> action``. Each probe day has its
    own random substream derived from ``seed``, replayed identically for both
    policies, so identical policies yield zero surplus.
    """
    if not days:
        raise ValueError("no probe days")
    prices = np.asarray(prices, dtype=float)
    return SurplusReport(_simulate(model_policy, days, prices, seed, literal, sessions),
                         _simulate(production_policy, days, prices, seed, literal, sessions))
