"""Multinomial logit factor (MLF) model of a user's reaction to an action.

For user ``u`` shown the ordered action ``A``, item ``i`` in slot ``p`` gets
the score ``<phi_u, psi_i, beta_p>`` (a plain inner product when position
bias is off), the "no response" outcome gets ``theta_u``, and the reaction
is a softmax over the ``l + 1`` outcomes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Optional, Sequence, TextIO, Union

import numpy as np

MODEL_MAGIC = "#ccf-model v1"


@dataclass
class ModelParams:
    """Latent factors of the reaction model.

    Attributes
    ----------
    phi : (N, k) array
        User factors.
    psi : (M, k) array
        Item factors.
    theta : (N,) array
        Response propensities; ``exp(theta_u)`` is the weight of "no response".
    beta : (l, k) array
        Position factors, ignored unless ``position_bias_enabled``.
    position_bias_enabled : bool
    """

    phi: np.ndarray
    psi: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    position_bias_enabled: bool = False

    def __post_init__(self):
        self.phi = np.ascontiguousarray(self.phi, dtype=np.float64)
        self.psi = np.ascontiguousarray(self.psi, dtype=np.float64)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        self.beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        self.position_bias_enabled = bool(self.position_bias_enabled)
        if self.phi.ndim != 2 or self.psi.ndim != 2 or self.beta.ndim != 2:
            raise ValueError("phi, psi and beta must be 2-d")
        k = self.phi.shape[1]
        if self.psi.shape[1] != k or self.beta.shape[1] != k:
            raise ValueError("phi, psi and beta must share the latent dimension")
        if self.theta.shape != (self.phi.shape[0],):
            raise ValueError("theta must have one entry per user")

    @classmethod
    def zeros(cls, N: int, M: int, k: int, l: int, position_bias: bool = False) -> "ModelParams":
        return cls(np.zeros((N, k)), np.zeros((M, k)), np.zeros(N), np.ones((l, k)), position_bias)

    @property
    def num_users(self) -> int:
        return self.phi.shape[0]

    @property
    def num_items(self) -> int:
        return self.psi.shape[0]

    @property
    def k(self) -> int:
        return self.phi.shape[1]

    @property
    def action_length(self) -> int:
        return self.beta.shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(self.phi.copy(), self.psi.copy(), self.theta.copy(),
                           self.beta.copy(), self.position_bias_enabled)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in (self.phi, self.psi, self.theta, self.beta))

    def effective_beta(self) -> np.ndarray:
        if self.position_bias_enabled:
            return self.beta
        return np.ones_like(self.beta)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.position_bias_enabled == other.position_bias_enabled
                and all(np.array_equal(a, b) for a, b in zip(
                    (self.phi, self.psi, self.theta, self.beta),
                    (other.phi, other.psi, other.theta, other.beta))))


@dataclass(frozen=True)
class ChoiceDistribution:
    item_probs: tuple
    null_prob: float

    def prob(self, item: Optional[int]) -> float:
        if item is None:
            return self.null_prob
        for i, p in self.item_probs:
            if i == item:
                return p
        return 0.0

    @property
    def response_prob(self) -> float:
        return 1.0 - self.null_prob


def _check_user(params: ModelParams, u: int):
    if not 0 <= u < params.num_users:
        raise IndexError(f"user {u} out of range [0, {params.num_users})")


def _check_item(params: ModelParams, i: int):
    if not 0 <= i < params.num_items:
        raise IndexError(f"item {i} out of range [0, {params.num_items})")


def utility(params: ModelParams, u: int, i: int) -> float:
    _check_user(params, u)
    _check_item(params, i)
    return float(params.phi[u] @ params.psi[i])


def positioned_utility(params: ModelParams, u: int, i: int, p: int) -> float:
    """Three-way inner product of user, item and 1-based position factors."""
    _check_user(params, u)
    _check_item(params, i)
    if not 1 <= p <= params.action_length:
        raise IndexError(f"position {p} out of range [1, {params.action_length}]")
    return float(np.sum(params.phi[u] * params.psi[i] * params.beta[p - 1]))


def action_scores(params: ModelParams, u: int, action: Sequence[int]) -> np.ndarray:
    """Scores of the items in ``action``, including position factors when enabled."""
    _check_user(params, u)
    action = np.asarray(action, dtype=np.int64)
    if action.size and (action.min() < 0 or action.max() >= params.num_items):
        raise IndexError("item id out of range")
    if params.position_bias_enabled:
        if len(action) != params.action_length:
            raise ValueError(
                f"biased model needs actions of length {params.action_length}, got {len(action)}"
            )
        return np.sum(params.phi[u] * params.psi[action] * params.beta, axis=1)
    return params.psi[action] @ params.phi[u]


def batch_scores(params: ModelParams, users: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """``(n, l)`` score matrix for many (user, action) pairs at once."""
    factors = params.phi[users][:, None, :] * params.psi[actions]
    if params.position_bias_enabled:
        factors = factors * params.beta[None, :, :]
    return factors.sum(axis=2)


def softmax_with_null(scores: np.ndarray, theta: float) -> tuple:
    """Return ``(item_probs, null_prob)`` for item scores and a null score ``theta``."""
    shift = max(float(theta), float(np.max(scores)) if len(scores) else -np.inf)
    w = np.exp(scores - shift)
    w0 = np.exp(theta - shift)
    z = w0 + w.sum()
    return w / z, w0 / z


def choice_probabilities(params: ModelParams, u: int, action: Sequence[int]) -> ChoiceDistribution:
    if not params.is_finite():
        raise ValueError("model parameters contain non-finite values")
    scores = action_scores(params, u, action)
    probs, null = softmax_with_null(scores, params.theta[u])
    return ChoiceDistribution(tuple(zip((int(i) for i in action), probs.tolist())), float(null))


def sample_reaction(params: ModelParams, u: int, action: Sequence[int],
                    rng: np.random.Generator, noise_scale: float = 1.0) -> Optional[int]:
    """Draw a reaction by adding Gumbel noise to every outcome score and taking the argmax.

    With ``noise_scale=1`` this samples exactly from :func:`choice_probabilities`;
    smaller scales approach the deterministic utility-maximizing choice.
    """
    scores = action_scores(params, u, action)
    noisy = np.append(scores, params.theta[u]) + noise_scale * rng.gumbel(size=len(scores) + 1)
    best = int(np.argmax(noisy))
    return None if best == len(scores) else int(action[best])


def axiom1_choice(utilities: Sequence[float]) -> int:
    """Index of the profit-maximizing item (the utility argmax, lowest index on ties).

    The profit of ``i`` is its utility minus the best alternative's utility,
    which is largest exactly where the utility itself is largest.
    """
    if len(utilities) == 0:
        raise ValueError("axiom1_choice needs at least one utility")
    return int(np.argmax(np.asarray(utilities, dtype=float)))


def predict_reaction(params: ModelParams, u: int, action: Sequence[int]) -> int:
    """Most probable taken item, ignoring the no-response outcome."""
    return int(action[int(np.argmax(action_scores(params, u, action)))])


def ranking_scores(params: ModelParams, u: int) -> np.ndarray:
    """Position-free utility of every item for user ``u``.

    For a biased model the position factors are averaged over slots, so items
    are compared as if placed in an average slot.
    """
    _check_user(params, u)
    if params.position_bias_enabled:
        return params.psi @ (params.phi[u] * params.beta.mean(axis=0))
    return params.psi @ params.phi[u]


def ranking_matrix(params: ModelParams) -> np.ndarray:
    """``(N, M)`` matrix of :func:`ranking_scores` for all users."""
    phi = params.phi * params.beta.mean(axis=0) if params.position_bias_enabled else params.phi
    return phi @ params.psi.T


def position_strength(params: ModelParams) -> np.ndarray:
    """Mean ``exp(score)`` of each slot over all (user, item) pairs.

    A scalar summary of how attractive each position makes an item; used to
    compare fitted position factors with injected ones.
    """
    beta = params.effective_beta()
    out = np.empty(params.action_length)
    for p in range(params.action_length):
        out[p] = np.exp((params.phi * beta[p]) @ params.psi.T).mean()
    return out


def _format_row(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def write_model(params: ModelParams) -> str:
    N, k = params.phi.shape
    out = [MODEL_MAGIC,
           f"{N} {params.num_items} {k} {params.action_length} bias={int(params.position_bias_enabled)}"]
    out += [_format_row(row) for row in params.phi]
    out += [_format_row(row) for row in params.psi]
    out.append(_format_row(params.theta))
    out += [_format_row(row) for row in params.beta]
    return "\n".join(out) + "\n"


def _read_rows(lines, count: int, width: int, start: int) -> np.ndarray:
    rows = np.empty((count, width))
    for r in range(count):
        line = next(lines, None)
        if line is None:
            raise ValueError(f"model file truncated at line {start + r}")
        values = line.split()
        if len(values) != width:
            raise ValueError(f"line {start + r}: expected {width} values, got {len(values)}")
        rows[r] = [float(v) for v in values]
    return rows


def read_model(stream: Union[TextIO, str]) -> ModelParams:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = (line.rstrip("\n") for line in stream)
    if next(lines, None) != MODEL_MAGIC:
        raise ValueError(f"line 1: expected {MODEL_MAGIC!r}")
    header = next(lines, "").split()
    if len(header) != 5 or header[4] not in ("bias=0", "bias=1"):
        raise ValueError("line 2: expected 'N M k l bias={0|1}'")
    N, M, k, l = (int(x) for x in header[:4])
    phi = _read_rows(lines, N, k, 3)
    psi = _read_rows(lines, M, k, 3 + N)
    theta = _read_rows(lines, 1, N, 3 + N + M)[0]
    beta = _read_rows(lines, l, k, 4 + N + M)
    return ModelParams(phi, psi, theta, beta, header[4] == "bias=1")
