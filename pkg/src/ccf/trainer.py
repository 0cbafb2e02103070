"""Penalized conditional maximum-likelihood training of the MLF model by SGD.

The objective summed over records ``t`` is::

    log(exp(theta_u) + sum_j exp(s_j)) - [R != null] * s_{i*} - [R == null] * theta_u
    + lambda_U * sum ||phi||^2 + lambda_I * sum ||psi||^2 + lambda_P * sum ||beta||^2

where ``s_j`` is the (optionally position-weighted) score of the j-th shown item.
Each SGD step moves along the per-record gradient ``p(i|A) - [i == i*]``;
the regularizer enters a step as ``lambda * x`` per touched row.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .choice_model import ModelParams, batch_scores, softmax_with_null
from .core import Dataset, InteractionRecord

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """The objective became non-finite, usually because the learning rate is too high."""


@dataclass
class Hyperparams:
    k: int = 50
    lambda_U: float = 1e-4
    lambda_I: float = 1e-4
    lambda_P: float = 1e-4
    eta0: float = 0.05
    anneal: float = 0.9
    epochs: int = 20
    init_scale: float = 0.1
    seed: int = 0
    workers: int = 1
    position_bias: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if min(self.lambda_U, self.lambda_I, self.lambda_P) < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if not 0 < self.anneal <= 1:
            raise ValueError("anneal must lie in (0, 1]")
        if self.epochs < 1 or self.workers < 1:
            raise ValueError("epochs and workers must be positive")
        if self.init_scale < 0:
            raise ValueError("init_scale must be nonnegative")


@dataclass
class TrainReport:
    params: ModelParams
    nll: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def progress_tsv(self) -> str:
        return "".join(f"{e}\t{v:.10g}\t{eta:.6g}\t{s:.3f}\n"
                       for e, (v, eta, s) in enumerate(zip(self.nll, self.eta, self.seconds), start=1))


def _check_dims(params: ModelParams, dataset: Dataset):
    cat = dataset.catalog
    if params.num_users != cat.num_users or params.num_items != cat.num_items:
        raise ValueError(
            f"model is {params.num_users}x{params.num_items} but catalog is "
            f"{cat.num_users}x{cat.num_items}"
        )
    if params.action_length != cat.action_length:
        raise ValueError(f"model has {params.action_length} positions, catalog has {cat.action_length}")


def penalty(params: ModelParams, hyper: Hyperparams) -> float:
    value = hyper.lambda_U * np.sum(params.phi ** 2) + hyper.lambda_I * np.sum(params.psi ** 2)
    if params.position_bias_enabled:
        value += hyper.lambda_P * np.sum(params.beta ** 2)
    return float(value)


def _record_losses(params, users, actions, slots):
    scores = batch_scores(params, users, actions)
    theta = params.theta[users]
    shift = np.maximum(scores.max(axis=1), theta)
    lse = shift + np.log(np.exp(theta - shift) + np.exp(scores - shift[:, None]).sum(axis=1))
    taken = np.where(slots >= 0, scores[np.arange(len(users)), np.maximum(slots, 0)], theta)
    return lse - taken


def nll(params: ModelParams, dataset: Dataset, hyper: Hyperparams) -> float:
    """Penalized negative conditional log-likelihood of the whole log."""
    _check_dims(params, dataset)
    data = 0.0
    if len(dataset):
        data = float(_record_losses(params, *dataset.arrays()).sum())
    return data + penalty(params, hyper)


def nll_gradient(params: ModelParams, dataset: Dataset, hyper: Hyperparams) -> ModelParams:
    """Exact gradient of :func:`nll`, returned in a ``ModelParams`` container.

    The ``beta`` block is zero when position bias is disabled.
    """
    _check_dims(params, dataset)
    grad = ModelParams(np.zeros_like(params.phi), np.zeros_like(params.psi),
                       np.zeros_like(params.theta), np.zeros_like(params.beta),
                       params.position_bias_enabled)
    if len(dataset):
        users, actions, slots = dataset.arrays()
        n, l = actions.shape
        scores = batch_scores(params, users, actions)
        theta = params.theta[users]
        shift = np.maximum(scores.max(axis=1), theta)
        w = np.exp(scores - shift[:, None])
        w0 = np.exp(theta - shift)
        z = w0 + w.sum(axis=1)
        g = w / z[:, None]
        responded = slots >= 0
        g[np.flatnonzero(responded), slots[responded]] -= 1.0
        np.add.at(grad.theta, users, w0 / z - (~responded))

        beta = params.effective_beta()
        phi_u = params.phi[users]                     # (n, k)
        psi_a = params.psi[actions]                   # (n, l, k)
        np.add.at(grad.phi, users, np.einsum("nl,nlk,lk->nk", g, psi_a, beta))
        np.add.at(grad.psi, actions.ravel(),
                  (g[:, :, None] * phi_u[:, None, :] * beta[None]).reshape(n * l, -1))
        if params.position_bias_enabled:
            grad.beta += np.einsum("nl,nlk,nk->lk", g, psi_a, phi_u)

    grad.phi += 2 * hyper.lambda_U * params.phi
    grad.psi += 2 * hyper.lambda_I * params.psi
    if params.position_bias_enabled:
        grad.beta += 2 * hyper.lambda_P * params.beta
    return grad


def record_gradient(params: ModelParams, record: InteractionRecord, hyper: Hyperparams) -> dict:
    """Per-record SGD direction for every row one record touches.

    Returns a dict with keys ``phi`` (k,), ``psi`` (l, k) aligned with the
    action, ``beta`` (l, k) or None, and ``theta`` (scalar).
    """
    u = record.user
    action = np.asarray(record.action)
    beta = params.effective_beta()
    phi_u = params.phi[u]
    psi_a = params.psi[action]
    scores = np.sum(phi_u * psi_a * beta, axis=1)
    probs, null = softmax_with_null(scores, params.theta[u])
    g = probs.copy()
    if record.reaction is not None:
        g[record.action.index(record.reaction)] -= 1.0
    out = {
        "phi": (g[:, None] * psi_a * beta).sum(axis=0) + hyper.lambda_U * phi_u,
        "psi": g[:, None] * phi_u * beta + hyper.lambda_I * psi_a,
        "theta": null - (record.reaction is None),
        "beta": None,
    }
    if params.position_bias_enabled:
        out["beta"] = g[:, None] * psi_a * phi_u + hyper.lambda_P * params.beta
    return out


def gradient_step(params: ModelParams, record: InteractionRecord, eta: float,
                  hyper: Hyperparams) -> ModelParams:
    """One SGD update on a single record; returns a new ``ModelParams``.

    All touched rows move simultaneously using gradients evaluated at the
    incoming parameters. Rows the record does not touch are left unchanged.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    grad = record_gradient(params, record, hyper)
    new = params.copy()
    action = np.asarray(record.action)
    new.phi[record.user] -= eta * grad["phi"]
    new.psi[action] -= eta * grad["psi"]
    new.theta[record.user] -= eta * grad["theta"]
    if grad["beta"] is not None:
        new.beta -= eta * grad["beta"]
    return new


@numba.njit(nogil=True, cache=True)
def _sgd_pass(phi, psi, theta, beta, users, actions, slots, order,
              eta, lam_u, lam_i, lam_p, biased):
    l = actions.shape[1]
    k = phi.shape[1]
    scores = np.empty(l)
    g = np.empty(l)
    gphi = np.empty(k)
    gbeta = np.empty((l, k))
    for t in order:
        u = users[t]
        shift = theta[u]
        for j in range(l):
            i = actions[t, j]
            s = 0.0
            for d in range(k):
                s += phi[u, d] * psi[i, d] * beta[j, d]
            scores[j] = s
            if s > shift:
                shift = s
        w0 = np.exp(theta[u] - shift)
        z = w0
        for j in range(l):
            g[j] = np.exp(scores[j] - shift)
            z += g[j]
        for j in range(l):
            g[j] /= z
        if slots[t] >= 0:
            g[slots[t]] -= 1.0
            gtheta = w0 / z
        else:
            gtheta = w0 / z - 1.0

        for d in range(k):
            acc = 0.0
            for j in range(l):
                acc += g[j] * psi[actions[t, j], d] * beta[j, d]
            gphi[d] = acc + lam_u * phi[u, d]
        if biased:
            for j in range(l):
                i = actions[t, j]
                for d in range(k):
                    gbeta[j, d] = g[j] * psi[i, d] * phi[u, d] + lam_p * beta[j, d]
        for j in range(l):
            i = actions[t, j]
            for d in range(k):
                psi[i, d] -= eta * (g[j] * phi[u, d] * beta[j, d] + lam_i * psi[i, d])
        for d in range(k):
            phi[u, d] -= eta * gphi[d]
        if biased:
            for j in range(l):
                for d in range(k):
                    beta[j, d] -= eta * gbeta[j, d]
        theta[u] -= eta * gtheta


def run_sharded(kernel, order: np.ndarray, workers: int, args_before: tuple, args_after: tuple):
    """Run ``kernel(*args_before, shard, *args_after)`` over ``workers`` disjoint shards.

    Shards share the parameter arrays and update them without locks. With a
    single worker the kernel runs on the calling thread.
    """
    if workers == 1:
        kernel(*args_before, order, *args_after)
        return
    threads = [threading.Thread(target=kernel, args=(*args_before, shard, *args_after))
               for shard in np.array_split(order, workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()


def init_params(N: int, M: int, l: int, hyper: Hyperparams, rng: np.random.Generator) -> ModelParams:
    """Gaussian factors scaled by ``init_scale``; zero propensities.

    Position factors start at one plus the same Gaussian jitter, so a biased
    model starts out as its unbiased counterpart.
    """
    k = hyper.k
    phi = hyper.init_scale * rng.standard_normal((N, k))
    psi = hyper.init_scale * rng.standard_normal((M, k))
    beta = 1.0 + hyper.init_scale * rng.standard_normal((l, k))
    if not hyper.position_bias:
        beta = np.ones((l, k))
    return ModelParams(phi, psi, np.zeros(N), beta, hyper.position_bias)


def train(dataset: Dataset, hyper: Hyperparams, progress=None) -> TrainReport:
    """Fit an MLF model by annealed SGD.

    Parameters
    ----------
    dataset : Dataset
        Training log; NULL-reaction records are used.
    hyper : Hyperparams
    progress : callable, optional
        Called as ``progress(epoch, nll, eta, seconds)`` after each epoch.

    Raises
    ------
    TrainingDiverged
        If the penalized NLL becomes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    cat = dataset.catalog
    rng = np.random.default_rng(hyper.seed)
    params = init_params(cat.num_users, cat.num_items, cat.action_length, hyper, rng)
    users, actions, slots = dataset.arrays()
    report = TrainReport(params)
    eta = hyper.eta0
    for epoch in range(1, hyper.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(users))
        run_sharded(_sgd_pass, order, hyper.workers,
                    (params.phi, params.psi, params.theta, params.beta, users, actions, slots),
                    (eta, hyper.lambda_U, hyper.lambda_I, hyper.lambda_P, params.position_bias_enabled))
        value = nll(params, dataset, hyper)
        elapsed = time.perf_counter() - start
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"objective became non-finite in epoch {epoch} (eta={eta:g}); lower eta0"
            )
        report.nll.append(value)
        report.eta.append(eta)
        report.seconds.append(elapsed)
        log.debug("epoch %d nll %.6g eta %.4g", epoch, value, eta)
        if progress is not None:
            progress(epoch, value, eta, elapsed)
        eta *= hyper.anneal
    return report
