"""Latent-factor collaborative filtering baselines trained on (user, item, label) dyads.

Dyads come from the interaction log: the taken item is a positive, every
shown-but-untaken item a negative. Both baselines fit ``y ~ phi_u . psi_i``,
one with squared loss on 0/1 labels and one with logistic loss on -1/+1 labels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numba
import numpy as np

from .choice_model import ModelParams
from .core import Catalog, Dataset
from .trainer import Hyperparams, TrainReport, TrainingDiverged, run_sharded

L2 = "l2"
LOGISTIC = "logistic"


@dataclass(frozen=True)
class DyadObservation:
    user: int
    item: int
    label: int


def dyads_from_log(dataset: Dataset) -> list:
    """Collapse a log into unique dyads, keeping the largest label seen per pair.

    Order follows first appearance in the log.
    """
    labels: dict = {}
    for rec in dataset.records:
        for item in rec.action:
            y = int(item == rec.reaction)
            key = (rec.user, item)
            labels[key] = max(labels.get(key, 0), y)
    return [DyadObservation(u, i, y) for (u, i), y in labels.items()]


def dyad_arrays(dyads) -> tuple:
    users = np.fromiter((d.user for d in dyads), dtype=np.int64, count=len(dyads))
    items = np.fromiter((d.item for d in dyads), dtype=np.int64, count=len(dyads))
    labels = np.fromiter((d.label for d in dyads), dtype=np.float64, count=len(dyads))
    return users, items, labels


def _coded(labels: np.ndarray, kind: str) -> np.ndarray:
    return 2.0 * labels - 1.0 if kind == LOGISTIC else labels


def cf_loss(params: ModelParams, dyads, hyper: Hyperparams, kind: str) -> float:
    """Penalized empirical risk of a CF model over ``dyads``."""
    if kind not in (L2, LOGISTIC):
        raise ValueError(f"unknown loss {kind!r}")
    users, items, labels = dyad_arrays(dyads)
    y = _coded(labels, kind)
    # a diverged model overflows here; the caller checks for non-finite values
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.einsum("nk,nk->n", params.phi[users], params.psi[items])
        data = np.sum((y - s) ** 2) if kind == L2 else np.sum(np.logaddexp(0.0, -y * s))
        return float(data + hyper.lambda_U * np.sum(params.phi ** 2)
                     + hyper.lambda_I * np.sum(params.psi ** 2))


def _dloss_dscore(y, s, kind):
    if kind == L2:
        return -2.0 * (y - s)
    return -y / (1.0 + np.exp(y * s))


def cf_gradient(params: ModelParams, dyads, hyper: Hyperparams, kind: str) -> tuple:
    """Exact ``(d/dphi, d/dpsi)`` of :func:`cf_loss`."""
    users, items, labels = dyad_arrays(dyads)
    s = np.einsum("nk,nk->n", params.phi[users], params.psi[items])
    g = _dloss_dscore(_coded(labels, kind), s, kind)
    gphi = 2 * hyper.lambda_U * params.phi
    gpsi = 2 * hyper.lambda_I * params.psi
    np.add.at(gphi, users, g[:, None] * params.psi[items])
    np.add.at(gpsi, items, g[:, None] * params.phi[users])
    return gphi, gpsi


@numba.njit(nogil=True, cache=True)
def _cf_pass(phi, psi, users, items, y, order, eta, lam_u, lam_i, logistic):
    k = phi.shape[1]
    for t in order:
        u = users[t]
        i = items[t]
        s = 0.0
        for d in range(k):
            s += phi[u, d] * psi[i, d]
        if logistic:
            g = -y[t] / (1.0 + np.exp(y[t] * s))
        else:
            g = -2.0 * (y[t] - s)
        for d in range(k):
            pu = phi[u, d]
            phi[u, d] -= eta * (g * psi[i, d] + lam_u * pu)
            psi[i, d] -= eta * (g * pu + lam_i * psi[i, d])


def _train_cf(dyads, catalog: Catalog, hyper: Hyperparams, kind: str, progress=None) -> TrainReport:
    if len(dyads) == 0:
        raise ValueError("cannot train on an empty dyad set")
    rng = np.random.default_rng(hyper.seed)
    k = hyper.k
    N, M = catalog.num_users, catalog.num_items
    params = ModelParams(hyper.init_scale * rng.standard_normal((N, k)),
                         hyper.init_scale * rng.standard_normal((M, k)),
                         np.zeros(N), np.ones((catalog.action_length, k)), False)
    users, items, labels = dyad_arrays(dyads)
    y = _coded(labels, kind)
    report = TrainReport(params)
    eta = hyper.eta0
    for epoch in range(1, hyper.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(users))
        run_sharded(_cf_pass, order, hyper.workers,
                    (params.phi, params.psi, users, items, y),
                    (eta, hyper.lambda_U, hyper.lambda_I, kind == LOGISTIC))
        value = cf_loss(params, dyads, hyper, kind)
        elapsed = time.perf_counter() - start
        if not np.isfinite(value):
            raise TrainingDiverged(
                f"CF-{kind} objective became non-finite in epoch {epoch} (eta={eta:g}); lower eta0"
            )
        report.nll.append(value)
        report.eta.append(eta)
        report.seconds.append(elapsed)
        if progress is not None:
            progress(epoch, value, eta, elapsed)
        eta *= hyper.anneal
    return report


def train_cf_l2(dyads, catalog: Catalog, hyper: Hyperparams, progress=None) -> TrainReport:
    """SGD on squared loss against 0/1 labels. The returned model has zero propensities."""
    return _train_cf(dyads, catalog, hyper, L2, progress)


def train_cf_logistic(dyads, catalog: Catalog, hyper: Hyperparams, progress=None) -> TrainReport:
    """SGD on logistic loss against -1/+1 labels. The returned model has zero propensities."""
    return _train_cf(dyads, catalog, hyper, LOGISTIC, progress)
