"""FedSGD simulation producing the honest-but-curious server's view.

Each round the server samples clients; every sampled client uploads the
gradient of one batch (its fixed batches are visited cyclically, so the
same batch recurs across rounds), optionally sparsified and noised. The
server averages the uploads and takes one SGD step. Every upload is
logged as a :class:`GradObservation` together with the weights it was
computed at.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import grad_params
from .errors import ConfigError, DimensionError
from .models import ModelSpec, init_params, sgd_step
from .params import ParamSet

log = logging.getLogger(__name__)

DEFENSE_ORDERS = ("sparsify,noise", "noise,sparsify")


@dataclass
class FederationConfig:
    clients: int = 1
    client_fraction: float = 1.0
    rounds: int = 10
    batch_size: int = 4
    lr: float = 0.1
    client_weights: Optional[Sequence[float]] = None
    dp_sigma: float = 0.0
    sparsify_p: float = 0.0
    defense_order: str = "sparsify,noise"
    seed: int = 0
    init_seed: Optional[int] = None

    def __post_init__(self):
        if self.clients < 1:
            raise ConfigError("need at least one client")
        if not 0.0 < self.client_fraction <= 1.0:
            raise ConfigError(f"client_fraction must be in (0, 1], got {self.client_fraction}")
        if self.rounds < 0 or self.batch_size < 1:
            raise ConfigError("rounds must be >= 0 and batch_size >= 1")
        if self.dp_sigma < 0:
            raise ConfigError("dp_sigma must be >= 0")
        if not 0.0 <= self.sparsify_p < 1.0:
            raise ConfigError(f"sparsify_p must be in [0, 1), got {self.sparsify_p}")
        if self.defense_order not in DEFENSE_ORDERS:
            raise ConfigError(f"defense_order must be one of {DEFENSE_ORDERS}")
        if self.client_weights is not None:
            lam = np.asarray(self.client_weights, dtype=np.float64)
            if lam.shape != (self.clients,):
                raise ConfigError(f"need {self.clients} client weights, got {lam.shape}")
            if not math.isclose(lam.sum(), self.clients, rel_tol=1e-9):
                raise ConfigError(f"client weights must sum to K={self.clients}, got {lam.sum()}")

    def weights(self) -> np.ndarray:
        if self.client_weights is None:
            return np.ones(self.clients)
        return np.asarray(self.client_weights, dtype=np.float64)


@dataclass(frozen=True)
class GradObservation:
    """One upload as seen by the server: round, client, weights, gradient.

    The ground-truth batch identity is kept out of the public fields; read it
    only through :func:`evaluation_batch_tag`.
    """

    round: int
    client: int
    weights: np.ndarray = field(repr=False)
    gradient: np.ndarray = field(repr=False)
    _batch_tag: int = field(default=-1, repr=False, compare=False)


def evaluation_batch_tag(obs: GradObservation) -> int:
    """Ground-truth batch id of an observation. Evaluation use only."""
    return obs._batch_tag


@dataclass
class ClientData:
    x: np.ndarray
    y: np.ndarray


def aggregate_updates(gradients: Sequence, weights=None) -> np.ndarray:
    """Server average ``sum_k (lambda_k / K) g_k`` with ``K = len(gradients)``."""
    if len(gradients) == 0:
        raise ConfigError("no gradients to aggregate")
    stacked = np.stack([np.asarray(g, dtype=np.float64) for g in gradients])
    k = stacked.shape[0]
    lam = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if lam.shape != (k,):
        raise DimensionError(f"need {k} weights, got {lam.shape}")
    return (lam / k) @ stacked


def sample_clients(K: int, fraction: float, round: int, seed: int) -> list[int]:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    s = max(1, int(math.floor(fraction * K + 0.5)))
    if s >= K:
        return list(range(K))
    rng = np.random.default_rng([seed, round])
    return sorted(int(i) for i in rng.choice(K, size=s, replace=False))


def apply_dp_noise(g, sigma: float, seed) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if sigma == 0:
        return g.copy()
    rng = np.random.default_rng(seed)
    return g + rng.normal(0.0, sigma, size=g.shape)


def sparsify(g, p: float) -> np.ndarray:
    """Zero the ``floor(p * dim)`` smallest-magnitude entries (lower index first on ties)."""
    g = np.asarray(g, dtype=np.float64)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"p must be in [0, 1), got {p}")
    k = int(math.floor(p * g.size + 1e-9))
    out = g.copy()
    if k:
        order = np.argsort(np.abs(g), kind="stable")
        out[order[:k]] = 0.0
    return out


def partition_batches(n: int, batch_size: int, seed) -> list[np.ndarray]:
    """Fixed partition of ``n`` sample indices into full batches."""
    if n < batch_size:
        raise ConfigError(f"client has {n} samples, fewer than batch size {batch_size}")
    order = np.random.default_rng(seed).permutation(n)
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(n // batch_size)]


def defend(g, fed: FederationConfig, round: int, client: int) -> np.ndarray:
    for step in fed.defense_order.split(","):
        if step == "sparsify" and fed.sparsify_p > 0:
            g = sparsify(g, fed.sparsify_p)
        elif step == "noise" and fed.dp_sigma > 0:
            g = apply_dp_noise(g, fed.dp_sigma, [fed.seed, round, client, 7])
    return g


def run_fedsgd(fed: FederationConfig, spec: ModelSpec, datasets: Sequence[ClientData],
               params: Optional[ParamSet] = None):
    """Simulate ``fed.rounds`` FedSGD rounds; returns (final params, observations)."""
    if len(datasets) != fed.clients:
        raise ConfigError(f"config has {fed.clients} clients but {len(datasets)} datasets were given")
    for k, data in enumerate(datasets):
        if len(data.y) == 0:
            raise ConfigError(f"client {k} has an empty dataset")
    if params is None:
        params = init_params(spec, fed.seed if fed.init_seed is None else fed.init_seed)
    batches = [partition_batches(len(d.y), fed.batch_size, [fed.seed, k]) for k, d in enumerate(datasets)]
    visits = [0] * fed.clients
    lam = fed.weights()
    observations = []
    for t in range(fed.rounds):
        chosen = sample_clients(fed.clients, fed.client_fraction, t, fed.seed)
        w_flat = params.flatten()
        uploads = []
        for k in chosen:
            tag = visits[k] % len(batches[k])
            visits[k] += 1
            idx = batches[k][tag]
            x = datasets[k].x[idx].reshape((len(idx),) + tuple(spec.input_shape))
            g = defend(grad_params(spec, params, x, datasets[k].y[idx]), fed, t, k)
            uploads.append(g)
            observations.append(GradObservation(t, k, w_flat.copy(), g, tag))
        update = aggregate_updates(uploads, lam[chosen])
        params = sgd_step(params, update, fed.lr)
        log.debug("round %d: clients %s, |update| = %.3g", t, chosen, np.linalg.norm(update))
    return params, observations


def evaluation_batch(obs: GradObservation, fed: FederationConfig, datasets: Sequence[ClientData]):
    """Ground-truth (x, y) behind an observation. Evaluation use only."""
    data = datasets[obs.client]
    batches = partition_batches(len(data.y), fed.batch_size, [fed.seed, obs.client])
    idx = batches[evaluation_batch_tag(obs)]
    return data.x[idx], data.y[idx]
