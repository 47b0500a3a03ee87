"""Gradient inversion from one or several temporal gradients of the same batch.

The multi-temporal attack alternates two phases for ``R_g`` global rounds:
every observation runs ``R_l`` local optimizer steps from the shared
current estimate, then the ``T`` local results are combined with a robust
aggregator. The single-observation baseline is the ``T = 1`` special case.
Labels are recovered once, beforehand, from the last dense layer.
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .autodiff import GradientMatcher
from .errors import AttackAborted, ConfigError, NumericalOverflowError
from .fl_sim import GradObservation
from .models import ModelSpec
from .optim import LBFGS, GradientDescent
from .params import ParamSet
from .robust import MEAN, MEDIAN, AggregatorKind, aggregate

log = logging.getLogger(__name__)

COLLAPSE_NORM_FACTOR = 1e3


@dataclass
class AttackConfig:
    batch_size: int = 1
    T: int = 10
    R_g: int = 300
    R_l: int = 20
    optimizer: str = "lbfgs"
    lr: Optional[float] = None  # None: 1.0 for lbfgs, 0.1 for gd
    history: int = 10
    max_line_search: int = 20
    aggregator: AggregatorKind = MEDIAN
    loss: str = "l2"
    layer_weighting: str = "linear"
    tv_weight: float = 0.0
    alpha: Optional[Sequence[float]] = None
    seed: int = 0
    label_steps: int = 300
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.aggregator, str):
            self.aggregator = AggregatorKind.parse(self.aggregator)
        if self.batch_size < 1 or self.T < 1 or self.R_g < 1 or self.R_l < 1:
            raise ConfigError("batch_size, T, R_g and R_l must all be >= 1")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("l2", "cosine"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.layer_weighting not in ("uniform", "linear"):
            raise ConfigError(f"unknown layer weighting {self.layer_weighting!r}")
        if self.tv_weight < 0:
            raise ConfigError("tv_weight must be >= 0")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.alpha is not None:
            alpha = np.asarray(self.alpha, dtype=np.float64)
            if alpha.shape != (self.T,) or np.any(alpha < 0) or not math.isclose(alpha.sum(), 1.0, rel_tol=1e-9):
                raise ConfigError(f"alpha must be {self.T} non-negative weights summing to 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def step_size(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1.0 if self.optimizer == "lbfgs" else 0.1

    def make_optimizer(self):
        if self.optimizer == "gd":
            return GradientDescent(self.step_size)
        return LBFGS(self.step_size, self.history, self.max_line_search)


@dataclass
class LabelRecovery:
    labels: np.ndarray  # sorted ascending
    loss: float
    converged: bool


@dataclass
class ReconstructionResult:
    x: np.ndarray
    labels: np.ndarray
    loss_trace: np.ndarray  # (R_g,)
    per_temporal_losses: np.ndarray  # (T, R_g)
    collapsed: np.ndarray  # (T, R_g) bool
    label_recovery: Optional[LabelRecovery] = None
    wall_time: float = 0.0


def layer_weights(num_layers: int, kind: str = "uniform") -> np.ndarray:
    if num_layers < 1:
        raise ConfigError("need at least one layer")
    if kind == "uniform":
        return np.ones(num_layers)
    if kind == "linear":
        ranks = np.arange(1, num_layers + 1, dtype=np.float64)
        return ranks / ranks.sum()
    raise ConfigError(f"unknown layer weighting {kind!r}")


# -- label recovery ----------------------------------------------------------

def _round_counts(totals: np.ndarray, b: int) -> np.ndarray:
    """Integer counts summing to ``b``, by largest remainder."""
    totals = np.clip(totals, 0.0, None)
    if totals.sum() > 0:
        totals = totals * (b / totals.sum())
    counts = np.floor(totals).astype(int)
    order = np.argsort(-(totals - counts), kind="stable")
    counts[order[: b - counts.sum()]] += 1
    return counts


def recover_labels(fc_grad, fc_weights, b: int, N: int, M: int, opt_steps: int = 300, seed: int = 0,
                   fc_bias_grad=None, fc_bias=None, activation: str = "none",
                   tol: float = 1e-10) -> LabelRecovery:
    """Infer the batch's label multiset from the last dense layer's gradient.

    Optimises dummy layer inputs (``b x M``, passed through ``activation``)
    and dummy label scores (``b x N``) so that the gradient of the dense layer
    taken as a standalone softmax classifier matches ``fc_grad`` (and the
    bias gradient when given). The class counts are read off the summed
    soft labels.
    """
    fc_grad = np.asarray(fc_grad, dtype=np.float64)
    fc_weights = np.asarray(fc_weights, dtype=np.float64)
    if fc_grad.shape != (N, M) or fc_weights.shape != (N, M):
        raise ConfigError(f"FC gradient/weights must be {N}x{M}, got {fc_grad.shape} and {fc_weights.shape}")
    if b < 1 or N < 1:
        raise ConfigError("b and N must be >= 1")
    if N == 1:
        return LabelRecovery(np.zeros(b, dtype=np.int64), 0.0, True)
    bias = np.zeros(N) if fc_bias is None else np.asarray(fc_bias, dtype=np.float64)
    rng = np.random.default_rng(seed)
    v = np.concatenate([rng.normal(size=b * M), rng.normal(size=b * N)])
    target_w = torch.from_numpy(fc_grad)
    target_b = None if fc_bias_grad is None else torch.from_numpy(np.asarray(fc_bias_grad, dtype=np.float64))
    w_t = torch.from_numpy(fc_weights)
    b_t = torch.from_numpy(bias)
    squash = {"sigmoid": torch.sigmoid, "relu": torch.nn.functional.softplus}.get(activation, lambda u: u)

    def fun(vec):
        vt = torch.from_numpy(vec).requires_grad_()
        x = squash(vt[: b * M].reshape(b, M))
        scores = vt[b * M:].reshape(b, N)
        dz = (torch.softmax(x @ w_t.T + b_t, dim=1) - torch.softmax(scores, dim=1)) / b
        loss = ((dz.T @ x - target_w) ** 2).sum()
        if target_b is not None:
            loss = loss + ((dz.sum(dim=0) - target_b) ** 2).sum()
        (g,) = torch.autograd.grad(loss, vt)
        return float(loss.detach()), g.numpy()

    scale = max(float((fc_grad ** 2).sum()), 1e-300)
    opt = LBFGS()
    loss = math.inf
    best_v, best_loss = v, math.inf
    for _ in range(opt_steps):
        v, loss = opt.step(v, fun)
        if loss < best_loss:
            best_v, best_loss = v, loss
        if loss <= tol * scale:
            break
    final_loss, _ = fun(v)
    if final_loss < best_loss:
        best_v, best_loss = v, final_loss
    converged = best_loss <= 1e-6 * scale
    if not converged:
        warnings.warn(f"label recovery did not converge (relative loss {best_loss / scale:.3g})", RuntimeWarning)
    soft = torch.softmax(torch.from_numpy(best_v[b * M:].reshape(b, N)), dim=1).numpy()
    counts = _round_counts(soft.sum(axis=0), b)
    labels = np.repeat(np.arange(N), counts).astype(np.int64)
    return LabelRecovery(labels, best_loss, converged)


def _fc_activation(spec: ModelSpec) -> str:
    """Nonlinearity feeding the last dense layer, as seen by label recovery."""
    last_dense = max(i for i, layer in enumerate(spec.layers) if layer.kind == "dense")
    for layer in reversed(spec.layers[:last_dense]):
        if layer.kind in ("sigmoid", "relu"):
            return layer.kind
        if layer.kind == "dense" or layer.kind == "conv2d":
            break
    return "none"


def labels_from_observation(obs: GradObservation, spec: ModelSpec, b: int, steps: int = 300,
                            seed: int = 0) -> LabelRecovery:
    params = param_template(spec).unflatten(obs.weights)
    grads = param_template(spec).unflatten(obs.gradient)
    idx, M = spec.fc_layer()
    return recover_labels(
        grads.arrays()[idx], params.arrays()[idx], b, spec.num_classes, M, steps, seed,
        fc_bias_grad=grads.arrays()[idx + 1], fc_bias=params.arrays()[idx + 1],
        activation=_fc_activation(spec),
    )


def param_template(spec: ModelSpec) -> ParamSet:
    return ParamSet((name, np.zeros(shape)) for name, shape in spec.param_shapes())


# -- gradient alignment ------------------------------------------------------

def _components(n: int, edges) -> list[list[int]]:
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def align_gradients(observations: Sequence[GradObservation], spec: ModelSpec, cos_threshold: float = 0.5,
                    batch_size: int = 1, label_steps: int = 300, seed: int = 0,
                    label_sets: Optional[Sequence[Sequence[int]]] = None) -> list[list[int]]:
    """Group observations that appear to come from the same batch.

    Observations are first split by recovered label multiset, then each split
    is divided into connected components of the graph linking gradients with
    cosine similarity >= ``cos_threshold``. Zero gradients stay singletons.
    """
    n = len(observations)
    if n == 0:
        return []
    dims = {obs.gradient.shape for obs in observations}
    if len(dims) != 1:
        raise ConfigError(f"observations differ in dimension: {sorted(dims)}")
    if label_sets is None:
        label_sets = [labels_from_observation(obs, spec, batch_size, label_steps, seed).labels
                      for obs in observations]
    by_labels: dict[tuple, list[int]] = {}
    for i, labels in enumerate(label_sets):
        by_labels.setdefault(tuple(sorted(int(v) for v in labels)), []).append(i)
    clusters = []
    for members in by_labels.values():
        norms = {i: float(np.linalg.norm(observations[i].gradient)) for i in members}
        live = [i for i in members if norms[i] > 0]
        clusters.extend([i] for i in members if norms[i] == 0)
        edges = []
        for a_pos, i in enumerate(live):
            gi = observations[i].gradient / norms[i]
            for j in live[a_pos + 1:]:
                if float(gi @ observations[j].gradient) / norms[j] >= cos_threshold:
                    edges.append((a_pos, live.index(j)))
        clusters.extend([[live[k] for k in comp] for comp in _components(len(live), edges)])
    clusters = [sorted(c) for c in clusters]
    return sorted(clusters, key=lambda c: c[0])


# -- reconstruction ----------------------------------------------------------

def make_matcher(obs: GradObservation, spec: ModelSpec, labels, config: AttackConfig) -> GradientMatcher:
    params = param_template(spec).unflatten(obs.weights)
    weights = layer_weights(len(params), config.layer_weighting)
    kind = "cosine" if config.loss == "cosine" else "l2"
    return GradientMatcher(spec, params, labels, obs.gradient, weights, kind, config.tv_weight)


def attack_loss(matcher: GradientMatcher, x_hat) -> float:
    """Matching loss (plus TV prior) of a candidate batch; see :class:`GradientMatcher`."""
    return matcher.loss(x_hat)


def _box(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def local_optimize(x_init, matcher: GradientMatcher, config: AttackConfig):
    """``R_l`` optimizer steps from ``x_init``; returns (x, loss, collapsed).

    Optimizer state starts fresh. Iterates are clamped to [0, 1] after every
    step. A non-finite loss reverts to the last finite iterate and marks the
    run as collapsed.
    """
    x = np.array(x_init, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ConfigError("initial iterate must be finite")
    limit = COLLAPSE_NORM_FACTOR * math.sqrt(x.size)
    opt = config.make_optimizer()
    memo: dict = {}

    def fun(v):
        key = v.tobytes()
        if key not in memo:
            memo.clear()
            memo[key] = matcher.loss_and_grad(v)
        return memo[key]

    last_good = x
    for _ in range(config.R_l):
        try:
            x, _ = opt.step(x, fun, _box)
        except NumericalOverflowError:
            return last_good, math.inf, True
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > limit:
            return last_good, math.inf, True
        last_good = x
        if getattr(opt, "stalled", False):
            break
    try:
        loss, _ = fun(x)
    except NumericalOverflowError:
        return x, math.inf, True
    return x, loss, False


def initial_batch(spec: ModelSpec, b: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(b,) + tuple(spec.input_shape))


def tgias_ro(observations: Sequence[GradObservation], spec: ModelSpec, config: AttackConfig,
             labels=None) -> ReconstructionResult:
    """Multi-temporal reconstruction with robust aggregation of local results.

    ``labels`` skips label recovery (evaluation with known labels).
    """
    start = time.perf_counter()
    if len(observations) != config.T:
        raise ConfigError(f"config.T={config.T} but {len(observations)} observations were given")
    b = config.batch_size
    recovery = None
    if labels is None:
        earliest = min(range(len(observations)), key=lambda i: (observations[i].round, i))
        recovery = labels_from_observation(observations[earliest], spec, b, config.label_steps, config.seed)
        labels = recovery.labels
    labels = np.sort(np.asarray(labels, dtype=np.int64))
    matchers = [make_matcher(obs, spec, labels, config) for obs in observations]
    x = initial_batch(spec, b, config.seed)
    per_t = np.full((config.T, config.R_g), np.nan)
    collapsed = np.zeros((config.T, config.R_g), dtype=bool)
    trace = np.full(config.R_g, np.nan)
    alpha = None if config.alpha is None else np.asarray(config.alpha, dtype=np.float64)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 and config.T > 1 else None
    try:
        for s in range(config.R_g):
            def run(t, x=x):
                return local_optimize(x, matchers[t], config)

            results = list(pool.map(run, range(config.T))) if pool else [run(t) for t in range(config.T)]
            keep = [t for t, (_, _, bad) in enumerate(results) if not bad]
            for t, (_, loss, bad) in enumerate(results):
                per_t[t, s] = loss
                collapsed[t, s] = bad
            if not keep:
                raise AttackAborted(f"all {config.T} temporal optimizations collapsed in global round {s}")
            weights = None
            if config.aggregator.name == "mean" and alpha is not None:
                weights = alpha[keep] / alpha[keep].sum()
            x = aggregate(config.aggregator, [results[t][0] for t in keep], weights)
            losses = np.array([results[t][1] for t in keep])
            # shifted mean: exact when every kept loss is the same
            trace[s] = float(losses.min() + (losses - losses.min()).mean())
    finally:
        if pool:
            pool.shutdown()
    return ReconstructionResult(x, labels, trace, per_t, collapsed, recovery, time.perf_counter() - start)


def dlg_attack(obs: GradObservation, spec: ModelSpec, config: AttackConfig, labels=None) -> ReconstructionResult:
    """Single-gradient baseline: the T = 1 case with a plain mean."""
    single = replace(config, T=1, aggregator=MEAN, alpha=None, workers=1)
    return tgias_ro([obs], spec, single, labels)
