"""Robust aggregation of T equally-shaped vectors.

Mean, coordinate-wise median, trimmed mean and (single-vector) Krum, plus
the empirical deviation bound of the coordinate-wise median around the mean
of the well-behaved vectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import AggregationError


@dataclass(frozen=True)
class AggregatorKind:
    """``name`` is one of mean, median, trimmed_mean, krum.

    ``beta`` is the trimming fraction and ``f`` the Krum fault count; ``None``
    selects the defaults (0.2 and ``(T - 1) // 3``).
    """

    name: str
    beta: Optional[float] = None
    f: Optional[int] = None

    def __post_init__(self):
        if self.name not in ("mean", "median", "trimmed_mean", "krum"):
            raise AggregationError(f"unknown aggregator {self.name!r}")
        if self.beta is not None and not 0.0 <= self.beta < 0.5:
            raise AggregationError(f"trimmed mean beta must lie in [0, 0.5), got {self.beta}")
        if self.f is not None and self.f < 0:
            raise AggregationError(f"krum f must be >= 0, got {self.f}")

    @classmethod
    def parse(cls, text: str) -> "AggregatorKind":
        """``mean``, ``median``, ``trimmed_mean[:beta]`` or ``krum[:f]``."""
        name, _, arg = text.strip().lower().partition(":")
        name = name.replace("-", "_")
        if name in ("trimmed", "trimmedmean"):
            name = "trimmed_mean"
        if not arg:
            return cls(name)
        if name == "trimmed_mean":
            return cls(name, beta=float(arg))
        if name == "krum":
            return cls(name, f=int(arg))
        raise AggregationError(f"aggregator {name!r} takes no argument")

    def __str__(self) -> str:
        if self.name == "trimmed_mean" and self.beta is not None:
            return f"trimmed_mean:{self.beta:g}"
        if self.name == "krum" and self.f is not None:
            return f"krum:{self.f}"
        return self.name


MEAN = AggregatorKind("mean")
MEDIAN = AggregatorKind("median")


def _stack(vectors) -> np.ndarray:
    if len(vectors) == 0:
        raise AggregationError("cannot aggregate an empty set")
    try:
        stacked = np.stack([np.asarray(v, dtype=np.float64).reshape(-1) for v in vectors])
    except ValueError as exc:
        raise AggregationError(f"vectors differ in size: {exc}") from None
    shapes = {np.shape(v) for v in vectors}
    if len(shapes) != 1:
        raise AggregationError(f"vectors differ in shape: {sorted(shapes)}")
    return stacked


def _shifted_mean(rows: np.ndarray, weights=None) -> np.ndarray:
    # Mean taken around a base row, so identical rows give that row exactly.
    # Unweighted rows are sorted per coordinate first, which makes the result
    # bit-identical under any permutation of the inputs.
    if weights is None:
        rows = np.sort(rows, axis=0)
        base = rows[0]
        return base + (rows - base).mean(axis=0)
    base = rows[0]
    return base + np.tensordot(weights, rows - base, axes=1)


def krum_scores(stacked: np.ndarray, f: int) -> np.ndarray:
    t = stacked.shape[0]
    k = t - f - 2
    sq = ((stacked[:, None, :] - stacked[None, :, :]) ** 2).sum(axis=-1)
    scores = np.empty(t)
    for i in range(t):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:k].sum()
    return scores


def aggregate(kind: AggregatorKind, vectors: Sequence, weights=None) -> np.ndarray:
    """Combine ``vectors`` (all the same shape) into one of that shape.

    ``weights`` (summing to one) are honoured by the mean only.
    """
    stacked = _stack(vectors)
    shape = np.shape(vectors[0])
    t = stacked.shape[0]
    if kind.name == "mean":
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != (t,):
                raise AggregationError(f"need {t} weights, got {weights.shape}")
        out = _shifted_mean(stacked, weights)
    elif kind.name == "median":
        out = np.median(stacked, axis=0)
    elif kind.name == "trimmed_mean":
        beta = 0.2 if kind.beta is None else kind.beta
        k = int(math.floor(beta * t))
        if 2 * k >= t:
            raise AggregationError(f"trimming {k} from each end leaves nothing of T={t}")
        kept = np.sort(stacked, axis=0)[k:t - k]
        out = _shifted_mean(kept)
    else:
        f = (t - 1) // 3 if kind.f is None else kind.f
        if t < f + 3:
            raise AggregationError(f"krum with f={f} needs T >= {f + 3}, got {t}")
        scores = krum_scores(stacked, f)
        out = stacked[int(np.argmin(scores))].copy()  # argmin takes the lowest index on ties
    return out.reshape(shape)


def deviation_bound(good_vectors: Sequence, T: int) -> tuple[float, float]:
    """Largest distance of a good vector from the good mean, and the median bound.

    Returns ``(kappa_hat, sqrt(len(good) * n) * kappa_hat)`` where ``n`` is the
    vector dimension; ``T`` is accepted for symmetry with the full set and must
    be at least ``len(good_vectors)``.
    """
    stacked = _stack(good_vectors)
    good, n = stacked.shape
    if T < good:
        raise AggregationError(f"T={T} is smaller than the {good} good vectors")
    centre = stacked.mean(axis=0)
    kappa = float(np.sqrt(((stacked - centre) ** 2).sum(axis=1)).max())
    return kappa, math.sqrt(good * n) * kappa
