"""Synthetic harness for the robust-aggregation convergence guarantees.

A family holds ``T`` members: ``T - m`` well-behaved ones (strongly convex
quadratics, optionally with a smooth sinusoidal ripple) and ``m`` collapsed
ones that return adversarial gradients. Gradient descent on the robustly
aggregated member gradients is then checked against the linear-rate bound
(convex case) and the minimum-gradient-norm bound (non-convex case), with
the deviation constant instantiated as ``sqrt((T - m) n) * kappa_hat``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.stats import special_ortho_group

from .errors import ConfigError
from .robust import MEDIAN, AggregatorKind, aggregate, deviation_bound

COLLAPSED_SCALE = 1e3
DIVERGENCE_LIMIT = 1e6


@dataclass
class QuadraticFamily:
    A: np.ndarray  # (T - m, n, n)
    centers: np.ndarray  # (T - m, n)
    x_star: np.ndarray
    mu: float
    L: float
    m: int
    adversarial: np.ndarray  # (m, n) unit vectors
    collapse: str = "constant"
    ripple: float = 0.0  # amplitude of the cosine perturbation
    freqs: Optional[np.ndarray] = None  # (T - m, J, n)
    phases: Optional[np.ndarray] = None  # (T - m, J)

    @property
    def T(self) -> int:
        return self.A.shape[0] + self.m

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def good(self) -> int:
        return self.A.shape[0]

    def value(self, x) -> float:
        """Good-mean objective."""
        diff = x[None, :] - self.centers
        quad = 0.5 * np.einsum("ti,tij,tj->t", diff, self.A, diff)
        if self.ripple:
            quad = quad + self.ripple * np.cos(np.einsum("tjn,n->tj", self.freqs, x) + self.phases).sum(axis=1)
        return float(quad.mean())

    def good_gradients(self, x) -> np.ndarray:
        grads = np.einsum("tij,tj->ti", self.A, x[None, :] - self.centers)
        if self.ripple:
            s = -self.ripple * np.sin(np.einsum("tjn,n->tj", self.freqs, x) + self.phases)
            grads = grads + np.einsum("tj,tjn->tn", s, self.freqs)
        return grads

    def gradients(self, x) -> np.ndarray:
        """All ``T`` member gradients at ``x``; collapsed members come last."""
        good = self.good_gradients(x)
        if self.collapse == "repulsive":
            push = -10.0 * self.L * (x - self.x_star)
            bad = push[None, :] + COLLAPSED_SCALE * self.adversarial
        else:
            bad = COLLAPSED_SCALE * self.adversarial
        return np.concatenate([good, bad.reshape(self.m, self.n)])


def _random_unit(rng, count, n):
    v = rng.normal(size=(count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_quadratic_family(T: int, m: int, n: int, mu: float, L: float, center_spread: float, seed: int,
                          collapse: str = "constant", ripple: float = 0.0, ripple_terms: int = 3) -> QuadraticFamily:
    """Random family; good members have Hessian eigenvalues in ``[mu, L]``.

    With ``ripple > 0`` each good member gains ``ripple * sum_j cos(a_j.x + phi_j)``
    with ``||a_j|| = 1``, which keeps it ``(L + ripple_terms * ripple)``-smooth.
    """
    if not 0 <= 2 * m < T:
        raise ConfigError(f"need 0 <= m < T/2, got m={m}, T={T}")
    if not 0 < mu <= L or n < 1 or center_spread < 0:
        raise ConfigError("need 0 < mu <= L, n >= 1 and center_spread >= 0")
    if collapse not in ("constant", "repulsive"):
        raise ConfigError(f"unknown collapse mode {collapse!r}")
    rng = np.random.default_rng(seed)
    good = T - m
    A = np.empty((good, n, n))
    for t in range(good):
        eig = rng.uniform(mu, L, size=n)
        eig[0], eig[-1] = mu, L  # pin the extremes
        q = special_ortho_group.rvs(n, random_state=rng) if n > 1 else np.ones((1, 1))
        A[t] = (q * eig) @ q.T
        A[t] = 0.5 * (A[t] + A[t].T)
    base = rng.normal(size=n)
    u = _random_unit(rng, good, n) * (center_spread * rng.uniform(0, 1, size=(good, 1)))
    centers = base + u
    # minimiser of the mean of the good quadratics
    x_star = np.linalg.solve(A.sum(axis=0), np.einsum("tij,tj->i", A, centers))
    fam = QuadraticFamily(A, centers, x_star, mu, L, m, _random_unit(rng, m, n), collapse)
    if ripple:
        fam.ripple = ripple
        fam.freqs = _random_unit(rng, good * ripple_terms, n).reshape(good, ripple_terms, n)
        fam.phases = rng.uniform(0, 2 * np.pi, size=(good, ripple_terms))
        fam.L = L + ripple_terms * ripple
        fam.x_star = _global_min(fam, rng)
    return fam


def _global_min(fam: QuadraticFamily, rng, starts: int = 8) -> np.ndarray:
    best = None
    for k in range(starts):
        x0 = fam.x_star if k == 0 else fam.x_star + rng.normal(size=fam.n)
        res = minimize(fam.value, x0, jac=lambda x: fam.good_gradients(x).mean(axis=0), method="L-BFGS-B")
        if best is None or res.fun < best.fun:
            best = res
    return best.x


def family_from_arrays(A, centers, m: int = 0) -> QuadraticFamily:
    """Hand-specified convex family (for small worked examples)."""
    A = np.asarray(A, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    eig = np.concatenate([np.linalg.eigvalsh(a) for a in A])
    x_star = np.linalg.solve(A.sum(axis=0), np.einsum("tij,tj->i", A, centers))
    adv = np.zeros((m, A.shape[1]))
    adv[:, 0] = 1.0
    return QuadraticFamily(A, centers, x_star, float(eig.min()), float(eig.max()), m, adv)


@dataclass
class RobustGDTrace:
    errors: np.ndarray  # ||x^s - x*||, s = 0..S
    kappa_hats: np.ndarray  # per-iterate max deviation of good gradients from their mean
    agg_deviation: np.ndarray  # ||Agg(grads) - mean(good grads)|| per iterate
    good_grad_norms: np.ndarray  # ||mean(good grads)|| per iterate
    values: np.ndarray  # good-mean objective per iterate
    diverged: bool = False

    @property
    def kappa_hat(self) -> float:
        return float(self.kappa_hats.max())


def run_robust_gd(family: QuadraticFamily, aggregator: AggregatorKind = MEDIAN, eta: Optional[float] = None,
                  steps: int = 100, x0=None) -> RobustGDTrace:
    """``x <- x - eta * Agg(member gradients)``, recording distances to ``x*``."""
    if eta is None:
        eta = 1.0 / family.L
    if eta <= 0:
        raise ConfigError("eta must be positive")
    x = np.zeros(family.n) if x0 is None else np.array(x0, dtype=np.float64)
    errors, kappas, devs, gnorms, values = [], [], [], [], []
    diverged = False
    for s in range(steps + 1):
        err = float(np.linalg.norm(x - family.x_star))
        if not math.isfinite(err) or err > DIVERGENCE_LIMIT:
            diverged = True
            break
        grads = family.gradients(x)
        good = grads[: family.good]
        kappa, _ = deviation_bound(good, family.T)
        centre = good.mean(axis=0)
        step = aggregate(aggregator, list(grads))
        errors.append(err)
        kappas.append(kappa)
        devs.append(float(np.linalg.norm(step - centre)))
        gnorms.append(float(np.linalg.norm(centre)))
        values.append(family.value(x))
        if s < steps:
            x = x - eta * step
    return RobustGDTrace(np.array(errors), np.array(kappas), np.array(devs), np.array(gnorms),
                         np.array(values), diverged)


def gamma(trace: RobustGDTrace, family: QuadraticFamily) -> float:
    return math.sqrt(family.good * family.n) * trace.kappa_hat


def theorem1_bounds(errors, mu: float, L: float, Gamma: float, x0_err: float) -> np.ndarray:
    s = np.arange(len(errors))
    return (1.0 - mu / (mu + L)) ** s * x0_err + 2.0 * Gamma / mu


def check_theorem1(errors, mu: float, L: float, Gamma: float, x0_err: float, slack: float = 1e-9):
    """Every ``errors[s]`` within the linear-rate bound; returns (ok, worst margin)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ConfigError("empty trace")
    margins = theorem1_bounds(errors, mu, L, Gamma, x0_err) + slack - errors
    worst = float(margins.min())
    return worst >= 0.0, worst


def check_claim1(trace: RobustGDTrace, family: QuadraticFamily, slack: float = 1e-9):
    """Aggregate deviation within ``sqrt((T - m) n) * kappa_hat`` at every iterate."""
    bound = np.sqrt(family.good * family.n) * trace.kappa_hats
    margins = bound + slack - trace.agg_deviation
    return bool(np.all(margins >= 0)), float(margins.min())


def theorem2_bound(f0_gap: float, R_g: int, Gamma: float) -> float:
    return math.sqrt(2.0) / R_g * math.sqrt(max(f0_gap, 0.0)) + Gamma


def check_theorem2(good_grad_norms, f0_gap: float, R_g: int, Gamma: float, slack: float = 1e-9):
    """Smallest good-mean gradient norm over iterates 1..R_g against the bound."""
    norms = np.asarray(good_grad_norms, dtype=np.float64)[1:R_g + 1]
    if norms.size == 0:
        raise ConfigError("trace has no iterates after the start")
    bound = theorem2_bound(f0_gap, R_g, Gamma)
    best = float(norms.min())
    return best <= bound + slack, bound - best


def write_trace_csv(path, trace: RobustGDTrace, family: QuadraticFamily) -> None:
    bounds = theorem1_bounds(trace.errors, family.mu, family.L, gamma(trace, family), trace.errors[0])
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "error", "kappa_hat", "bound"])
        for s, (e, k, b) in enumerate(zip(trace.errors, trace.kappa_hats, bounds)):
            writer.writerow([s, repr(float(e)), repr(float(k)), repr(float(b))])


@dataclass
class SweepResult:
    label: str
    passed: int = 0
    total: int = 0
    worst_margin: float = math.inf
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.passed == self.total


def theorem1_sweep(families: int = 100, T: int = 10, ms=(0, 2, 4), ns=(5, 50), mu: float = 1.0, L: float = 10.0,
                   steps: int = 150, seed: int = 0, aggregator: AggregatorKind = MEDIAN, out_dir=None):
    """Convex sweep; returns (theorem-1 result, claim-1 result)."""
    thm = SweepResult("theorem1")
    claim = SweepResult("claim1")
    for i in range(families):
        m = ms[i % len(ms)]
        n = ns[(i // len(ms)) % len(ns)]
        rng = np.random.default_rng([seed, i])
        fam = make_quadratic_family(T, m, n, mu, L, float(rng.uniform(0.0, 2.0)), int(rng.integers(2 ** 31)))
        x0 = fam.x_star + rng.normal(scale=5.0, size=n)
        trace = run_robust_gd(fam, aggregator, 1.0 / L, steps, x0)
        ok, margin = check_theorem1(trace.errors, mu, L, gamma(trace, fam), trace.errors[0])
        ok = ok and not trace.diverged
        thm.total += 1
        thm.passed += ok
        thm.worst_margin = min(thm.worst_margin, margin)
        if not ok:
            thm.failures.append(i)
        ok, margin = check_claim1(trace, fam)
        claim.total += 1
        claim.passed += ok
        claim.worst_margin = min(claim.worst_margin, margin)
        if not ok:
            claim.failures.append(i)
        if out_dir is not None:
            write_trace_csv(Path(out_dir) / f"theorem1_family{i:03d}_m{m}_n{n}.csv", trace, fam)
    return thm, claim


def theorem2_sweep(seeds: int = 50, T: int = 10, m: int = 2, n: int = 5, mu: float = 1.0, L: float = 10.0,
                   ripple: float = 0.5, R_g: int = 200, seed: int = 0,
                   aggregator: AggregatorKind = MEDIAN) -> SweepResult:
    """Non-convex sweep (quadratics plus cosine ripple)."""
    res = SweepResult("theorem2")
    for i in range(seeds):
        rng = np.random.default_rng([seed, 10_000 + i])
        fam = make_quadratic_family(T, m, n, mu, L, float(rng.uniform(0.0, 1.0)), int(rng.integers(2 ** 31)),
                                    ripple=ripple)
        x0 = fam.x_star + rng.normal(scale=3.0, size=n)
        trace = run_robust_gd(fam, aggregator, 1.0 / fam.L, R_g, x0)
        f_star = min(fam.value(fam.x_star), float(trace.values.min()))
        ok, margin = check_theorem2(trace.good_grad_norms, trace.values[0] - f_star, R_g, gamma(trace, fam))
        ok = ok and not trace.diverged
        res.total += 1
        res.passed += ok
        res.worst_margin = min(res.worst_margin, margin)
        if not ok:
            res.failures.append(i)
    return res
