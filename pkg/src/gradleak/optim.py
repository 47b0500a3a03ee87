"""First-order and limited-memory quasi-Newton steppers over flat arrays.

Both operate on numpy arrays of any shape with a callback
``fun(x) -> (loss, grad)`` and an optional projection applied to every
candidate point (the attack uses a [0, 1] box clamp).
"""
from __future__ import annotations

from collections import deque
from typing import Callable, Optional

import numpy as np

from .errors import NumericalOverflowError

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]
Projection = Optional[Callable[[np.ndarray], np.ndarray]]


def _safe_eval(fun: Objective, x: np.ndarray):
    try:
        f, g = fun(x)
    except NumericalOverflowError:
        return np.inf, None
    if not np.isfinite(f):
        return np.inf, None
    return f, g


class GradientDescent:
    def __init__(self, lr: float = 0.1):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr

    def reset(self):
        pass

    def step(self, x, fun: Objective, project: Projection = None):
        f, g = fun(x)
        x_new = x - self.lr * g
        if project is not None:
            x_new = project(x_new)
        return x_new, f


class LBFGS:
    """L-BFGS with two-loop recursion and Armijo backtracking.

    The line search starts from ``lr`` (scaled by ``1/||g||_1`` on the first
    iteration after a reset) and halves the step up to ``max_line_search``
    times. Curvature pairs whose ``s`` and ``y`` are nearly orthogonal
    (cosine below 1e-10) are skipped.
    """

    def __init__(self, lr: float = 1.0, history: int = 10, max_line_search: int = 20, c1: float = 1e-4):
        if lr <= 0 or history < 1 or max_line_search < 1:
            raise ValueError("invalid LBFGS settings")
        self.lr = lr
        self.history = history
        self.max_line_search = max_line_search
        self.c1 = c1
        self.reset()

    def reset(self):
        self._pairs = deque(maxlen=self.history)
        self._cache = None  # (x, f, g) at the current iterate
        # set when even a steepest-descent step finds no decrease; repeating
        # the step from the same state would fail identically
        self.stalled = False

    def _direction(self, g: np.ndarray) -> np.ndarray:
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self._pairs):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        s, y, _ = self._pairs[-1]
        q *= np.dot(s, y) / np.dot(y, y)
        for (s, y, rho), a in zip(self._pairs, reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        return -q

    def step(self, x, fun: Objective, project: Projection = None):
        shape = x.shape

        def flat_fun(v):
            f, g = fun(v.reshape(shape))
            return f, g.reshape(-1)

        xf = np.asarray(x, dtype=np.float64).reshape(-1)
        if self._cache is not None and np.array_equal(self._cache[0], xf):
            _, f, g = self._cache
        else:
            f, g = flat_fun(xf)
            if not np.isfinite(f):
                raise NumericalOverflowError(f"loss is {f}")
        if not np.any(g):
            self.stalled = True
            return x, f

        fresh = not self._pairs
        if self._pairs:
            d = self._direction(g)
            t = self.lr
            if np.dot(g, d) >= 0:
                self._pairs.clear()
        if not self._pairs:
            d = -g
            t = min(1.0, 1.0 / np.abs(g).sum()) * self.lr

        accepted = False
        for _ in range(self.max_line_search):
            x_try = xf + t * d
            if project is not None:
                x_try = project(x_try)
            if np.array_equal(x_try, xf):
                break  # the projection absorbs the whole step
            f_try, g_try = _safe_eval(flat_fun, x_try)
            if f_try <= f + self.c1 * np.dot(g, x_try - xf):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no acceptable point: stay put and drop curvature history
            self.stalled = fresh
            self._pairs.clear()
            self._cache = (xf.copy(), f, g)
            return x, f

        s = x_try - xf
        y = g_try - g
        sy = np.dot(s, y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            self._pairs.append((s, y, 1.0 / sy))
        self._cache = (x_try.copy(), f_try, g_try)
        return x_try.reshape(shape), f
