"""Parameter gradients and gradient-matching losses with their input gradients.

Everything is evaluated in float64 with torch's reverse mode. The input
gradient of a matching loss differentiates through the parameter gradient
(double backward), so the forward pass must be built with ``create_graph``.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, NumericalOverflowError, ShapeError
from .models import ModelSpec, check_input, check_params, forward
from .params import ParamSet

torch.set_default_dtype(torch.float64)


def as_labels(y, spec: ModelSpec) -> np.ndarray:
    """Validate labels: ``b`` ints in [0, N) or a ``b x N`` real matrix."""
    y = np.asarray(y)
    if y.ndim == 1 and spec.loss == "ce":
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ShapeError("hard labels must be integers", layer="labels")
            y = y.astype(np.int64)
        if y.size and (y.min() < 0 or y.max() >= spec.num_classes):
            raise ShapeError(f"labels must lie in [0, {spec.num_classes})", layer="labels")
        return y.astype(np.int64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if y.ndim != 2 or y.shape[1] != spec.num_classes:
        raise ShapeError(f"soft labels must be b x {spec.num_classes}, got {y.shape}", layer="labels")
    if not np.all(np.isfinite(y)):
        raise ShapeError("soft labels contain non-finite values", layer="labels")
    return y


def _loss_from_logits(spec: ModelSpec, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if spec.loss == "sq":
        return 0.5 * ((logits - y) ** 2).sum(dim=1).mean()
    if y.dtype == torch.int64:
        return F.cross_entropy(logits, y)
    return -(y * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def _prepare(spec, params, x, y):
    x = np.asarray(x, dtype=np.float64)
    check_params(spec, params)
    check_input(spec, x.shape)
    y = as_labels(y, spec)
    if y.shape[0] != x.shape[0]:
        raise ShapeError(f"batch of {x.shape[0]} inputs but {y.shape[0]} labels", layer="labels")
    return x, y


def forward_loss(spec: ModelSpec, params: ParamSet, x, y) -> float:
    """Batch-mean loss (log-sum-exp stabilised softmax cross-entropy by default)."""
    x, y = _prepare(spec, params, x, y)
    with torch.no_grad():
        weights = [torch.from_numpy(a) for a in params.arrays()]
        value = _loss_from_logits(spec, forward(spec, weights, torch.from_numpy(x)), torch.from_numpy(y))
    return float(value)


def grad_params(spec: ModelSpec, params: ParamSet, x, y) -> np.ndarray:
    """Flattened gradient of the batch-mean loss w.r.t. every parameter."""
    x, y = _prepare(spec, params, x, y)
    weights = [torch.from_numpy(a.copy()).requires_grad_() for a in params.arrays()]
    loss = _loss_from_logits(spec, forward(spec, weights, torch.from_numpy(x)), torch.from_numpy(y))
    grads = torch.autograd.grad(loss, weights)
    return torch.cat([g.reshape(-1) for g in grads]).numpy().copy()


def total_variation(images: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV of a (b, C, H, W) batch: summed absolute neighbour differences."""
    dh = (images[:, :, :, 1:] - images[:, :, :, :-1]).abs().sum()
    dv = (images[:, :, 1:, :] - images[:, :, :-1, :]).abs().sum()
    return dh + dv


class GradientMatcher:
    """Matching loss between the gradient at a candidate batch and a target gradient.

    Built once per (weights, target) pair and reused across optimizer steps.
    ``kind`` is ``"l2"`` (layer-weighted squared distance) or ``"cosine"``
    (one minus the layer-weighted cosine similarity).
    """

    def __init__(self, spec: ModelSpec, params: ParamSet, y, g_target, layer_weights=None,
                 kind: str = "l2", tv_weight: float = 0.0):
        check_params(spec, params)
        if kind not in ("l2", "cosine"):
            raise ConfigError(f"unknown matching loss {kind!r}")
        g_target = np.asarray(g_target, dtype=np.float64)
        if g_target.shape != (params.total_dim,):
            raise DimensionError(f"target gradient has shape {g_target.shape}, expected ({params.total_dim},)")
        if layer_weights is None:
            layer_weights = np.ones(len(params))
        layer_weights = np.asarray(layer_weights, dtype=np.float64)
        if layer_weights.shape != (len(params),) or np.any(layer_weights < 0):
            raise DimensionError(f"need {len(params)} non-negative layer weights, got {layer_weights.tolist()}")
        if tv_weight < 0:
            raise ConfigError("tv_weight must be >= 0")
        self.spec = spec
        self.kind = kind
        self.tv_weight = float(tv_weight)
        self.y_np = as_labels(y, spec)
        self.y = torch.from_numpy(self.y_np)
        self.weights = [torch.from_numpy(a.copy()).requires_grad_() for a in params.arrays()]
        self.targets = [torch.from_numpy(g_target[s].reshape(shape).copy())
                        for s, shape in zip(params.slices(), params.shapes)]
        self.layer_weights = [float(w) for w in layer_weights]
        if kind == "cosine":
            self._target_norm = np.sqrt(sum(w * float((t * t).sum()) for w, t in zip(self.layer_weights, self.targets)))
            if self._target_norm == 0.0:
                raise NumericalOverflowError("cosine loss needs a non-zero target gradient")

    def _loss(self, x: torch.Tensor) -> torch.Tensor:
        logits = forward(self.spec, self.weights, x)
        loss = _loss_from_logits(self.spec, logits, self.y)
        grads = torch.autograd.grad(loss, self.weights, create_graph=True)
        if self.kind == "l2":
            value = sum(w * ((g - t) ** 2).sum()
                        for w, g, t in zip(self.layer_weights, grads, self.targets) if w != 0.0)
        else:
            dot = sum(w * (g * t).sum() for w, g, t in zip(self.layer_weights, grads, self.targets) if w != 0.0)
            sq = sum(w * (g * g).sum() for w, g, t in zip(self.layer_weights, grads, self.targets) if w != 0.0)
            value = 1.0 - dot / (torch.sqrt(sq) * self._target_norm)
        if not torch.is_tensor(value):
            value = x.sum() * 0.0
        if self.tv_weight > 0.0:
            images = x.reshape((x.shape[0],) + self.spec.image_shape())
            value = value + self.tv_weight * total_variation(images)
        return value

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        check_input(self.spec, x.shape)
        if x.shape[0] != self.y_np.shape[0]:
            raise ShapeError(f"batch of {x.shape[0]} inputs but {self.y_np.shape[0]} labels", layer="labels")
        return x

    def loss(self, x) -> float:
        xt = torch.from_numpy(self._check_x(x))
        value = float(self._loss(xt).detach())
        if not np.isfinite(value):
            raise NumericalOverflowError(f"matching loss is {value}")
        return value

    def loss_and_grad(self, x) -> tuple[float, np.ndarray]:
        xt = torch.from_numpy(self._check_x(x).copy()).requires_grad_()
        value = self._loss(xt)
        (gx,) = torch.autograd.grad(value, xt, allow_unused=True)
        loss = float(value.detach())
        grad = np.zeros(xt.shape) if gx is None else gx.numpy().copy()
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalOverflowError(f"non-finite matching loss or gradient (loss={loss})")
        return loss, grad


def gia_loss(spec: ModelSpec, params: ParamSet, x_hat, y_hat, g_target, layer_weights=None) -> float:
    """Sum over layers of ``weight * ||grad(x_hat, y_hat) - target||^2``."""
    return GradientMatcher(spec, params, y_hat, g_target, layer_weights).loss(x_hat)


def grad_input(spec: ModelSpec, params: ParamSet, x_hat, y_hat, g_target, layer_weights=None) -> np.ndarray:
    """Gradient of :func:`gia_loss` with respect to ``x_hat`` (same shape)."""
    return GradientMatcher(spec, params, y_hat, g_target, layer_weights).loss_and_grad(x_hat)[1]


def finite_diff_check(f: Callable[[np.ndarray], float], grad, x, step: float = 1e-5,
                      indices: Sequence[int] | None = None) -> float:
    """Max relative error between central differences of ``f`` and ``grad``.

    ``grad`` is the analytic gradient at ``x`` (array or callable). The
    relative error of each entry uses ``max(|a|, |b|, 1e-8)`` as denominator.
    ``indices`` restricts the comparison to selected flat coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(grad(x) if callable(grad) else grad, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        numeric = (hi - lo) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
