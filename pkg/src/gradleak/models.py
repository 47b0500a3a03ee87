"""Small classifiers (dense MLPs, a one-conv CNN) and their descriptors.

A model is described by a :class:`ModelSpec`, which serialises to a single
line such as ``mlp:784-64-10:sigmoid`` or ``cnn:1x28x28-8-10``. Parameters
live in a :class:`~gradleak.params.ParamSet`; the forward pass is written
against torch tensors so the differentiation engine can reuse it verbatim.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DimensionError, ShapeError
from .params import ParamSet

LAYER_KINDS = ("dense", "conv2d", "relu", "sigmoid", "maxpool2x2", "flatten")
LOSS_KINDS = ("ce", "sq")

MLP_SIGMOID = "mlp:784-64-10:sigmoid"
MLP_RELU = "mlp:784-64-10:relu"
CNN = "cnn:1x28x28-8-10"
ZOO = (MLP_SIGMOID, MLP_RELU, CNN)


@dataclass(frozen=True)
class Layer:
    kind: str
    # dense: (in, out); conv2d: (in_ch, out_ch, kernel); activations: ()
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        need = {"dense": 2, "conv2d": 3}.get(self.kind, 0)
        if len(self.dims) != need or any(d <= 0 for d in self.dims):
            raise ConfigError(f"{self.kind} layer needs {need} positive dims, got {self.dims}")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int
    loss: str = "ce"
    descriptor: str = field(default="", compare=False)

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not any(layer.kind == "dense" for layer in self.layers):
            raise ConfigError("model needs at least one dense layer")
        out = self.layer_shapes()[-1]
        if out != (self.num_classes,):
            raise ShapeError(f"final output {out} does not match {self.num_classes} classes")

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each layer; element 0 is the input."""
        shape = tuple(self.input_shape)
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            name = f"{layer.kind}{i}"
            if layer.kind == "dense":
                if shape != (layer.dims[0],):
                    raise ShapeError(f"expects input ({layer.dims[0]},), got {shape}", layer=name)
                shape = (layer.dims[1],)
            elif layer.kind == "conv2d":
                cin, cout, k = layer.dims
                if len(shape) != 3 or shape[0] != cin or shape[1] < k or shape[2] < k:
                    raise ShapeError(f"expects ({cin}, >={k}, >={k}), got {shape}", layer=name)
                shape = (cout, shape[1] - k + 1, shape[2] - k + 1)
            elif layer.kind == "maxpool2x2":
                if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
                    raise ShapeError(f"expects a (C, H, W) map of at least 2x2, got {shape}", layer=name)
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            shapes.append(shape)
        return shapes

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "dense":
                fan_in, fan_out = layer.dims
                out.append((f"dense{i}.weight", (fan_out, fan_in)))
                out.append((f"dense{i}.bias", (fan_out,)))
            elif layer.kind == "conv2d":
                cin, cout, k = layer.dims
                out.append((f"conv{i}.weight", (cout, cin, k, k)))
                out.append((f"conv{i}.bias", (cout,)))
        return out

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.param_shapes())

    def fc_layer(self) -> tuple[int, int]:
        """ParamSet index of the last dense weight and that layer's input width M."""
        names = [name for name, _ in self.param_shapes()]
        for i in range(len(self.layers) - 1, -1, -1):
            if self.layers[i].kind == "dense":
                return names.index(f"dense{i}.weight"), self.layers[i].dims[0]
        raise ConfigError("model has no dense layer")  # unreachable given __post_init__

    def image_shape(self) -> tuple[int, int, int]:
        """(C, H, W) view of one input, for writing reconstructions as images."""
        if len(self.input_shape) == 3:
            return tuple(self.input_shape)
        (d,) = self.input_shape
        side = int(round(np.sqrt(d)))
        if side * side == d:
            return (1, side, side)
        if d % 3 == 0 and int(round(np.sqrt(d // 3))) ** 2 == d // 3:
            side = int(round(np.sqrt(d // 3)))
            return (3, side, side)
        return (1, 1, d)

    def __str__(self) -> str:
        return self.descriptor or describe(self)


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split("x"))


def parse_model(descriptor: str) -> ModelSpec:
    """Build a ModelSpec from its one-line descriptor.

    ``mlp:D0-D1-...-N:act[:loss]``
        dense layers with ``act`` (sigmoid, relu or none) between them.
    ``cnn:CxHxW-F-N[:k]``
        conv(C->F, k x k, default 5), relu, maxpool2x2, flatten, dense(N).
    """
    text = descriptor.strip()
    parts = text.split(":")
    try:
        family = parts[0]
        if family == "mlp":
            if len(parts) not in (3, 4):
                raise ValueError("expected mlp:dims:activation[:loss]")
            dims = [int(v) for v in parts[1].split("-")]
            act = parts[2]
            loss = parts[3] if len(parts) == 4 else "ce"
            if len(dims) < 2:
                raise ValueError("mlp needs at least input and output dims")
            if act not in ("sigmoid", "relu", "none"):
                raise ValueError(f"unknown activation {act!r}")
            layers = []
            for j in range(len(dims) - 1):
                if j > 0 and act != "none":
                    layers.append(Layer(act))
                layers.append(Layer("dense", (dims[j], dims[j + 1])))
            return ModelSpec(tuple(layers), (dims[0],), dims[-1], loss, text)
        if family == "cnn":
            if len(parts) not in (2, 3):
                raise ValueError("expected cnn:CxHxW-F-N[:kernel]")
            shape_s, filters_s, classes_s = parts[1].split("-")
            shape = _parse_shape(shape_s)
            kernel = int(parts[2]) if len(parts) == 3 else 5
            filters, classes = int(filters_s), int(classes_s)
            c, h, w = shape
            flat = filters * ((h - kernel + 1) // 2) * ((w - kernel + 1) // 2)
            layers = (
                Layer("conv2d", (c, filters, kernel)),
                Layer("relu"),
                Layer("maxpool2x2"),
                Layer("flatten"),
                Layer("dense", (flat, classes)),
            )
            return ModelSpec(layers, shape, classes, "ce", text)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad model descriptor {descriptor!r}: {exc}") from exc
    raise ConfigError(f"bad model descriptor {descriptor!r}: unknown family {parts[0]!r}")


def describe(spec: ModelSpec) -> str:
    if spec.descriptor:
        return spec.descriptor
    kinds = [layer.kind for layer in spec.layers]
    if set(kinds) <= {"dense", "relu", "sigmoid"} and len(spec.input_shape) == 1:
        dims = [spec.input_shape[0]] + [layer.dims[1] for layer in spec.layers if layer.kind == "dense"]
        acts = [k for k in kinds if k != "dense"]
        act = acts[0] if acts else "none"
        desc = f"mlp:{'-'.join(map(str, dims))}:{act}"
        return desc if spec.loss == "ce" else f"{desc}:{spec.loss}"
    raise ConfigError("model has no one-line descriptor")


def init_params(spec: ModelSpec, seed: int) -> ParamSet:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for name, shape in spec.param_shapes():
        if name.endswith(".bias"):
            layers.append((name, np.zeros(shape)))
            continue
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:
            cout, cin, kh, kw = shape
            fan_in, fan_out = cin * kh * kw, cout * kh * kw
        a = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((name, rng.uniform(-a, a, size=shape)))
    return ParamSet(layers)


def check_params(spec: ModelSpec, params: ParamSet) -> None:
    expected = spec.param_shapes()
    if len(expected) != len(params):
        raise ShapeError(f"model expects {len(expected)} parameter tensors, got {len(params)}")
    for (name, shape), (got_name, value) in zip(expected, params.layers):
        if value.shape != shape:
            raise ShapeError(f"expected shape {shape}, got {value.shape}", layer=got_name)


def check_input(spec: ModelSpec, x_shape: Sequence[int]) -> None:
    if tuple(x_shape[1:]) != tuple(spec.input_shape) or len(x_shape) < 2 or x_shape[0] < 1:
        raise ShapeError(f"expected (b, {', '.join(map(str, spec.input_shape))}), got {tuple(x_shape)}", layer="input")


def forward(spec: ModelSpec, weights: Sequence[torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Logits for a batch; ``weights`` follow ``spec.param_shapes()`` order."""
    h = x
    it = iter(weights)
    for layer in spec.layers:
        kind = layer.kind
        if kind == "dense":
            h = F.linear(h, next(it), next(it))
        elif kind == "conv2d":
            h = F.conv2d(h, next(it), next(it))
        elif kind == "relu":
            h = torch.relu(h)
        elif kind == "sigmoid":
            h = torch.sigmoid(h)
        elif kind == "maxpool2x2":
            h = F.max_pool2d(h, 2)
        else:
            h = h.reshape(h.shape[0], -1)
    return h


def predict(spec: ModelSpec, params: ParamSet, x) -> np.ndarray:
    """Logits (b x N) as a float64 array."""
    x = np.asarray(x, dtype=np.float64)
    check_input(spec, x.shape)
    check_params(spec, params)
    with torch.no_grad():
        weights = [torch.from_numpy(a) for a in params.arrays()]
        return forward(spec, weights, torch.from_numpy(x)).numpy().copy()


def sgd_step(params: ParamSet, gradient, lr: float) -> ParamSet:
    """Plain SGD update ``w - lr * g``."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != (params.total_dim,):
        raise DimensionError(f"gradient has shape {gradient.shape}, expected ({params.total_dim},)")
    return params.unflatten(params.flatten() - lr * gradient)
