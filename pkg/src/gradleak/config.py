"""Experiment files: ``[section]`` headers with ``key = value`` lines."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attack import AttackConfig
from .data_io import Dataset, load_mnist_idx, synth_dataset
from .errors import ConfigError
from .fl_sim import ClientData, FederationConfig
from .models import ModelSpec, parse_model

SCHEMA = {
    "federation": {
        "clients": int, "client_fraction": float, "rounds": int, "batch_size": int, "lr": float,
        "client_weights": "floats", "dp_sigma": float, "sparsify_p": float, "defense_order": str, "seed": int,
    },
    "model": {"descriptor": str, "init_seed": int},
    "data": {
        "source": str, "images": "path", "labels": "path", "samples_per_client": int,
        "num_classes": int, "shape": str, "seed": int, "noise": float,
    },
    "attack": {
        "T": int, "R_g": int, "R_l": int, "optimizer": str, "lr": float, "aggregator": str, "loss": str,
        "layer_weighting": str, "tv_weight": float, "alpha": "floats", "seed": int, "label_steps": int,
        "cos_threshold": float,
    },
    "output": {"run_id": str, "dataset": str, "csv": "path"},
}


def _convert(kind, raw: str, base: Path):
    if kind == "floats":
        return [float(v) for v in raw.replace(",", " ").split()]
    if kind == "path":
        p = Path(raw).expanduser()
        return p if p.is_absolute() else (base / p).resolve()
    return kind(raw)


@dataclass
class ExperimentConfig:
    path: Optional[Path]
    sections: dict = field(default_factory=dict)

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    @property
    def seed(self) -> int:
        return int(self.get("federation", "seed", 0))

    def model(self) -> ModelSpec:
        desc = self.get("model", "descriptor")
        if desc is None:
            raise ConfigError("[model] descriptor is required")
        return parse_model(desc)

    def federation(self) -> FederationConfig:
        fed = dict(self.sections.get("federation", {}))
        if "client_weights" in fed:
            fed["client_weights"] = list(fed["client_weights"])
        init_seed = self.get("model", "init_seed")
        return FederationConfig(**fed, init_seed=init_seed)

    def attack(self, **overrides) -> AttackConfig:
        att = dict(self.sections.get("attack", {}))
        att.pop("cos_threshold", None)
        att.setdefault("seed", self.seed)
        att["batch_size"] = self.federation().batch_size
        att.update(overrides)
        return AttackConfig(**att)

    @property
    def cos_threshold(self) -> float:
        return float(self.get("attack", "cos_threshold", 0.5))

    def dataset(self, spec: ModelSpec) -> Dataset:
        fed = self.federation()
        source = self.get("data", "source", "synth")
        per_client = int(self.get("data", "samples_per_client", fed.batch_size))
        n = per_client * fed.clients
        if source == "mnist":
            images, labels = self.get("data", "images"), self.get("data", "labels")
            if images is None or labels is None:
                raise ConfigError("[data] source = mnist needs images and labels paths")
            ds = load_mnist_idx(images, labels)
            if len(ds) < n:
                raise ConfigError(f"MNIST file has {len(ds)} samples, need {n}")
            return ds.subset(np.arange(n))
        if source != "synth":
            raise ConfigError(f"unknown data source {source!r}")
        shape_text = self.get("data", "shape")
        shape = tuple(int(v) for v in shape_text.split("x")) if shape_text else spec.image_shape()
        classes = int(self.get("data", "num_classes", spec.num_classes))
        return synth_dataset(max(n, classes), shape, classes, int(self.get("data", "seed", self.seed)),
                             noise=float(self.get("data", "noise", 0.1))).subset(np.arange(n))

    def client_data(self, spec: ModelSpec) -> list[ClientData]:
        fed = self.federation()
        ds = self.dataset(spec)
        per_client = len(ds) // fed.clients
        out = []
        for k in range(fed.clients):
            part = ds.subset(np.arange(k * per_client, (k + 1) * per_client))
            out.append(ClientData(part.images.reshape((len(part),) + tuple(spec.input_shape)), part.labels))
        return out


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep T / R_g case
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_sections({s: dict(parser.items(s)) for s in parser.sections()}, path.parent.resolve(), path)


def parse_sections(raw: dict, base: Path = Path("."), path=None) -> ExperimentConfig:
    sections = {}
    for name, items in raw.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        schema = SCHEMA[name]
        values = {}
        for key, text in items.items():
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            try:
                values[key] = _convert(schema[key], text.strip(), base)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from None
        sections[name] = values
    return ExperimentConfig(path, sections)
