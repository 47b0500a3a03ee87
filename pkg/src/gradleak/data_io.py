"""Datasets, gradient logs, images and metric CSVs on disk."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError
from .fl_sim import GradObservation, evaluation_batch_tag
from .models import ModelSpec, parse_model

LOG_MAGIC = b"TGLOG1"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CSV_COLUMNS = (
    "run_id", "method", "dataset", "model", "batch_size", "T", "aggregator",
    "dp_sigma", "sparsify_p", "seed", "mse", "psnr_db", "ssim", "wall_time_s",
)


@dataclass
class Dataset:
    images: np.ndarray  # n x C x H x W, values in [0, 1]
    labels: np.ndarray  # n ints
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be n x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ShapeError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# -- IDX ---------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 + 4 * ndim:
        raise FormatError("truncated IDX header", path=path, offset=len(raw))
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise FormatError(f"bad IDX magic 0x{got:08x}, expected 0x{magic:08x}", path=path, offset=0)
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    start = 4 + 4 * ndim
    need = int(np.prod(dims))
    body = raw[start:]
    if len(body) < need:
        raise FormatError(f"truncated IDX body: need {need} bytes, have {len(body)}", path=path, offset=len(raw))
    if len(body) > need:
        raise FormatError(f"{len(body) - need} trailing bytes after IDX body", path=path, offset=start + need)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels", path=labels_path)
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    y = labels.astype(np.int64)
    num_classes = max(10, int(y.max()) + 1) if y.size else 10
    return Dataset(x, y, num_classes)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX format (magic chosen from its rank)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


# -- synthetic data ----------------------------------------------------------

def synth_dataset(n: int, shape: Sequence[int], num_classes: int, seed: int,
                  noise: float = 0.1, bumps: int = 3) -> Dataset:
    """Class-conditional blob images clipped to [0, 1]; labels assigned round-robin."""
    if n < num_classes:
        raise ShapeError(f"need n >= num_classes, got n={n}, N={num_classes}")
    c, h, w = (int(v) for v in shape)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    protos = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            img = np.zeros((h, w))
            for _ in range(bumps):
                cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
                sy, sx = rng.uniform(0.08, 0.2) * h, rng.uniform(0.08, 0.2) * w
                img += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 / (2 * sy ** 2) + (xx - cx) ** 2 / (2 * sx ** 2)))
            protos[k, ch] = img / img.max()
    labels = np.arange(n) % num_classes
    images = protos[labels] + rng.normal(0.0, noise, size=(n, c, h, w))
    return Dataset(np.clip(images, 0.0, 1.0), labels.astype(np.int64), num_classes)


# -- images (PGM / PPM) ------------------------------------------------------

def write_image(path, image) -> None:
    """Binary PGM (1 channel) or PPM (3 channels); values clamped to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"expected (1|3, H, W) image, got {img.shape}")
    c, h, w = img.shape
    pix = np.round(np.clip(np.nan_to_num(img, nan=0.0), 0.0, 1.0) * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = pix[0].tobytes() if c == 1 else pix.transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + body)


def read_image(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header", path=path, offset=pos)
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", path=path, offset=0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PNM header field", path=path) from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"unsupported geometry {w}x{h} maxval {maxval}", path=path)
    c = 1 if magic == b"P5" else 3
    body = raw[pos:]
    if len(body) != w * h * c:
        raise FormatError(f"raster has {len(body)} bytes, expected {w * h * c}", path=path, offset=pos)
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)
    return pix.astype(np.float64) / 255.0


# -- gradient logs -----------------------------------------------------------

def write_log(path, observations: Sequence[GradObservation], spec: ModelSpec) -> None:
    """TGLOG1: magic, descriptor line, p and record count (u32), then records.

    Each record is round, client, batch_tag (u32) followed by the weights and
    the gradient as little-endian float32.
    """
    descriptor = str(spec)
    if "\n" in descriptor:
        raise FormatError("model descriptor must be a single line")
    p = spec.num_params
    chunks = [LOG_MAGIC, descriptor.encode("ascii") + b"\n", struct.pack("<II", p, len(observations))]
    for obs in observations:
        if obs.weights.shape != (p,) or obs.gradient.shape != (p,):
            raise FormatError(f"observation (round {obs.round}) does not have {p} parameters")
        chunks.append(struct.pack("<III", obs.round, obs.client, evaluation_batch_tag(obs) & 0xFFFFFFFF))
        chunks.append(obs.weights.astype("<f4").tobytes())
        chunks.append(obs.gradient.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_log(path) -> tuple[ModelSpec, list[GradObservation]]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:6] != LOG_MAGIC:
        raise FormatError(f"bad magic {raw[:6]!r}", path=path, offset=0)
    end = raw.find(b"\n", 6)
    if end < 0:
        raise FormatError("unterminated model descriptor", path=path, offset=6)
    try:
        spec = parse_model(raw[6:end].decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"bad model descriptor: {exc}", path=path, offset=6) from None
    pos = end + 1
    if len(raw) < pos + 8:
        raise FormatError("truncated header", path=path, offset=len(raw))
    p, count = struct.unpack_from("<II", raw, pos)
    pos += 8
    if p != spec.num_params:
        raise FormatError(f"header says p={p} but {spec} has {spec.num_params} parameters", path=path, offset=pos - 8)
    rec_size = 12 + 8 * p
    observations = []
    for i in range(count):
        if len(raw) < pos + rec_size:
            raise FormatError(f"unexpected EOF at record {i}", path=path, offset=len(raw))
        rnd, client, tag = struct.unpack_from("<III", raw, pos)
        w = np.frombuffer(raw, dtype="<f4", count=p, offset=pos + 12).astype(np.float64)
        g = np.frombuffer(raw, dtype="<f4", count=p, offset=pos + 12 + 4 * p).astype(np.float64)
        observations.append(GradObservation(rnd, client, w, g, tag))
        pos += rec_size
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after {count} records", path=path, offset=pos)
    return spec, observations


# -- metric CSVs -------------------------------------------------------------

def write_metrics_csv(path, rows: Iterable[dict], append: bool = True) -> None:
    path = Path(path)
    new = not (append and path.exists() and path.stat().st_size > 0)
    with path.open("w" if new else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            writer.writeheader()
        for row in rows:
            extra = set(row) - set(CSV_COLUMNS)
            if extra:
                raise FormatError(f"unknown CSV columns {sorted(extra)}", path=path)
            writer.writerow({k: _fmt(row.get(k, "")) for k in CSV_COLUMNS})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def read_metrics_csv(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise FormatError(f"unexpected CSV header {reader.fieldnames}", path=path)
        rows = []
        for i, row in enumerate(reader):
            if None in row or any(v is None for v in row.values()):
                raise FormatError(f"row {i} has the wrong number of fields", path=path)
            rows.append(row)
    return rows
