"""Reconstruction quality: MSE, PSNR, SSIM and batch-order matching."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

PSNR_CSV_CAP = 99.0
SSIM_WINDOW = 8


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(mse_value: float, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for a perfect match."""
    if mse_value < 0:
        raise ValueError("mse must be non-negative")
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse_value)


def psnr_for_csv(value: float) -> float:
    return min(value, PSNR_CSV_CAP)


def _as_channels(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return img
    raise ShapeError(f"expected (H, W) or (C, H, W) image, got shape {img.shape}")


def ssim(a, b, max_value: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over all ``window x window`` patches (stride 1), averaged over channels.

    Uses a uniform window and population (biased) patch statistics.
    """
    a = _as_channels(np.asarray(a, dtype=np.float64))
    b = _as_channels(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.shape[1] < window or a.shape[2] < window:
        raise ShapeError(f"image {a.shape[1:]} is smaller than the {window}x{window} window")
    c1 = (0.01 * max_value) ** 2
    c2 = (0.03 * max_value) ** 2
    pa = sliding_window_view(a, (window, window), axis=(1, 2))
    pb = sliding_window_view(b, (window, window), axis=(1, 2))
    mu_a = pa.mean(axis=(-1, -2))
    mu_b = pb.mean(axis=(-1, -2))
    var_a = (pa * pa).mean(axis=(-1, -2)) - mu_a ** 2
    var_b = (pb * pb).mean(axis=(-1, -2)) - mu_b ** 2
    cov = (pa * pb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    per_channel = (num / den).mean(axis=(1, 2))
    return float(per_channel.mean())


@dataclass
class MetricReport:
    mse: list[float]
    psnr: list[float]
    ssim: list[float]
    permutation: list[int]  # permutation[i] = reconstruction index paired with truth i

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([psnr_for_csv(v) for v in self.psnr]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))


def greedy_assignment(cost: np.ndarray) -> list[int]:
    """Repeatedly pair the globally cheapest unmatched (recon, truth) cell.

    Returns ``perm`` with ``perm[truth] = recon``.
    """
    cost = np.array(cost, dtype=np.float64)
    b = cost.shape[0]
    perm = [-1] * b
    for _ in range(b):
        r, t = np.unravel_index(int(np.argmin(cost)), cost.shape)
        perm[t] = int(r)
        cost[r, :] = np.inf
        cost[:, t] = np.inf
    return perm


def match_batch(recon, truth, image_shape=None) -> MetricReport:
    """Pair reconstructions with ground-truth images greedily by MSE and score the pairs."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ShapeError(f"batch shapes differ: {recon.shape} vs {truth.shape}")
    b = recon.shape[0]
    flat_r = recon.reshape(b, -1)
    flat_t = truth.reshape(b, -1)
    cost = ((flat_r[:, None, :] - flat_t[None, :, :]) ** 2).mean(axis=-1)
    perm = greedy_assignment(cost)
    shape = image_shape if image_shape is not None else recon.shape[1:]
    mses, psnrs, ssims = [], [], []
    for t in range(b):
        r_img = flat_r[perm[t]].reshape(shape)
        t_img = flat_t[t].reshape(shape)
        m = mse(r_img, t_img)
        mses.append(m)
        psnrs.append(psnr(m))
        ssims.append(ssim(r_img, t_img))
    return MetricReport(mses, psnrs, ssims, perm)
