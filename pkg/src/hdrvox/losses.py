"""Saturation mask, reconstruction / TV / CRF-smoothness losses and their gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import SIGMA, VoxelGrid
from .tonemap import tonemap_batch


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class LossWeights:
    lambda_tv_sigma: float = 5e-4
    lambda_tv_sh: float = 1e-2
    lambda_smooth: float = 1e-3
    tv_epsilon: float = 1e-6
    mask_low: float = 0.15
    mask_high: float = 0.9

    def __post_init__(self):
        if min(self.lambda_tv_sigma, self.lambda_tv_sh, self.lambda_smooth, self.tv_epsilon) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.mask_low < self.mask_high < 1:
            raise ValueError("need 0 < mask_low < mask_high < 1")


def saturation_mask(x, low=0.15, high=0.9, mirrored=True):
    """Leaky weight in [0, 1] for LDR values near 0 or 1.

    The upper branch is the mirror image of the lower one, which is
    continuous at ``high``.  ``mirrored=False`` gives ((2 - x) / (2 (1 - high)))^2,
    which jumps at ``high``; it is kept only for comparison.
    """
    x = np.asarray(x, dtype=np.float64)
    lower = ((x + low) / (2.0 * low)) ** 2
    if mirrored:
        upper = (((1.0 - x) + (1.0 - high)) / (2.0 * (1.0 - high))) ** 2
    else:
        upper = ((2.0 - x) / (2.0 * (1.0 - high))) ** 2
    out = np.where(x < low, lower, np.where(x > high, upper, 1.0))
    return float(out) if out.ndim == 0 else out


def pixel_mask(ldr, low=0.15, high=0.9) -> np.ndarray:
    """Per-pixel weight: product of the channel masks of (..., 3) LDR values."""
    return np.prod(saturation_mask(np.clip(ldr, 0.0, 1.0), low, high), axis=-1)


def masked_sse(observed, predicted, mask):
    """Mean over rays of mask * ||observed - predicted||^2, and its gradient."""
    observed = np.asarray(observed, dtype=np.float64)
    if len(observed) == 0:
        raise ValueError("empty ray batch")
    resid = np.asarray(predicted, dtype=np.float64) - observed
    m = np.asarray(mask, dtype=np.float64)
    n = len(observed)
    loss = float(np.sum(m * np.sum(resid * resid, axis=-1)) / n)
    grad = (2.0 / n) * m[:, None] * resid
    return loss, grad


def recon_loss(observed, rendered, views, params_list, low=0.15, high=0.9) -> float:
    """Masked reconstruction loss of a ray batch; ``views`` tags each ray."""
    views = np.asarray(views, dtype=np.int64)
    if len(views) == 0:
        raise ValueError("empty ray batch")
    wb = np.stack([p.wb for p in params_list])[views]
    crf = np.stack([p.crf for p in params_list])
    alpha = params_list[0].alpha
    pred, _ = tonemap_batch(rendered, wb, crf, views, alpha)
    return masked_sse(observed, pred, pixel_mask(observed, low, high))[0]


def _tv_volume(grid: VoxelGrid, cols) -> np.ndarray:
    nx, ny, nz = grid.resolution
    vals = grid.data[:, cols].astype(np.float64) * grid.occupancy[:, None]
    return vals.reshape(nz + 1, ny + 1, nx + 1, len(cols))


def _tv_columns(channels: str):
    if channels == "sigma":
        return [SIGMA]
    if channels == "sh":
        return list(range(27))
    raise ValueError(f"channels must be 'sigma' or 'sh', got {channels!r}")


def tv_loss(grid: VoxelGrid, channels: str = "sigma", eps: float = 1e-6, with_grad=False):
    """Mean over vertices of sum_d sqrt(dx^2 + dy^2 + dz^2 + eps) with forward differences.

    Vertices on the +axis boundary contribute a zero difference on that axis.
    With ``with_grad`` also returns a (V, 28) gradient array.
    """
    cols = _tv_columns(channels)
    vol = _tv_volume(grid, cols)
    # volume axes are (z, y, x)
    dx = np.zeros_like(vol)
    dy = np.zeros_like(vol)
    dz = np.zeros_like(vol)
    dx[:, :, :-1] = vol[:, :, 1:] - vol[:, :, :-1]
    dy[:, :-1] = vol[:, 1:] - vol[:, :-1]
    dz[:-1] = vol[1:] - vol[:-1]
    s = np.sqrt(dx * dx + dy * dy + dz * dz + eps)
    nv = grid.num_vertices
    # summing deviations from sqrt(eps) keeps the constant-grid value exact
    base = math.sqrt(eps)
    loss = math.fsum(base + (s - base).reshape(nv, -1).sum(axis=0) / nv)
    if not with_grad:
        return loss
    gx, gy, gz = dx / s, dy / s, dz / s
    g = -(gx + gy + gz)
    g[:, :, 1:] += gx[:, :, :-1]
    g[:, 1:] += gy[:, :-1]
    g[1:] += gz[:-1]
    grad = np.zeros(grid.data.shape)
    grad[:, cols] = g.reshape(nv, len(cols)) / nv
    grad *= grid.occupancy[:, None]
    return loss, grad


def smooth_loss(crf_tables, with_grad=False):
    """Sum of squared second differences over interior knots of every table."""
    t = np.asarray(crf_tables, dtype=np.float64)
    if t.shape[-1] < 3:
        raise ValueError("CRF tables need at least 3 knots")
    d2 = t[..., 2:] - 2.0 * t[..., 1:-1] + t[..., :-2]
    loss = float(np.sum(d2 * d2))
    if not with_grad:
        return loss
    g = np.zeros_like(t)
    g[..., 2:] += 2.0 * d2
    g[..., 1:-1] -= 4.0 * d2
    g[..., :-2] += 2.0 * d2
    return loss, g


def total_loss(recon, tv_sigma, tv_sh, smooth, weights: LossWeights) -> float:
    parts = {"recon": recon, "tv_sigma": tv_sigma, "tv_sh": tv_sh, "smooth": smooth}
    for name, val in parts.items():
        if not math.isfinite(val):
            raise NonFiniteLossError(f"non-finite loss component {name!r}: {val}")
    return (recon + weights.lambda_tv_sigma * tv_sigma + weights.lambda_tv_sh * tv_sh
            + weights.lambda_smooth * smooth)
