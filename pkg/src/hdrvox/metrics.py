"""Evaluation metrics: masked PSNR, scale-aligned HDR PSNR, CRF RMSE, wb error."""
from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def half_masks(height: int, width: int):
    """(left, right) boolean masks; on odd widths the center column is in neither."""
    cols = np.arange(width)
    if width % 2:
        mid = width // 2
        left, right = cols < mid, cols > mid
    else:
        left, right = cols < width // 2, cols >= width // 2
    return (np.broadcast_to(left, (height, width)).copy(),
            np.broadcast_to(right, (height, width)).copy())


def masked_psnr(pred, gt, mask=None) -> float:
    """-10 log10(MSE) over masked pixels (all channels); capped at 99 dB."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(gt.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask selects no pixels")
    mse = float(np.mean((pred[mask] - gt[mask]) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def scale_aligned_psnr(pred_hdr, gt_hdr, mask=None):
    """PSNR after a per-channel least-squares scale on ``pred``.

    Both images are divided by the 99th percentile of the masked ground
    truth before the PSNR.  Returns (psnr, scales).
    """
    pred = np.asarray(pred_hdr, dtype=np.float64)
    gt = np.asarray(gt_hdr, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = np.ones(gt.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    p, g = pred[mask], gt[mask]
    if len(g) == 0 or not np.any(g > 0):
        raise ValueError("need at least one masked pixel with positive ground truth")
    denom = np.sum(p * p, axis=0)
    if np.any(denom <= 0):
        raise ValueError("prediction is identically zero on a channel")
    scales = np.sum(p * g, axis=0) / denom
    norm = float(np.percentile(g, 99))
    if norm <= 0:
        norm = float(g.max())
    return masked_psnr(p * scales / norm, g / norm), scales


def crf_rmse(curve_a, curve_b) -> float:
    a = np.asarray(curve_a, dtype=np.float64)
    b = np.asarray(curve_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("curves must have the same knot count")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def resample_curve(curve, n=256) -> np.ndarray:
    curve = np.asarray(curve, dtype=np.float64)
    return np.interp(np.linspace(0, 1, n), np.linspace(0, 1, len(curve)), curve)


def wb_relative_error(wb_trained, wb_gt, ref: int) -> np.ndarray:
    """|a/a_ref - b/b_ref| / (b/b_ref) per view and channel."""
    a = np.asarray(wb_trained, dtype=np.float64)
    b = np.asarray(wb_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"view count mismatch: {a.shape} vs {b.shape}")
    an = a / a[ref]
    bn = b / b[ref]
    return np.abs(an - bn) / bn
