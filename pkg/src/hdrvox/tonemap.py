"""Per-view white balance followed by a leaky piecewise-linear CRF."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

NUM_KNOTS = 256
DEFAULT_ALPHA = 0.01
WB_FLOOR = 1e-6


def init_crf_identity() -> np.ndarray:
    return np.linspace(0.0, 1.0, NUM_KNOTS)


@dataclass
class ToneMapParams:
    wb: np.ndarray = field(default_factory=lambda: np.ones(3))
    crf: np.ndarray = field(default_factory=lambda: np.tile(init_crf_identity(), (3, 1)))
    alpha: float = DEFAULT_ALPHA
    frozen: bool = False

    def __post_init__(self):
        self.wb = np.asarray(self.wb, dtype=np.float64).reshape(3)
        self.crf = np.asarray(self.crf, dtype=np.float64).reshape(3, NUM_KNOTS)
        if np.any(self.wb <= 0):
            raise ValueError("white balance gains must be positive")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not np.all(np.isfinite(self.crf)):
            raise ValueError("CRF values must be finite")

    def copy(self) -> "ToneMapParams":
        return ToneMapParams(self.wb.copy(), self.crf.copy(), self.alpha, self.frozen)


def apply_white_balance(c_h, wb) -> np.ndarray:
    wb = np.asarray(wb, dtype=np.float64)
    if np.any(wb <= 0):
        raise ValueError("white balance gains must be positive")
    return np.asarray(c_h, dtype=np.float64) * wb


def _crf_parts(x, tables, rows, alpha):
    """Value, slope, knot index and upper weight of the leaky CRF.

    ``tables`` is (K, 256) and ``rows`` selects a table for every entry of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    u = np.clip(x, 0.0, 1.0) * (NUM_KNOTS - 1)
    k = np.minimum(np.floor(u).astype(np.int64), NUM_KNOTS - 2)
    f = u - k
    lo = tables[rows, k]
    hi = tables[rows, k + 1]
    val = lo + f * (hi - lo)
    slope = (hi - lo) * (NUM_KNOTS - 1)
    below = x < 0.0
    above = x > 1.0
    val = np.where(below, alpha * x, val)
    slope = np.where(below, alpha, slope)
    safe = np.where(above, x, 1.0)
    val = np.where(above, -alpha / np.sqrt(safe) + alpha + 1.0, val)
    slope = np.where(above, 0.5 * alpha * safe ** -1.5, slope)
    inside = ~(below | above)
    return val, slope, k, f, inside


def eval_crf(x, crf_channel, alpha: float = DEFAULT_ALPHA):
    """alpha x below 0, table interpolation on [0, 1], -alpha/sqrt(x) + alpha + 1 above 1."""
    table = np.asarray(crf_channel, dtype=np.float64).reshape(1, NUM_KNOTS)
    x = np.asarray(x, dtype=np.float64)
    val = _crf_parts(x, table, np.zeros(x.shape, dtype=np.int64), alpha)[0]
    return float(val) if val.ndim == 0 else val


def tonemap_batch(i_h, wb, crf, crf_rows, alpha=DEFAULT_ALPHA):
    """Tone-map (M, 3) radiance with per-row gains ``wb`` (M, 3).

    ``crf`` is (K, 3, 256); ``crf_rows`` (M,) picks the table set per row.
    Returns (I_l, cache) with the cache consumed by ``tonemap_batch_backward``.
    """
    i_h = np.asarray(i_h, dtype=np.float64)
    i_w = i_h * wb
    tables = crf.reshape(-1, NUM_KNOTS)
    rows = crf_rows[:, None] * 3 + np.arange(3)[None, :]
    val, slope, k, f, inside = _crf_parts(i_w, tables, rows, alpha)
    return val, (i_h, wb, slope, k, f, inside, rows, crf.shape)


def tonemap_batch_backward(cache, upstream):
    """Gradients w.r.t. radiance (M, 3), per-row gains (M, 3) and the tables."""
    i_h, wb, slope, k, f, inside, rows, crf_shape = cache
    g = np.asarray(upstream, dtype=np.float64)
    d_iw = g * slope
    d_ih = d_iw * wb
    d_wb = d_iw * i_h
    n_tables = crf_shape[0] * 3
    g_in = np.where(inside, g, 0.0)
    flat_lo = (rows * NUM_KNOTS + k)[inside]
    d_crf = np.bincount(flat_lo, weights=(g_in * (1.0 - f))[inside],
                        minlength=n_tables * NUM_KNOTS)
    d_crf += np.bincount(flat_lo + 1, weights=(g_in * f)[inside],
                         minlength=n_tables * NUM_KNOTS)
    return d_ih, d_wb, d_crf.reshape(crf_shape)


def tonemap(i_h, params: ToneMapParams) -> np.ndarray:
    """I_l = g(w(I_h)) for (3,) or (..., 3) radiance."""
    arr = np.asarray(i_h, dtype=np.float64)
    flat = arr.reshape(-1, 3)
    out, _ = tonemap_batch(flat, params.wb[None, :], params.crf[None], np.zeros(len(flat), np.int64),
                           params.alpha)
    return out.reshape(arr.shape)


def tonemap_backward(i_h, params: ToneMapParams, upstream):
    """Returns (d I_h, d wb (3,), d crf (3, 256)) for the sum <upstream, I_l>."""
    arr = np.asarray(i_h, dtype=np.float64)
    flat = arr.reshape(-1, 3)
    _, cache = tonemap_batch(flat, params.wb[None, :], params.crf[None],
                             np.zeros(len(flat), np.int64), params.alpha)
    d_ih, d_wb, d_crf = tonemap_batch_backward(cache, np.asarray(upstream).reshape(-1, 3))
    return d_ih.reshape(arr.shape), d_wb.sum(axis=0), d_crf[0]


def edit_render(params: ToneMapParams, wb_override=None, exposure_scale=None,
                crf_override=None) -> ToneMapParams:
    """Copy of ``params`` with white balance / exposure / CRF replaced.

    Exposure is a global scale on the white balance gains.
    """
    wb = params.wb.copy() if wb_override is None else np.asarray(wb_override, dtype=np.float64)
    if np.any(wb <= 0):
        raise ValueError("white balance override must be positive")
    if exposure_scale is not None:
        if exposure_scale <= 0:
            raise ValueError("exposure scale must be positive")
        wb = wb * exposure_scale
    crf = params.crf.copy() if crf_override is None else np.array(crf_override, dtype=np.float64)
    return replace(params, wb=wb, crf=crf.reshape(3, NUM_KNOTS))


def project_params(params: ToneMapParams) -> None:
    """Re-impose the hard constraints after an optimizer step."""
    np.maximum(params.wb, WB_FLOOR, out=params.wb)
    params.crf[:, 0] = 0.0
    params.crf[:, -1] = 1.0


def monotonicity_report(params_list) -> list:
    """Per view and channel, the number of decreasing knot intervals."""
    return [[int(np.sum(np.diff(p.crf[c]) < 0)) for c in range(3)] for p in params_list]


def export_crf_csv(path, params_list, view_ids=None) -> None:
    view_ids = range(len(params_list)) if view_ids is None else view_ids
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["view", "channel", "knot", "x", "value"])
        for vid, p in zip(view_ids, params_list):
            for c, name in enumerate("rgb"):
                for k in range(NUM_KNOTS):
                    w.writerow([vid, name, k, f"{k / (NUM_KNOTS - 1):.6f}", f"{p.crf[c, k]:.9g}"])
