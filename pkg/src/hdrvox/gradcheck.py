"""Finite-difference check of every trainable parameter group.

Builds a tiny random problem (8^3 grid, 4 views of 8x8 pixels, fp64) and
compares the analytic gradients of the full training objective against
central differences.  Parameters are drawn away from the non-smooth
points of the model (negative radiance, zero density, early ray
termination) so that central differences are meaningful.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, DatasetManifest, LoadedView, ViewEntry
from .field import SIGMA, init_grid
from .render import Camera, look_at
from .tonemap import NUM_KNOTS, ToneMapParams
from .trainer import TrainConfig, Trainer

GROUPS = ("sigma", "sh", "wb", "crf")


@dataclass
class GroupResult:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple
    passed: bool


def tiny_problem(seed=0, res=8, n_views=4, size=8):
    """Random grid, cameras, LDR targets and tone parameters."""
    rng = np.random.default_rng(seed)
    bounds = (np.full(3, -1.0), np.full(3, 1.0))
    grid = init_grid((res,) * 3, bounds, np.float64)
    grid.data[:, :27] = rng.normal(0.0, 0.08, (grid.num_vertices, 27))
    grid.data[:, SIGMA] = rng.uniform(0.2, 1.5, grid.num_vertices)
    views, entries = [], []
    focal = 0.5 * size / np.tan(np.radians(20.0))
    for i in range(n_views):
        az = np.radians(-25.0 + 50.0 * i / max(n_views - 1, 1))
        eye = 3.0 * np.array([np.sin(az), 0.2, -np.cos(az)])
        cam = Camera(focal, focal, size / 2, size / 2, size, size, look_at(eye, np.zeros(3)))
        ldr = rng.uniform(0.05, 0.95, (size, size, 3))
        vid = f"g{i}"
        views.append(LoadedView(vid, cam, "train", ldr, np.ones((size, size), bool)))
        entries.append(ViewEntry(vid, f"{vid}.png", cam))
    dataset = Dataset(DatasetManifest(bounds, entries), views, None)
    tone = []
    for _ in range(n_views):
        steps = rng.uniform(0.5, 1.5, (3, NUM_KNOTS - 1))
        crf = np.concatenate([np.zeros((3, 1)), np.cumsum(steps, axis=1)], axis=1)
        crf /= crf[:, -1:]
        tone.append(ToneMapParams(wb=rng.uniform(0.6, 1.6, 3), crf=crf))
    return dataset, grid, tone


def _pick(rng, shape, n, valid=None):
    flat = np.arange(int(np.prod(shape)))
    if valid is not None:
        flat = flat[valid.reshape(-1)]
    chosen = rng.choice(flat, size=min(n, len(flat)), replace=False)
    return [np.unravel_index(i, shape) for i in chosen]


def run_gradcheck(seed=0, samples=24, h=1e-6, tol=1e-4, sigma_sign=1.0) -> list:
    """Returns one GroupResult per parameter group."""
    dataset, grid, tone = tiny_problem(seed)
    cfg = TrainConfig(epochs=1, iters_per_epoch=1, rays_per_batch=1, dtype="float64",
                      resolution_ladder=[(0, grid.resolution)], tv_epochs=1,
                      stop_thresh=0.0)
    trainer = Trainer(dataset, cfg, grid=grid, tone=tone, reference=0)
    trainer.sigma_sign = sigma_sign
    idx = np.arange(len(trainer.rays.view))

    def total():
        return trainer.compute_gradients(idx)[0]["total"]

    _, g_wb, g_crf = trainer.compute_gradients(idx)
    g_grid = trainer.grad_grid.copy()
    rng = np.random.default_rng(seed + 1)
    interior = np.zeros(trainer.crf.shape, bool)
    interior[..., 1:-1] = True
    targets = {
        "sigma": (trainer.grid.data, g_grid,
                  [(v, SIGMA) for v in rng.choice(trainer.grid.num_vertices, samples, False)]),
        "sh": (trainer.grid.data, g_grid,
               [(v, c) for v, c in zip(rng.choice(trainer.grid.num_vertices, samples, False),
                                       rng.integers(0, 27, samples))]),
        "wb": (trainer.wb, g_wb, _pick(rng, trainer.wb.shape, samples)),
        "crf": (trainer.crf, g_crf, _pick(rng, trainer.crf.shape, samples, interior)),
    }
    results = []
    for name in GROUPS:
        arr, grad, picks = targets[name]
        worst, worst_at = 0.0, ()
        for at in picks:
            at = tuple(int(i) for i in at)
            keep = arr[at]
            arr[at] = keep + h
            fp = total()
            arr[at] = keep - h
            fm = total()
            arr[at] = keep
            numeric = (fp - fm) / (2 * h)
            analytic = float(grad[at])
            scale = max(abs(numeric), abs(analytic), 1e-6)
            err = abs(numeric - analytic) / scale
            if err > worst:
                worst, worst_at = err, at
        results.append(GroupResult(name, len(picks), worst, worst_at, worst < tol))
    return results


def format_table(results) -> str:
    lines = [f"{'group':<8}{'checked':>9}{'max rel err':>14}  status"]
    for r in results:
        lines.append(f"{r.name:<8}{r.checked:>9}{r.max_rel_error:>14.3e}  "
                     f"{'pass' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def main_check(seed=0, sigma_sign=1.0):
    t0 = time.time()
    results = run_gradcheck(seed, sigma_sign=sigma_sign)
    return results, time.time() - t0
