"""Joint optimization of the voxel field and the per-view tone-mapping parameters."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import kernels
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Dataset
from .field import SH_BAND, SH_DIM, SIGMA, VoxelGrid, init_grid, prune, sample_field, upsample
from .imageio import quantize_ldr
from .losses import LossWeights, masked_sse, pixel_mask, smooth_loss, total_loss, tv_loss
from .metrics import half_masks, masked_psnr
from .render import camera_rays, default_step, render_hdr
from .tonemap import ToneMapParams, project_params, tonemap, tonemap_batch, tonemap_batch_backward

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training aborted: loss blew up or a gradient went non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 10
    iters_per_epoch: int = 2000
    rays_per_batch: int = 1024
    lr_init: float = 1e-2
    lr_final: float = 5e-5
    sigma_lr_init: float = 10.0
    sigma_lr_final: float = 5e-2
    sigma_lr_delay_steps: int = 2000
    total_lr_steps: int = 20000
    wb_lr_scale: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    alpha: float = 0.01
    step_size: float | None = None  # None: half the smallest voxel edge, per level
    resolution_ladder: list = field(default_factory=lambda: [
        (0, (16, 16, 16)), (6000, (32, 32, 32)), (12000, (64, 64, 64))])
    prune_tau: float = 1e-3
    tv_epochs: int = 3
    sh_mask_epochs: int = 5
    sh_mask_bands: tuple = (1, 2)
    beta: float = 0.95
    eps: float = 1e-8
    stop_thresh: float = 1e-5
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    tonemap: bool = True
    use_mask: bool = True
    shared_crf: bool = False
    freeze_reference_crf: bool = False
    offset_mode: str = "eval"
    divergence_factor: float = 10.0
    eval_every: int = 0  # steps; 0 = once per epoch
    checkpoint_every_epochs: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.resolution_ladder = [(int(t), tuple(int(r) for r in res))
                                  for t, res in self.resolution_ladder]
        self.sh_mask_bands = tuple(int(b) for b in self.sh_mask_bands)
        if not 0 < self.lr_final <= self.lr_init:
            raise ValueError("need 0 < lr_final <= lr_init")
        if not 0 < self.sigma_lr_final <= self.sigma_lr_init:
            raise ValueError("need 0 < sigma_lr_final <= sigma_lr_init")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")
        if not self.resolution_ladder or self.resolution_ladder[0][0] != 0:
            raise ValueError("resolution ladder must start at iteration 0")
        prev_t, prev_r = -1, (0, 0, 0)
        for t, res in self.resolution_ladder:
            if t <= prev_t or any(a < b for a, b in zip(res, prev_r)):
                raise ValueError("ladder triggers must increase and resolutions not shrink")
            prev_t, prev_r = t, res
        if not 0 < self.beta < 1:
            raise ValueError("beta must be in (0, 1)")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iters_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolution_ladder"] = [[t, list(r)] for t, r in self.resolution_ladder]
        d["sh_mask_bands"] = list(self.sh_mask_bands)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


PRESETS = {
    "desk": {},
    "smoke": dict(epochs=2, iters_per_epoch=100, rays_per_batch=256, total_lr_steps=200,
                  sigma_lr_delay_steps=50, resolution_ladder=[(0, (8, 8, 8))], tv_epochs=1,
                  sh_mask_epochs=1),
    "paper": dict(epochs=10, iters_per_epoch=128000, rays_per_batch=5000, total_lr_steps=250000,
                  sigma_lr_init=30.0, sigma_lr_delay_steps=15000,
                  resolution_ladder=[(0, (128, 128, 64)), (25600, (256, 256, 128)),
                                     (51200, (512, 512, 256)), (76800, (800, 800, 512))]),
}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if key == "resolution_ladder":
        out = []
        for item in text.split(","):
            trig, res = item.split(":")
            out.append((int(trig), tuple(int(v) for v in res.lower().split("x"))))
        return out
    if key == "sh_mask_bands":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: not a boolean: {text!r}")
    if default is None or isinstance(default, float):
        return None if text.lower() == "none" else float(text)
    if isinstance(default, int):
        return int(text)
    return text


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> TrainConfig:
    """Preset, then a flat ``key = value`` file, then explicit overrides.

    Loss weights use their own names (``lambda_tv_sigma`` ...); the ladder is
    written ``0:16x16x16,6000:32x32x32``.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    base = TrainConfig(**PRESETS[preset])
    d = base.to_dict()
    weights = d.pop("weights")
    items = []
    if path is not None:
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}: expected key = value: {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            items.append((k, v))
    items += [(k, str(v)) for k, v in (overrides or {}).items()]
    defaults = {f.name: getattr(base, f.name) for f in fields(TrainConfig)}
    wdefaults = asdict(LossWeights())
    for k, v in items:
        if k in wdefaults:
            weights[k] = float(v)
        elif k in defaults and k != "weights":
            d[k] = _parse_value(k, v, defaults[k])
        elif k == "preset":
            continue
        else:
            raise ValueError(f"unknown config key {k!r}")
    d["weights"] = LossWeights(**weights)
    return TrainConfig(**d)


def lr_exponential(step, lr_init, lr_final, total_steps) -> float:
    t = min(max(step, 0), total_steps) / total_steps
    return lr_init * (lr_final / lr_init) ** t


def lr_delayed(step, lr_init, lr_final, delay_steps, total_steps) -> float:
    """Exponential decay times a sine ramp from 1% to 100% over ``delay_steps``."""
    if delay_steps > 0:
        ramp = 0.01 + 0.99 * math.sin(0.5 * math.pi * min(max(step / delay_steps, 0.0), 1.0))
    else:
        ramp = 1.0
    return lr_exponential(step, lr_init, lr_final, total_steps) * ramp


def sh_mask_rate(epoch, sh_mask_epochs=5) -> float:
    if sh_mask_epochs <= 0:
        return 0.0
    return max(0.0, 1.0 - epoch / sh_mask_epochs)


def rmsprop_step(params, grads, state, lr, beta=0.95, eps=1e-8):
    """Dense RMSProp: v <- beta v + (1 - beta) g^2; p <- p - lr g / (sqrt(v) + eps).

    Returns (new_params, new_state); raises DivergenceError on NaN gradients.
    """
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    v = beta * np.asarray(state, dtype=np.float64) + (1.0 - beta) * g * g
    step = np.zeros_like(g)
    nz = g != 0
    step[nz] = lr * g[nz] / (np.sqrt(v[nz]) + eps)
    return np.asarray(params, dtype=np.float64) - step, v


def view_means(dataset: Dataset) -> tuple:
    """Per-view channel means over trainable pixels, pixel counts, and the global mean."""
    means, counts = [], []
    for v in dataset.views:
        px = v.ldr[v.train_mask]
        if len(px) == 0:
            raise ValueError(f"view {v.id} has no trainable pixels")
        means.append(px.mean(axis=0))
        counts.append(len(px))
    means = np.array(means)
    counts = np.array(counts, dtype=np.float64)
    global_mean = (means * counts[:, None]).sum(axis=0) / counts.sum()
    return means, counts, global_mean


def init_white_balance(dataset: Dataset) -> np.ndarray:
    """wb[i, c] = mean of channel c over image i / mean of channel c over all images."""
    means, _, gmean = view_means(dataset)
    if np.any(gmean <= 0):
        raise ValueError("dataset-wide channel mean is zero")
    return means / gmean


def select_reference_view(dataset: Dataset) -> int:
    means, _, gmean = view_means(dataset)
    dist = np.linalg.norm(means - gmean, axis=1)
    # distances equal up to rounding count as ties; the lowest index wins
    return int(np.flatnonzero(dist <= dist.min() + 1e-12)[0])


@dataclass
class RayTable:
    origins: np.ndarray
    dirs: np.ndarray
    target: np.ndarray
    view: np.ndarray
    weight: np.ndarray


def build_ray_table(dataset: Dataset, use_mask=True, low=0.15, high=0.9) -> RayTable:
    o, d, t, vi = [], [], [], []
    for i, v in enumerate(dataset.views):
        ys, xs = np.nonzero(v.train_mask)
        origins, dirs = camera_rays(v.camera, np.stack([xs, ys], axis=1))
        o.append(origins)
        d.append(dirs)
        t.append(v.ldr[ys, xs])
        vi.append(np.full(len(xs), i, dtype=np.int64))
    target = np.concatenate(t)
    weight = pixel_mask(target, low, high) if use_mask else np.ones(len(target))
    return RayTable(np.concatenate(o), np.concatenate(d), target, np.concatenate(vi), weight)


class Trainer:
    """Holds the mutable training state; ``step()`` runs one optimizer iteration."""

    def __init__(self, dataset: Dataset, config: TrainConfig, grid: VoxelGrid | None = None,
                 tone: list | None = None, reference: int | None = None):
        self.dataset = dataset
        self.config = cfg = config
        self.dtype = np.dtype(cfg.dtype)
        self.rays = build_ray_table(dataset, cfg.use_mask, cfg.weights.mask_low,
                                    cfg.weights.mask_high)
        self.n_views = len(dataset.views)
        if grid is None:
            grid = init_grid(cfg.resolution_ladder[0][1], dataset.bounds, self.dtype,
                             cfg.offset_mode)
        self.grid = grid
        self.grid.data = self.grid.data.astype(self.dtype)
        if reference is None:
            reference = select_reference_view(dataset)
        self.reference = reference
        if tone is None:
            wb0 = init_white_balance(dataset) if cfg.tonemap else np.ones((self.n_views, 3))
            tone = [ToneMapParams(wb=wb0[i], alpha=cfg.alpha) for i in range(self.n_views)]
        self.tone = tone
        self.tone[reference].frozen = True
        self.n_crf = 1 if cfg.shared_crf else self.n_views
        self.crf_row = np.zeros(self.n_views, np.int64) if cfg.shared_crf else np.arange(self.n_views)
        self.wb = np.stack([p.wb for p in self.tone])
        self.crf = np.stack([self.tone[i].crf for i in range(self.n_crf)])
        self._bind_tone()
        self.v_grid = np.zeros(self.grid.data.shape, dtype=self.dtype)
        self.v_wb = np.zeros_like(self.wb)
        self.v_crf = np.zeros_like(self.crf)
        self.grad_grid = np.zeros(self.grid.data.shape, dtype=self.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        self.order = self.rng.permutation(len(self.rays.view))
        self.cursor = 0
        self.step_count = 0
        self.initial_total = None
        self.sigma_sign = 1.0
        self.history = []
        self.eval_history = []

    def _bind_tone(self):
        # ToneMapParams objects share memory with the packed optimizer arrays.
        for i, p in enumerate(self.tone):
            p.wb = self.wb[i]
            p.crf = self.crf[self.crf_row[i]]

    @property
    def epoch(self) -> int:
        return self.step_count // self.config.iters_per_epoch

    @property
    def step_size(self) -> float:
        return self.config.step_size if self.config.step_size else default_step(self.grid)

    def next_batch(self) -> np.ndarray:
        n = self.config.rays_per_batch
        out = []
        while n > 0:
            if self.cursor >= len(self.order):
                self.order = self.rng.permutation(len(self.rays.view))
                self.cursor = 0
            take = self.order[self.cursor:self.cursor + n]
            self.cursor += len(take)
            n -= len(take)
            out.append(take)
        return np.concatenate(out)

    def _grid_args(self):
        g = self.grid
        return (g.data, g.occupancy.view(np.uint8), np.array(g.resolution, dtype=np.int64),
                g.bounds_min, g.bounds_max, float(g.color_offset))

    def learning_rates(self, step=None) -> dict:
        cfg = self.config
        s = self.step_count if step is None else step
        lr = lr_exponential(s, cfg.lr_init, cfg.lr_final, cfg.total_lr_steps)
        lr_sigma = lr_delayed(s, cfg.sigma_lr_init, cfg.sigma_lr_final, cfg.sigma_lr_delay_steps,
                              cfg.total_lr_steps)
        return {"sh": lr, "sigma": lr_sigma, "wb": lr * cfg.wb_lr_scale, "crf": lr}

    def apply_ladder(self) -> bool:
        """Upsample (then prune) when the current iteration hits a ladder trigger."""
        for trig, res in self.config.resolution_ladder[1:]:
            if trig == self.step_count and tuple(res) != self.grid.resolution:
                old = self.grid
                new = upsample(old, res)
                v_field = VoxelGrid(old.resolution, old.bounds_min, old.bounds_max,
                                    self.v_grid.astype(np.float64), np.ones(old.num_vertices, bool),
                                    0.0)
                new = prune(new, self.config.prune_tau)
                new.data = new.data.astype(self.dtype)
                self.v_grid = sample_field(v_field, new.vertex_positions()).astype(self.dtype)
                self.grid = new
                self.grad_grid = np.zeros(new.data.shape, dtype=self.dtype)
                log.info("step %d: grid %s -> %s, %d/%d vertices occupied", self.step_count,
                         old.resolution, res, int(new.occupancy.sum()), new.num_vertices)
                return True
        return False

    def _sample_buffers(self, n_rays):
        """Reusable per-sample scratch for the recorded forward pass."""
        g = self.grid
        cap = kernels.max_samples(g.bounds_min, g.bounds_max, self.step_size)
        buf = getattr(self, "_scratch", None)
        if buf is None or buf[0].shape != (n_rays, cap):
            buf = (np.empty((n_rays, cap), np.int64), np.empty((n_rays, cap, 5)))
            self._scratch = buf
        return buf

    def forward_batch(self, idx):
        r = self.rays
        rgb = kernels.march_forward(*self._grid_args(), r.origins[idx], r.dirs[idx],
                                    self.step_size, self.config.stop_thresh)
        return rgb

    def predict_ldr(self, rgb, views):
        if not self.config.tonemap:
            return rgb, None
        return tonemap_batch(rgb, self.wb[views], self.crf, self.crf_row[views], self.config.alpha)

    def dataset_recon_loss(self) -> float:
        """Masked reconstruction loss over every trainable ray."""
        idx = np.arange(len(self.rays.view))
        pred, _ = self.predict_ldr(self.forward_batch(idx), self.rays.view)
        return masked_sse(self.rays.target, pred, self.rays.weight)[0]

    def compute_gradients(self, idx):
        """Loss components and gradients (grid grads land in ``self.grad_grid``)."""
        cfg = self.config
        r = self.rays
        views = r.view[idx]
        s_index, s_val = self._sample_buffers(len(idx))
        rgb, count = kernels.march_forward_record(*self._grid_args(), r.origins[idx], r.dirs[idx],
                                                  self.step_size, cfg.stop_thresh, s_index, s_val)
        if not np.all(np.isfinite(rgb)):
            raise DivergenceError(f"step {self.step_count}: non-finite rendered radiance")
        pred, cache = self.predict_ldr(rgb, views)
        recon, g_pred = masked_sse(r.target[idx], pred, r.weight[idx])
        g_wb = np.zeros_like(self.wb)
        g_crf = np.zeros_like(self.crf)
        if cache is not None:
            g_rgb, g_wb_rows, g_crf = tonemap_batch_backward(cache, g_pred)
            for c in range(3):
                g_wb[:, c] = np.bincount(views, weights=g_wb_rows[:, c], minlength=self.n_views)
        else:
            g_rgb = g_pred
        self.grad_grid.fill(0)
        kernels.march_backward_recorded(self._grid_args()[1], *self._grid_args()[2:5],
                                        r.origins[idx], r.dirs[idx], self.step_size, rgb, g_rgb,
                                        count, s_index, s_val, self.grad_grid, self.sigma_sign)
        w = cfg.weights
        tv_s = tv_h = 0.0
        if self.epoch < cfg.tv_epochs and min(self.grid.resolution) >= 2:
            if w.lambda_tv_sigma > 0:
                tv_s, g = tv_loss(self.grid, "sigma", w.tv_epsilon, with_grad=True)
                self.grad_grid += (w.lambda_tv_sigma * g).astype(self.dtype)
            if w.lambda_tv_sh > 0:
                tv_h, g = tv_loss(self.grid, "sh", w.tv_epsilon, with_grad=True)
                self.grad_grid += (w.lambda_tv_sh * g).astype(self.dtype)
        smooth = 0.0
        if cfg.tonemap:
            smooth, g = smooth_loss(self.crf, with_grad=True)
            g_crf = g_crf + w.lambda_smooth * g
        total = total_loss(recon, tv_s, tv_h, smooth, w)
        parts = {"recon": recon, "tv_sigma": tv_s, "tv_sh": tv_h, "smooth": smooth,
                 "total": total}
        return parts, g_wb, g_crf

    def apply_update(self, g_wb, g_crf, lrs):
        cfg = self.config
        rate = sh_mask_rate(self.epoch, cfg.sh_mask_epochs)
        col_scale = np.ones(28)
        for j in range(SH_DIM):
            if SH_BAND[j] in cfg.sh_mask_bands:
                col_scale[j::SH_DIM][:3] = 1.0 - rate
        col_lr = np.zeros(28, np.int64)
        col_lr[SIGMA] = 1
        ok = kernels.rmsprop_update(self.grid.data, self.grad_grid, self.v_grid,
                                    np.array([lrs["sh"], lrs["sigma"]]), cfg.beta, cfg.eps,
                                    col_lr, col_scale, self.grid.occupancy.view(np.uint8))
        if not ok:
            raise DivergenceError(f"step {self.step_count}: non-finite gradient in grid payload")
        if not cfg.tonemap:
            return
        for i, p in enumerate(self.tone):
            if p.frozen:
                g_wb[i] = 0.0
                if cfg.freeze_reference_crf:
                    g_crf[self.crf_row[i]] = 0.0
        g_crf[..., 0] = 0.0
        g_crf[..., -1] = 0.0
        for name, g in (("white balance", g_wb), ("CRF", g_crf)):
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"step {self.step_count}: non-finite gradient in {name}")
        new_wb, self.v_wb = rmsprop_step(self.wb, g_wb, self.v_wb, lrs["wb"], cfg.beta, cfg.eps)
        new_crf, self.v_crf = rmsprop_step(self.crf, g_crf, self.v_crf, lrs["crf"], cfg.beta,
                                           cfg.eps)
        self.wb[:] = new_wb
        self.crf[:] = new_crf
        for p in self.tone:
            project_params(p)

    def step(self) -> dict:
        self.apply_ladder()
        idx = self.next_batch()
        lrs = self.learning_rates()
        parts, g_wb, g_crf = self.compute_gradients(idx)
        if self.initial_total is None:
            self.initial_total = parts["total"]
        elif parts["total"] > self.config.divergence_factor * self.initial_total:
            raise DivergenceError(
                f"step {self.step_count}: total loss {parts['total']:.4g} exceeds "
                f"{self.config.divergence_factor:g}x initial {self.initial_total:.4g} "
                f"(recon {parts['recon']:.4g}, tv_sigma {parts['tv_sigma']:.4g}, "
                f"tv_sh {parts['tv_sh']:.4g}, smooth {parts['smooth']:.4g})")
        self.apply_update(g_wb, g_crf, lrs)
        row = {"step": self.step_count, **parts, "lr_sh": lrs["sh"], "lr_sigma": lrs["sigma"]}
        self.history.append(row)
        self.step_count += 1
        return row

    def render_view(self, i: int, hdr=False):
        v = self.dataset.views[i]
        rgb = render_hdr(self.grid, v.camera, step=self.step_size,
                         stop_thresh=self.config.stop_thresh)
        if hdr:
            return rgb
        if not self.config.tonemap:
            return np.clip(rgb, 0.0, 1.0)
        return np.clip(tonemap(rgb, self.tone[i]), 0.0, 1.0)

    def evaluate(self) -> dict:
        """Masked PSNR of 8-bit renders on the unseen right halves of the test views."""
        out = {}
        for i, v in enumerate(self.dataset.views):
            if v.role != "test":
                continue
            right = half_masks(v.camera.height, v.camera.width)[1]
            out[v.id] = masked_psnr(quantize_ldr(self.render_view(i)), v.ldr, right)
        if out:
            out["mean"] = float(np.mean(list(out.values())))
        return out

    def run(self, out_dir=None, progress=None) -> None:
        cfg = self.config
        logf = writer = None
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            logf = open(out_dir / "train_log.csv", "a" if self.step_count else "w", newline="")
            writer = csv.writer(logf)
            if not self.step_count:
                writer.writerow(["step", "recon", "tv_sigma", "tv_sh", "smooth", "total",
                                 "lr_sh", "lr_sigma"])
        try:
            while self.step_count < cfg.total_steps:
                row = self.step()
                if writer is not None:
                    writer.writerow([row["step"]] + [f"{row[k]:.9g}" for k in
                                    ("recon", "tv_sigma", "tv_sh", "smooth", "total",
                                     "lr_sh", "lr_sigma")])
                end_of_epoch = self.step_count % cfg.iters_per_epoch == 0
                if (cfg.eval_every and self.step_count % cfg.eval_every == 0) or \
                        (not cfg.eval_every and end_of_epoch):
                    ev = self.evaluate()
                    if ev:
                        self.eval_history.append({"step": self.step_count, **ev})
                        log.info("step %d: test right-half PSNR %.2f dB", self.step_count,
                                 ev["mean"])
                if progress is not None:
                    progress(self, row)
                if (out_dir is not None and cfg.checkpoint_every_epochs and end_of_epoch
                        and self.epoch % cfg.checkpoint_every_epochs == 0
                        and self.step_count < cfg.total_steps):
                    save_checkpoint(out_dir / f"ckpt_epoch{self.epoch:03d}", self)
        finally:
            if logf is not None:
                logf.close()
        if out_dir is not None:
            save_checkpoint(out_dir / "final", self)
            if self.eval_history:
                with open(out_dir / "eval_log.csv", "w", newline="") as f:
                    keys = list(self.eval_history[0].keys())
                    w = csv.DictWriter(f, fieldnames=keys)
                    w.writeheader()
                    w.writerows(self.eval_history)


def train(dataset: Dataset, config: TrainConfig, out_dir=None, progress=None) -> Trainer:
    trainer = Trainer(dataset, config)
    t0 = time.time()
    trainer.run(out_dir, progress)
    log.info("trained %d steps in %.1f s", trainer.step_count, time.time() - t0)
    return trainer


def resume(dataset: Dataset, ckpt_dir, out_dir=None, config_overrides=None) -> Trainer:
    trainer = load_checkpoint(ckpt_dir, dataset, config_overrides)
    trainer.run(out_dir)
    return trainer
