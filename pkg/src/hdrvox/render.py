"""Pinhole cameras, ray sampling and volume compositing with adjoints."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import VoxelGrid, eval_radiance, eval_sh_basis, interp_payload

DEFAULT_STOP_THRESH = 1e-5


@dataclass
class Camera:
    """OpenCV-style pinhole: +z forward, +x right, +y down in camera frame.

    ``c2w`` is the 4x4 camera-to-world matrix.  Pixel (px, py) has its
    center at (px + 0.5, py + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.c2w.shape != (4, 4):
            raise ValueError("c2w must be 4x4")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        rot = self.rotation
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3]

    def project(self, points) -> np.ndarray:
        """World points (..., 3) to continuous pixel coordinates (..., 2)."""
        p = (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "c2w": [list(map(float, row)) for row in self.c2w]}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(d["c2w"], dtype=np.float64))


@dataclass
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    t_near: float
    t_far: float


@dataclass
class RaySamples:
    positions: np.ndarray  # (N, 3)
    deltas: np.ndarray  # (N,)
    sigmas: np.ndarray | None = None
    colors: np.ndarray | None = None


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix looking from ``eye`` at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    down = -(up - (up @ fwd) * fwd)
    down /= np.linalg.norm(down)
    c2w = np.eye(4)
    c2w[:3, 0] = np.cross(down, fwd)
    c2w[:3, 1] = down
    c2w[:3, 2] = fwd
    c2w[:3, 3] = eye
    return c2w


def box_intersect(origin, direction, bounds_min, bounds_max):
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    return kernels.ray_box(o[0], o[1], o[2], d[0], d[1], d[2],
                           np.asarray(bounds_min, dtype=np.float64),
                           np.asarray(bounds_max, dtype=np.float64))


def pixel_directions(cam: Camera, px, py) -> np.ndarray:
    """Unit world-space directions through pixel centers."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    local = np.stack([(px + 0.5 - cam.cx) / cam.fx,
                      (py + 0.5 - cam.cy) / cam.fy,
                      np.ones_like(px)], axis=-1)
    world = local @ cam.rotation.T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def generate_ray(cam: Camera, px: float, py: float, bounds=None) -> Ray:
    """Ray through the center of pixel (px, py), clipped to ``bounds``."""
    d = pixel_directions(cam, px, py)
    o = cam.center.copy()
    if bounds is None:
        return Ray(o, d, 0.0, math.inf)
    t0, t1 = box_intersect(o, d, bounds[0], bounds[1])
    return Ray(o, d, t0, t1)


def sample_points(ray: Ray, step: float) -> RaySamples:
    """Midpoint samples t_i = t_near + (i + 1/2) step, N = floor(length / step)."""
    if step <= 0:
        raise ValueError("step must be positive")
    if not ray.t_far > ray.t_near:
        return RaySamples(np.zeros((0, 3)), np.zeros(0))
    n = int(math.floor((ray.t_far - ray.t_near) / step))
    t = ray.t_near + (np.arange(n) + 0.5) * step
    return RaySamples(ray.origin + t[:, None] * ray.dir, np.full(n, step))


def composite(samples: RaySamples):
    """Emission-absorption compositing.

    Returns (rgb, weights, transmittances) where
    T_i = exp(-sum_{j<i} sigma_j delta_j) and w_i = T_i (1 - exp(-sigma_i delta_i)).
    """
    sig = np.asarray(samples.sigmas, dtype=np.float64)
    cols = np.asarray(samples.colors, dtype=np.float64).reshape(-1, 3)
    tau = sig * np.asarray(samples.deltas, dtype=np.float64)
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(tau)[:-1]])) if len(tau) else np.zeros(0)
    weights = trans * -np.expm1(-tau)
    return weights @ cols if len(tau) else np.zeros(3), weights, trans


def composite_backward(samples: RaySamples, upstream_grad):
    """Gradients of <upstream_grad, rgb> w.r.t. every sigma_i and c_i."""
    sig = np.asarray(samples.sigmas, dtype=np.float64)
    cols = np.asarray(samples.colors, dtype=np.float64).reshape(-1, 3)
    delta = np.asarray(samples.deltas, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    rgb, w, trans = composite(samples)
    contrib = w[:, None] * cols
    behind = rgb - np.cumsum(contrib, axis=0)  # sum_{j>i} w_j c_j
    d_sigma = delta * (((trans * np.exp(-sig * delta))[:, None] * cols - behind) @ g)
    d_color = w[:, None] * g[None, :]
    return d_sigma, d_color


def ray_samples(grid: VoxelGrid, ray: Ray, step: float) -> RaySamples:
    """Sample positions plus clamped sigma and radiance along ``ray``."""
    s = sample_points(ray, step)
    n = len(s.deltas)
    s.sigmas = np.zeros(n)
    s.colors = np.zeros((n, 3))
    for i, p in enumerate(s.positions):
        p = np.clip(p, grid.bounds_min, grid.bounds_max)
        payload = interp_payload(grid, p)
        s.sigmas[i] = max(0.0, payload.sigma)
        s.colors[i] = eval_radiance(payload, ray.dir, grid.color_offset)
    return s


def render_ray_reference(grid: VoxelGrid, ray: Ray, step: float,
                         stop_thresh: float = DEFAULT_STOP_THRESH) -> np.ndarray:
    """Slow composition of the public operations; the compiled kernel must agree."""
    s = ray_samples(grid, ray, step)
    if stop_thresh > 0 and len(s.deltas):
        tau = s.sigmas * s.deltas
        after = np.exp(-np.cumsum(tau))
        stop = np.nonzero(after < stop_thresh)[0]
        if len(stop):
            k = stop[0] + 1
            s = RaySamples(s.positions[:k], s.deltas[:k], s.sigmas[:k], s.colors[:k])
    return composite(s)[0]


def default_step(grid: VoxelGrid) -> float:
    return 0.5 * float(np.min(grid.edge))


def camera_rays(cam: Camera, pixels=None):
    """(origins, dirs) for ``pixels`` ((M, 2) integer px, py) or the full raster."""
    if pixels is None:
        py, px = np.mgrid[0:cam.height, 0:cam.width]
        px, py = px.ravel(), py.ravel()
    else:
        pixels = np.asarray(pixels)
        px, py = pixels[:, 0], pixels[:, 1]
    dirs = pixel_directions(cam, px, py)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    return origins, dirs


def render_rays(grid: VoxelGrid, origins, dirs, step=None,
                stop_thresh=DEFAULT_STOP_THRESH, parallel=False) -> np.ndarray:
    step = default_step(grid) if step is None else float(step)
    fn = kernels.march_forward_parallel if parallel else kernels.march_forward
    return fn(grid.data, grid.occupancy.view(np.uint8), np.array(grid.resolution, dtype=np.int64),
              grid.bounds_min, grid.bounds_max, float(grid.color_offset),
              np.ascontiguousarray(origins, dtype=np.float64),
              np.ascontiguousarray(dirs, dtype=np.float64), step, float(stop_thresh))


def render_hdr(grid: VoxelGrid, cam: Camera, pixels=None, step=None,
               stop_thresh=DEFAULT_STOP_THRESH, parallel=False) -> np.ndarray:
    """HDR radiance per pixel: (M, 3) for a pixel list, (H, W, 3) for the full image."""
    origins, dirs = camera_rays(cam, pixels)
    rgb = render_rays(grid, origins, dirs, step, stop_thresh, parallel)
    if pixels is None:
        return rgb.reshape(cam.height, cam.width, 3)
    return rgb


def accumulate_grid_grad(grid: VoxelGrid, origins, dirs, rgb, grad_rgb, grad_data,
                         step=None, stop_thresh=DEFAULT_STOP_THRESH, sigma_sign=1.0) -> None:
    """Add d loss / d payload (through sigma/SH) for a batch of rays into ``grad_data``."""
    step = default_step(grid) if step is None else float(step)
    kernels.march_backward(
        grid.data, grid.occupancy.view(np.uint8), np.array(grid.resolution, dtype=np.int64),
        grid.bounds_min, grid.bounds_max, float(grid.color_offset),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64), step, float(stop_thresh),
        np.ascontiguousarray(rgb, dtype=np.float64),
        np.ascontiguousarray(grad_rgb, dtype=np.float64), grad_data, float(sigma_sign))


__all__ = [
    "Camera", "Ray", "RaySamples", "look_at", "generate_ray", "sample_points", "composite",
    "composite_backward", "render_hdr", "render_rays", "render_ray_reference", "ray_samples",
    "camera_rays", "accumulate_grid_grad", "default_step", "eval_sh_basis",
]
