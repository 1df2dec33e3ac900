"""Synthetic ground truth: analytic emissive scenes, camera rig, tone profiles.

A scene is a list of emissive, absorbing primitives rasterized onto a
voxel grid by point-sampling vertex positions.  Rendering that grid
through per-view white balance and a gamma CRF produces an LDR dataset
whose radiometric parameters are known exactly.

Scene spec files are flat ``key = value`` text::

    bounds = -1 -1 -1 1 1 1
    resolution = 64 64 64
    background_density = 0
    primitive = box center=0 0 0.8 size=2 2 0.2 emission=0.1 0.1 0.1 density=80 ramp=x:6
    primitive = sphere center=0 0 0 size=0.3 emission=4 1 0.2 density=30

Box ``size`` is the full extent per axis, sphere ``size`` the radius.
``ramp=AXIS:STOPS[:AXIS:STOPS...]`` scales emission by 2^(stops * s)
with s in [-1/2, 1/2] across the primitive along that axis; a leading
channel letter (``rx:6``) restricts the ramp to one channel.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, ViewEntry
from .field import SH_C0, SIGMA, VoxelGrid, init_grid, read_grid, write_grid
from .imageio import write_pfm, write_png
from .losses import pixel_mask
from .metrics import crf_rmse, half_masks, resample_curve, scale_aligned_psnr, wb_relative_error
from .render import Camera, default_step, look_at, render_hdr

AXES = {"x": 0, "y": 1, "z": 2}
CHANNELS = {"r": 0, "g": 1, "b": 2}


class SceneSpecError(ValueError):
    pass


@dataclass
class Primitive:
    shape: str
    center: np.ndarray
    size: np.ndarray
    emission: np.ndarray
    density: float
    ramps: list = field(default_factory=list)  # (channel or None, axis, stops)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        if self.shape == "sphere":
            return np.sum(d * d, axis=-1) <= self.size[0] ** 2
        return np.all(np.abs(d) <= 0.5 * self.size, axis=-1)

    def half_extent(self) -> np.ndarray:
        return np.full(3, self.size[0]) if self.shape == "sphere" else 0.5 * self.size

    def emission_at(self, pts: np.ndarray) -> np.ndarray:
        e = np.broadcast_to(self.emission, pts.shape).copy()
        half = self.half_extent()
        for ch, axis, stops in self.ramps:
            s = np.clip((pts[:, axis] - self.center[axis]) / (2 * half[axis]), -0.5, 0.5)
            gain = 2.0 ** (stops * s)
            if ch is None:
                e *= gain[:, None]
            else:
                e[:, ch] *= gain
        return e


@dataclass
class OracleScene:
    primitives: list
    bounds: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    resolution: tuple = (64, 64, 64)
    background_density: float = 0.0

    def extent(self) -> float:
        lo, hi = (np.asarray(b) for b in self.bounds)
        return float(np.max(hi - lo) / 2)

    def center(self) -> np.ndarray:
        lo, hi = (np.asarray(b) for b in self.bounds)
        return (lo + hi) / 2


@dataclass
class GTToneProfile:
    wb: np.ndarray  # (V, 3)
    gamma: np.ndarray  # (V,)
    ev: np.ndarray | None = None

    def __post_init__(self):
        self.wb = np.asarray(self.wb, dtype=np.float64).reshape(-1, 3)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(-1)
        if np.any(self.wb <= 0) or np.any(self.gamma <= 0):
            raise ValueError("profile gains and gammas must be positive")

    def crf(self, view: int, n: int = 256) -> np.ndarray:
        return gamma_curve(self.gamma[view], n)

    def to_dict(self) -> dict:
        d = {"wb": self.wb.tolist(), "gamma": self.gamma.tolist()}
        if self.ev is not None:
            d["ev"] = np.asarray(self.ev).tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "GTToneProfile":
        return cls(np.array(d["wb"]), np.array(d["gamma"]),
                   None if d.get("ev") is None else np.array(d["ev"]))


def gamma_curve(gamma: float, n: int = 256) -> np.ndarray:
    """Display-style curve g(x) = x^(1/gamma) sampled at n uniform knots."""
    return np.linspace(0.0, 1.0, n) ** (1.0 / gamma)


def apply_gt_tonemap(hdr: np.ndarray, wb, gamma: float) -> np.ndarray:
    """Ground-truth camera: gains, clamp to [0, 1], then x^(1/gamma)."""
    lin = np.clip(np.asarray(hdr, dtype=np.float64) * np.asarray(wb), 0.0, 1.0)
    return lin ** (1.0 / gamma)


DEFAULT_SCENE = """\
# Back wall with gentle per-channel ramps, a stripe sweeping +-6 stops,
# two semi-transparent tinted spheres and small bright/dark solids.
bounds = -1 -1 -1 1 1 1
resolution = 64 64 64
background_density = 0
primitive = box center=0 0 0.8 size=2 2 0.4 emission=0.045 0.045 0.045 density=60 ramp=rx:0.5:gy:0.5:bx:-0.5
primitive = box center=0 -0.5 0.55 size=2 0.3 0.1 emission=0.06 0.06 0.06 density=60 ramp=x:12
primitive = sphere center=-0.3 0.25 0.1 size=0.26 emission=0.12 0.03 0.06 density=4
primitive = sphere center=0.32 0.3 -0.1 size=0.2 emission=0.03 0.08 0.12 density=3
primitive = box center=0.35 -0.1 -0.3 size=0.14 0.14 0.14 emission=6 3 1.5 density=50
primitive = sphere center=-0.4 -0.05 -0.3 size=0.09 emission=0.01 0.02 0.015 density=40
"""


def _floats(text: str, n: int | None, key: str) -> np.ndarray:
    try:
        vals = np.array([float(t) for t in text.split()])
    except ValueError as e:
        raise SceneSpecError(f"bad number in {key}: {text!r}") from e
    if n is not None and len(vals) != n:
        raise SceneSpecError(f"{key} needs {n} values, got {len(vals)}")
    return vals


def _parse_ramps(text: str) -> list:
    parts = text.split(":")
    if len(parts) % 2:
        raise SceneSpecError(f"bad ramp {text!r}")
    out = []
    for tag, stops in zip(parts[::2], parts[1::2]):
        ch = None
        if len(tag) == 2:
            if tag[0] not in CHANNELS:
                raise SceneSpecError(f"bad ramp channel in {text!r}")
            ch, tag = CHANNELS[tag[0]], tag[1]
        if tag not in AXES:
            raise SceneSpecError(f"bad ramp axis in {text!r}")
        out.append((ch, AXES[tag], float(stops)))
    return out


def _parse_primitive(text: str) -> Primitive:
    tokens = text.split()
    if not tokens or tokens[0] not in ("sphere", "box"):
        raise SceneSpecError(f"primitive must start with sphere or box: {text!r}")
    shape = tokens[0]
    fields, key = {}, None
    for tok in tokens[1:]:
        if "=" in tok:
            key, val = tok.split("=", 1)
            fields[key] = val
        elif key is not None:
            fields[key] += " " + tok
        else:
            raise SceneSpecError(f"unexpected token {tok!r}")
    for req in ("center", "size", "emission", "density"):
        if req not in fields:
            raise SceneSpecError(f"primitive missing {req}")
    size = _floats(fields["size"], 1 if shape == "sphere" else 3, "size")
    emission = _floats(fields["emission"], 3, "emission")
    if np.any(emission < 0) or np.any(size <= 0):
        raise SceneSpecError("emission must be >= 0 and size > 0")
    density = float(_floats(fields["density"], 1, "density")[0])
    ramps = _parse_ramps(fields["ramp"]) if "ramp" in fields else []
    return Primitive(shape, _floats(fields["center"], 3, "center"), size, emission, density, ramps)


def parse_scene_spec(text: str) -> OracleScene:
    kw, prims = {}, []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SceneSpecError(f"expected key = value: {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "primitive":
            prims.append(_parse_primitive(val))
        elif key == "bounds":
            b = _floats(val, 6, key)
            kw["bounds"] = (tuple(b[:3]), tuple(b[3:]))
        elif key == "resolution":
            kw["resolution"] = tuple(int(v) for v in _floats(val, 3, key))
        elif key == "background_density":
            kw["background_density"] = float(_floats(val, 1, key)[0])
        else:
            raise SceneSpecError(f"unknown key {key!r}")
    if not prims:
        raise SceneSpecError("scene spec has no primitives")
    return OracleScene(prims, **kw)


def build_scene(spec, seed: int = 0):
    """Parse (if text) and rasterize; returns (scene, ground-truth grid).

    Vertices take density and DC-only emission of the last primitive that
    contains them.  Scenes are fully specified, so ``seed`` only matters to
    callers that jitter cameras; rasterization itself is deterministic.
    """
    scene = parse_scene_spec(spec) if isinstance(spec, str) else spec
    if not scene.primitives:
        raise SceneSpecError("scene has no primitives")
    grid = init_grid(scene.resolution, scene.bounds)
    pts = grid.vertex_positions()
    emission = np.zeros((len(pts), 3))
    sigma = np.full(len(pts), float(scene.background_density))
    for prim in scene.primitives:
        inside = prim.contains(pts)
        sigma[inside] = prim.density
        emission[inside] = prim.emission_at(pts[inside])
    grid.data[:] = 0.0
    grid.data[:, SIGMA] = sigma
    grid.data[:, 0:27:9] = (emission - grid.color_offset) / SH_C0
    return scene, grid


def make_rig(scene: OracleScene, n_views: int = 20, size: int = 64, seed: int = 0,
             max_angle_deg: float = 30.0, radius_factor: float = 2.5, fov_deg: float = 26.0):
    """Roughly forward-facing cameras on a partial sphere looking at the scene center."""
    rng = np.random.default_rng(seed)
    center = scene.center()
    radius = radius_factor * scene.extent()
    focal = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    cams = []
    for _ in range(n_views):
        az, el = np.radians(rng.uniform(-max_angle_deg, max_angle_deg, size=2))
        eye = center + radius * np.array([math.sin(az) * math.cos(el), math.sin(el),
                                          -math.cos(az) * math.cos(el)])
        cams.append(Camera(focal, focal, size / 2, size / 2, size, size, look_at(eye, center)))
    return cams


def default_profile(n_views: int, kind: str = "varying", gamma: float = 3.0) -> GTToneProfile:
    """Exposure cycles through -3/0/+3 EV; a 1.25 gain cycles over r, g, b, none."""
    if kind == "static":
        return GTToneProfile(np.ones((n_views, 3)), np.full(n_views, gamma), np.zeros(n_views))
    if kind != "varying":
        raise ValueError(f"unknown profile {kind!r}")
    ev = np.array([(-3.0, 0.0, 3.0)[i % 3] for i in range(n_views)])
    wb = np.ones((n_views, 3))
    for i in range(n_views):
        j = i % 4
        if j < 3:
            wb[i, j] = 1.25
    wb *= (2.0 ** ev)[:, None]
    return GTToneProfile(wb, np.full(n_views, gamma), ev)


def default_test_views(n_views: int, n_test: int = 4) -> list:
    return [int(round((k + 0.5) * n_views / n_test)) for k in range(n_test)]


def render_gt_dataset(scene: OracleScene, gt_grid: VoxelGrid, rig, profile: GTToneProfile,
                      out_dir, test_views=None, step=None, scene_text: str | None = None,
                      seed: int | None = None) -> DatasetManifest:
    """Render every view, tone-map with the profile, write the dataset directory."""
    if len(rig) < 2:
        raise ValueError("need at least two views")
    if len(profile.wb) != len(rig):
        raise ValueError("profile and rig sizes differ")
    test_views = default_test_views(len(rig)) if test_views is None else list(test_views)
    out = Path(out_dir)
    for sub in ("images", "hdr", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    step = default_step(gt_grid) if step is None else step
    # render from the single-precision values the grid file will hold, so the
    # stored ground truth reproduces the images exactly
    gt_grid = gt_grid.copy()
    gt_grid.data = gt_grid.data.astype(np.float32).astype(np.float64)
    entries = []
    for i, cam in enumerate(rig):
        vid = f"v{i:03d}"
        hdr = render_hdr(gt_grid, cam, step=step)
        ldr = apply_gt_tonemap(hdr, profile.wb[i], profile.gamma[i])
        role = "test" if i in test_views else "train"
        mask = np.ones((cam.height, cam.width), dtype=bool)
        if role == "test":
            mask = half_masks(cam.height, cam.width)[0]
        write_png(out / "images" / f"{vid}.png", ldr)
        write_pfm(out / "hdr" / f"{vid}.pfm", hdr)
        write_png(out / "masks" / f"{vid}.png", np.repeat(mask[..., None], 3, axis=2).astype(float))
        entries.append(ViewEntry(vid, f"images/{vid}.png", cam, role,
                                 f"hdr/{vid}.pfm", f"masks/{vid}.png"))
    write_grid(out / "gt_grid.hvxf", gt_grid)
    (out / "gt_profile.json").write_text(json.dumps(profile.to_dict(), indent=2) + "\n")
    extras = {"gt": {"grid": "gt_grid.hvxf", "profile": "gt_profile.json",
                     "step": float(step)}}
    if scene_text is not None:
        (out / "scene.txt").write_text(scene_text)
        extras["gt"]["scene"] = "scene.txt"
    if seed is not None:
        extras["gt"]["seed"] = int(seed)
    manifest = DatasetManifest((np.array(scene.bounds[0]), np.array(scene.bounds[1])),
                               entries, None, extras)
    manifest.save(out / "manifest.json")
    return manifest


def synthesize(out_dir, spec_text: str = DEFAULT_SCENE, seed: int = 0, profile: str = "varying",
               n_views: int = 20, size: int = 64, n_test: int = 4) -> DatasetManifest:
    scene, grid = build_scene(spec_text, seed)
    rig = make_rig(scene, n_views, size, seed)
    prof = default_profile(n_views, profile)
    return render_gt_dataset(scene, grid, rig, prof, out_dir,
                             default_test_views(n_views, n_test), scene_text=spec_text, seed=seed)


def mask_fraction(ldr: np.ndarray, low=0.15, high=0.9) -> float:
    """Fraction of pixels whose saturation weight is below one."""
    return float(np.mean(pixel_mask(ldr, low, high) < 1.0))


def directory_checksum(path) -> str:
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RecoveryReport:
    wb_error: np.ndarray  # (V, 3) relative error after reference normalization
    crf_rmse: np.ndarray  # (V, 3)
    hdr_psnr: dict  # held-out view id -> scale-aligned PSNR
    scales: dict

    @property
    def max_wb_error(self) -> float:
        return float(self.wb_error.max())

    @property
    def max_crf_rmse(self) -> float:
        return float(self.crf_rmse.max())

    @property
    def min_hdr_psnr(self) -> float:
        return float(min(self.hdr_psnr.values()))


def load_gt(dataset_root):
    """(gt_grid, profile, step) stored alongside a synthesized dataset."""
    root = Path(dataset_root)
    manifest = DatasetManifest.load(root / "manifest.json")
    gt = manifest.extras.get("gt")
    if gt is None:
        raise ValueError(f"{root}: dataset carries no ground truth")
    grid = read_grid(root / gt["grid"])
    profile = GTToneProfile.from_dict(json.loads((root / gt["profile"]).read_text()))
    return grid, profile, gt.get("step")


def gt_compare(grid: VoxelGrid, params_list, reference: int, dataset, profile: GTToneProfile,
               step=None) -> RecoveryReport:
    """Compare a trained state against the oracle that generated ``dataset``."""
    n = len(dataset.views)
    if len(params_list) != n or len(profile.wb) != n:
        raise ValueError(f"view counts differ: trained {len(params_list)}, "
                         f"dataset {n}, profile {len(profile.wb)}")
    wb = np.stack([p.wb for p in params_list])
    wb_err = wb_relative_error(wb, profile.wb, reference)
    rmse = np.zeros((n, 3))
    for i, p in enumerate(params_list):
        gt_curve = profile.crf(i)
        for c in range(3):
            rmse[i, c] = crf_rmse(resample_curve(p.crf[c]), resample_curve(gt_curve))
    psnr, scales = {}, {}
    for v in dataset.views:
        if v.role != "test":
            continue
        if v.hdr is None:
            raise ValueError(f"view {v.id} has no ground-truth HDR image")
        pred = render_hdr(grid, v.camera, step=step)
        psnr[v.id], scales[v.id] = scale_aligned_psnr(pred, v.hdr)
    return RecoveryReport(wb_err, rmse, psnr, scales)
