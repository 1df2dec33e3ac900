"""Dataset manifest (versioned JSON) and loading of views into memory."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import read_pfm, read_png
from .render import Camera

SCHEMA = "hdrvox.manifest/1"


@dataclass
class ViewEntry:
    id: str
    image: str
    camera: Camera
    role: str = "train"
    hdr: str | None = None
    mask: str | None = None

    def to_dict(self) -> dict:
        d = {"id": self.id, "image": self.image, "role": self.role,
             "camera": self.camera.to_dict()}
        if self.hdr is not None:
            d["hdr"] = self.hdr
        if self.mask is not None:
            d["mask"] = self.mask
        return d


@dataclass
class DatasetManifest:
    bounds: tuple
    views: list
    reference_view: str | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [v.id for v in self.views]
        if len(set(ids)) != len(ids):
            raise ValueError("view ids must be unique")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        if not np.all(lo < hi):
            raise ValueError("scene bounds min must be < max")
        self.bounds = (lo, hi)
        for v in self.views:
            if v.role not in ("train", "test"):
                raise ValueError(f"view {v.id}: role must be train or test")

    def index_of(self, view_id: str) -> int:
        for i, v in enumerate(self.views):
            if v.id == view_id:
                return i
        raise KeyError(view_id)

    def to_dict(self) -> dict:
        d = {"schema": SCHEMA,
             "bounds": [list(map(float, self.bounds[0])), list(map(float, self.bounds[1]))],
             "reference_view": self.reference_view,
             "views": [v.to_dict() for v in self.views]}
        d.update(self.extras)
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("schema") != SCHEMA:
            raise ValueError(f"{path}: unsupported manifest schema {d.get('schema')!r}")
        root = path.parent
        views = []
        for v in d["views"]:
            entry = ViewEntry(v["id"], v["image"], Camera.from_dict(v["camera"]),
                              v.get("role", "train"), v.get("hdr"), v.get("mask"))
            for key in ("image", "hdr", "mask"):
                rel = getattr(entry, key)
                if rel is not None and not (root / rel).exists():
                    raise FileNotFoundError(f"{path}: view {entry.id} {key} {rel} missing")
            views.append(entry)
        extras = {k: v for k, v in d.items()
                  if k not in ("schema", "bounds", "reference_view", "views")}
        return cls(tuple(d["bounds"]), views, d.get("reference_view"), extras)


@dataclass
class LoadedView:
    id: str
    camera: Camera
    role: str
    ldr: np.ndarray  # (H, W, 3) in [0, 1]
    train_mask: np.ndarray  # (H, W) bool
    hdr: np.ndarray | None = None


@dataclass
class Dataset:
    manifest: DatasetManifest
    views: list
    root: Path

    @property
    def bounds(self):
        return self.manifest.bounds

    @classmethod
    def load(cls, directory) -> "Dataset":
        root = Path(directory)
        manifest = DatasetManifest.load(root / "manifest.json")
        views = []
        for v in manifest.views:
            ldr = read_png(root / v.image)
            if v.mask is not None:
                mask = read_png(root / v.mask)[..., 0] > 0.5
            else:
                mask = np.ones(ldr.shape[:2], dtype=bool)
            hdr = read_pfm(root / v.hdr).astype(np.float64) if v.hdr else None
            if (ldr.shape[0], ldr.shape[1]) != (v.camera.height, v.camera.width):
                raise ValueError(f"view {v.id}: image size does not match camera")
            views.append(LoadedView(v.id, v.camera, v.role, ldr, mask, hdr))
        return cls(manifest, views, root)
