"""Training checkpoints: a directory holding the grid file, tone-map records,
exact optimizer state and a JSON metadata file.

Layout::

    grid.hvxf      grid in the field module format (f32 payloads)
    tonemap.bin    one record per view (see ``write_tone_records``)
    state.bin      full-precision arrays needed to resume bit-exactly
    meta.json      config, step, view ids, reference index, format version

No timestamps are written anywhere, so equal states give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .field import VoxelGrid, read_grid, write_grid
from .tonemap import NUM_KNOTS, ToneMapParams

CHECKPOINT_VERSION = 1
TONE_MAGIC = b"HVTM"
STATE_MAGIC = b"HVST"


def write_tone_records(path, params_list, view_ids) -> None:
    """Header (magic, version u32, count u32), then per view: id length u32,
    utf-8 id, 3 f64 wb, u8 frozen, f64 alpha, 3x256 f32 CRF values."""
    if len(params_list) != len(view_ids):
        raise ValueError("need one view id per parameter set")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", TONE_MAGIC, CHECKPOINT_VERSION, len(params_list)))
        for vid, p in zip(view_ids, params_list):
            raw = str(vid).encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(np.asarray(p.wb, dtype="<f8").tobytes())
            f.write(struct.pack("<Bd", int(bool(p.frozen)), float(p.alpha)))
            f.write(np.asarray(p.crf, dtype="<f4").tobytes())


def read_tone_records(path):
    """Returns (view_ids, params_list)."""
    buf = Path(path).read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sII", buf, 0)
        if magic != TONE_MAGIC:
            raise OSError(f"{path}: not a tone-map record file")
        if version != CHECKPOINT_VERSION:
            raise OSError(f"{path}: unsupported version {version}")
        off = 12
        ids, params = [], []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            ids.append(buf[off:off + n].decode("utf-8"))
            off += n
            wb = np.frombuffer(buf, "<f8", 3, off).astype(np.float64)
            off += 24
            frozen, alpha = struct.unpack_from("<Bd", buf, off)
            off += 9
            crf = np.frombuffer(buf, "<f4", 3 * NUM_KNOTS, off).reshape(3, NUM_KNOTS)
            off += 12 * NUM_KNOTS
            params.append(ToneMapParams(wb=wb, crf=crf.astype(np.float64), alpha=alpha,
                                        frozen=bool(frozen)))
    except (struct.error, ValueError) as e:
        raise OSError(f"{path}: truncated or malformed tone-map records") from e
    if off != len(buf):
        raise OSError(f"{path}: trailing bytes after tone-map records")
    return ids, params


def _write_arrays(path, arrays: dict) -> None:
    index = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(dt, copy=False).tobytes())
    head = json.dumps(index, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", STATE_MAGIC, CHECKPOINT_VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def _read_arrays(path) -> dict:
    buf = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sII", buf, 0)
    if magic != STATE_MAGIC or version != CHECKPOINT_VERSION:
        raise OSError(f"{path}: not a version {CHECKPOINT_VERSION} state file")
    index = json.loads(buf[12:12 + n].decode("utf-8"))
    off = 12 + n
    out = {}
    for item in index:
        dt = np.dtype(item["dtype"])
        count = int(np.prod(item["shape"], dtype=np.int64))
        out[item["name"]] = np.frombuffer(buf, dt, count, off).reshape(item["shape"]).copy()
        off += count * dt.itemsize
    if off != len(buf):
        raise OSError(f"{path}: size mismatch")
    return out


def save_checkpoint(directory, trainer) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_grid(d / "grid.hvxf", trainer.grid)
    ids = [v.id for v in trainer.dataset.views]
    write_tone_records(d / "tonemap.bin", trainer.tone, ids)
    arrays = {
        "data": trainer.grid.data,
        "occupancy": trainer.grid.occupancy.astype(np.uint8),
        "v_grid": trainer.v_grid,
        "wb": trainer.wb,
        "crf": trainer.crf,
        "v_wb": trainer.v_wb,
        "v_crf": trainer.v_crf,
        "order": trainer.order,
    }
    _write_arrays(d / "state.bin", arrays)
    meta = {
        "format": "hdrvox.checkpoint",
        "version": CHECKPOINT_VERSION,
        "step": trainer.step_count,
        "cursor": trainer.cursor,
        "initial_total": trainer.initial_total,
        "reference": trainer.reference,
        "view_ids": ids,
        "cameras": [v.camera.to_dict() for v in trainer.dataset.views],
        "color_offset": float(trainer.grid.color_offset),
        "resolution": list(trainer.grid.resolution),
        "rng": trainer.rng.bit_generator.state,
        "config": trainer.config.to_dict(),
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    try:
        meta = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise OSError(f"{path}: no such file") from e
    except json.JSONDecodeError as e:
        raise OSError(f"{path}: malformed checkpoint metadata") from e
    if meta.get("format") != "hdrvox.checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise OSError(f"{path}: unsupported checkpoint format")
    return meta


def load_model(directory):
    """Grid and tone parameters at full training precision; enough for rendering.

    Returns (grid, params_list, view_ids, meta).
    """
    d = Path(directory)
    meta = read_meta(d)
    try:
        header = read_grid(d / "grid.hvxf", np.float64, meta["color_offset"])
        arr = _read_arrays(d / "state.bin")
    except FileNotFoundError as e:
        raise OSError(f"{d}: incomplete checkpoint ({e.filename} missing)") from e
    grid = VoxelGrid(header.resolution, header.bounds_min, header.bounds_max, arr["data"],
                     arr["occupancy"].astype(bool), meta["color_offset"])
    ids, params = read_tone_records(d / "tonemap.bin")
    n_crf = arr["crf"].shape[0]
    for i, p in enumerate(params):
        p.wb = arr["wb"][i].copy()
        p.crf = arr["crf"][i if n_crf > 1 else 0].copy()
    return grid, params, ids, meta


def load_checkpoint(directory, dataset, config_overrides: dict | None = None):
    """Rebuild a Trainer whose next ``step()`` continues the saved run exactly."""
    from .trainer import TrainConfig, Trainer

    d = Path(directory)
    meta = read_meta(d)
    ids = [v.id for v in dataset.views]
    if ids != meta["view_ids"]:
        raise ValueError("checkpoint views do not match the dataset")
    cfg_dict = dict(meta["config"])
    cfg_dict.update(config_overrides or {})
    config = TrainConfig.from_dict(cfg_dict)
    arr = _read_arrays(d / "state.bin")
    header = read_grid(d / "grid.hvxf", np.float64, meta["color_offset"])
    grid = VoxelGrid(header.resolution, header.bounds_min, header.bounds_max, arr["data"],
                     arr["occupancy"].astype(bool), meta["color_offset"])
    _, params = read_tone_records(d / "tonemap.bin")
    trainer = Trainer(dataset, config, grid=grid, tone=params, reference=meta["reference"])
    trainer.wb[:] = arr["wb"]
    trainer.crf[:] = arr["crf"]
    trainer.v_grid = arr["v_grid"]
    trainer.v_wb = arr["v_wb"]
    trainer.v_crf = arr["v_crf"]
    trainer.order = arr["order"]
    trainer.cursor = meta["cursor"]
    trainer.step_count = meta["step"]
    trainer.initial_total = meta["initial_total"]
    trainer.rng.bit_generator.state = meta["rng"]
    return trainer
