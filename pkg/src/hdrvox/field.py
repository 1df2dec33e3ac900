"""Sparse voxel field of HDR radiance.

Every grid vertex stores 28 scalars: 27 spherical-harmonics coefficients
(3 color channels x 9 basis functions, bands l <= 2) followed by one
opacity density.  Vertices are indexed x-fastest::

    v = ix + (nx + 1) * (iy + (ny + 1) * iz)

Unoccupied vertices keep their stored payload but read as zero.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PAYLOAD_DIM = 28
SH_DIM = 9
SIGMA = 27
GREY_OFFSET = 0.5
INIT_SIGMA = 0.1

# Real SH table (l <= 2), same sign convention as PlenOctrees / svox2:
#   Y0 = C0
#   Y1 = -C1 y     Y2 = C1 z     Y3 = -C1 x
#   Y4 = C2[0] xy  Y5 = C2[1] yz  Y6 = C2[2] (2zz - xx - yy)
#   Y7 = C2[3] xz  Y8 = C2[4] (xx - yy)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_BAND = np.array([0, 1, 1, 1, 2, 2, 2, 2, 2])

GRID_MAGIC = b"HVXF"
GRID_VERSION = 1


class OutOfBoundsError(ValueError):
    pass


@dataclass
class VertexPayload:
    sh: np.ndarray  # (3, 9)
    sigma: float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.sh), [self.sigma]])

    @classmethod
    def from_vector(cls, vec) -> "VertexPayload":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (PAYLOAD_DIM,):
            raise ValueError(f"payload must have {PAYLOAD_DIM} scalars, got {vec.shape}")
        return cls(sh=vec[:27].reshape(3, SH_DIM).copy(), sigma=float(vec[SIGMA]))


@dataclass
class VoxelGrid:
    """Dense-indexed grid with an occupancy mask.

    ``data`` has shape (V, 28) and ``occupancy`` shape (V,), V = prod(res + 1).
    ``color_offset`` is added to the SH sum at evaluation time (0.5 by
    default; 0 when the grey start is folded into the DC coefficient).
    """

    resolution: tuple
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    data: np.ndarray
    occupancy: np.ndarray
    color_offset: float = GREY_OFFSET

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        if len(self.resolution) != 3 or min(self.resolution) < 1:
            raise ValueError(f"resolution must be 3 positive ints, got {self.resolution}")
        if not np.all(self.bounds_min < self.bounds_max):
            raise ValueError("bounds min must be < max on each axis")
        if self.data.shape != (self.num_vertices, PAYLOAD_DIM):
            raise ValueError(f"data shape {self.data.shape} does not match resolution")
        if self.occupancy.shape != (self.num_vertices,):
            raise ValueError("occupancy shape does not match resolution")

    @property
    def vertex_shape(self) -> tuple:
        nx, ny, nz = self.resolution
        return (nx + 1, ny + 1, nz + 1)

    @property
    def num_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return (nx + 1) * (ny + 1) * (nz + 1)

    @property
    def edge(self) -> np.ndarray:
        return (self.bounds_max - self.bounds_min) / np.array(self.resolution, dtype=np.float64)

    def vertex_index(self, ix, iy, iz):
        nx, ny, _ = self.resolution
        return ix + (nx + 1) * (iy + (ny + 1) * iz)

    def vertex_positions(self) -> np.ndarray:
        """(V, 3) world positions in storage order."""
        axes = [
            np.linspace(lo, hi, n + 1)
            for lo, hi, n in zip(self.bounds_min, self.bounds_max, self.resolution)
        ]
        zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)

    def volume(self, column: int) -> np.ndarray:
        """Column of the payload as a (nz+1, ny+1, nx+1) view."""
        nx, ny, nz = self.resolution
        return self.data[:, column].reshape(nz + 1, ny + 1, nx + 1)

    def effective_data(self) -> np.ndarray:
        return np.where(self.occupancy[:, None], self.data, 0.0)

    def payload(self, v: int) -> VertexPayload:
        return VertexPayload.from_vector(self.data[v])

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.bounds_min.copy(), self.bounds_max.copy(),
                         self.data.copy(), self.occupancy.copy(), self.color_offset)


def eval_sh_basis(direction) -> np.ndarray:
    """Nine real SH basis values for a unit direction (or an (..., 3) batch)."""
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("direction must be a unit vector")
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (SH_DIM,))
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * x * y
    out[..., 5] = SH_C2[1] * y * z
    out[..., 6] = SH_C2[2] * (2.0 * z * z - x * x - y * y)
    out[..., 7] = SH_C2[3] * x * z
    out[..., 8] = SH_C2[4] * (x * x - y * y)
    return out


def init_grid(res, bounds, dtype=np.float64, offset_mode: str = "eval") -> VoxelGrid:
    """Fresh grid: zero SH, sigma 0.1, everything occupied.

    ``offset_mode="eval"`` adds the 0.5 grey offset at evaluation time;
    ``"dc"`` instead bakes it into the DC coefficients.
    """
    res = tuple(int(r) for r in res)
    if len(res) != 3 or min(res) < 1:
        raise ValueError(f"resolution must be positive, got {res}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    n = (res[0] + 1) * (res[1] + 1) * (res[2] + 1)
    data = np.zeros((n, PAYLOAD_DIM), dtype=dtype)
    data[:, SIGMA] = INIT_SIGMA
    if offset_mode == "eval":
        offset = GREY_OFFSET
    elif offset_mode == "dc":
        data[:, 0:27:SH_DIM] = GREY_OFFSET / SH_C0
        offset = 0.0
    else:
        raise ValueError(f"unknown offset_mode {offset_mode!r}")
    return VoxelGrid(res, lo, hi, data, np.ones(n, dtype=bool), offset)


def _cell_coords(grid: VoxelGrid, pos):
    pos = np.asarray(pos, dtype=np.float64)
    if np.any(pos < grid.bounds_min) or np.any(pos > grid.bounds_max):
        raise OutOfBoundsError(f"position {pos} outside grid bounds")
    u = (pos - grid.bounds_min) / grid.edge
    res = np.array(grid.resolution)
    cell = np.minimum(np.floor(u).astype(np.int64), res - 1)
    return cell, u - cell


def trilinear_weights(grid: VoxelGrid, pos):
    """Corner indices and weights of the cell enclosing ``pos``.

    Corner ``k`` has offset (k & 1, (k >> 1) & 1, (k >> 2) & 1) in (x, y, z).
    """
    cell, frac = _cell_coords(grid, pos)
    idx = np.empty(8, dtype=np.int64)
    w = np.empty(8)
    for k in range(8):
        o = np.array([k & 1, (k >> 1) & 1, (k >> 2) & 1])
        idx[k] = grid.vertex_index(*(cell + o))
        w[k] = np.prod(np.where(o == 1, frac, 1.0 - frac))
    return idx, w


def interp_payload(grid: VoxelGrid, pos) -> VertexPayload:
    idx, w = trilinear_weights(grid, pos)
    corner = grid.data[idx].astype(np.float64) * grid.occupancy[idx, None]
    return VertexPayload.from_vector(w @ corner)


def eval_radiance(payload: VertexPayload, direction, offset: float = GREY_OFFSET) -> np.ndarray:
    basis = eval_sh_basis(direction)
    return np.maximum(0.0, offset + np.asarray(payload.sh) @ basis)


def radiance_grad_sh(payload: VertexPayload, direction, offset: float = GREY_OFFSET) -> np.ndarray:
    """d radiance[c] / d sh[c, k] as a (3, 9) array (zero on clamped channels)."""
    basis = eval_sh_basis(direction)
    live = (offset + np.asarray(payload.sh) @ basis) > 0.0
    return live[:, None] * basis[None, :]


def sample_field(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """Vectorized trilinear sample of the (occupancy-masked) field at (M, 3) points."""
    pts = np.asarray(points, dtype=np.float64)
    u = (pts - grid.bounds_min) / grid.edge
    res = np.array(grid.resolution)
    u = np.clip(u, 0.0, res)
    cell = np.minimum(np.floor(u).astype(np.int64), res - 1)
    frac = u - cell
    eff = grid.effective_data().astype(np.float64)
    out = np.zeros((len(pts), PAYLOAD_DIM))
    for k in range(8):
        o = np.array([k & 1, (k >> 1) & 1, (k >> 2) & 1])
        c = cell + o
        v = grid.vertex_index(c[:, 0], c[:, 1], c[:, 2])
        w = np.prod(np.where(o == 1, frac, 1.0 - frac), axis=1)
        out += w[:, None] * eff[v]
    return out


def _support_occupied(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """True where any corner with nonzero trilinear weight is occupied."""
    u = (points - grid.bounds_min) / grid.edge
    res = np.array(grid.resolution)
    u = np.clip(u, 0.0, res)
    cell = np.minimum(np.floor(u).astype(np.int64), res - 1)
    frac = u - cell
    out = np.zeros(len(points), dtype=bool)
    for k in range(8):
        o = np.array([k & 1, (k >> 1) & 1, (k >> 2) & 1])
        c = cell + o
        w = np.prod(np.where(o == 1, frac, 1.0 - frac), axis=1)
        out |= (w > 0) & grid.occupancy[grid.vertex_index(c[:, 0], c[:, 1], c[:, 2])]
    return out


def upsample(grid: VoxelGrid, new_res) -> VoxelGrid:
    """Resample onto a finer grid over the same bounds.

    New payloads are trilinear samples of the old field, so integer-factor
    refinement leaves the interpolated field (and every render) unchanged.
    """
    new_res = tuple(int(r) for r in new_res)
    if any(n < o for n, o in zip(new_res, grid.resolution)):
        raise ValueError(f"cannot shrink grid from {grid.resolution} to {new_res}")
    out = init_grid(new_res, (grid.bounds_min, grid.bounds_max), dtype=grid.data.dtype)
    out.color_offset = grid.color_offset
    pts = out.vertex_positions()
    out.data[:] = sample_field(grid, pts)
    out.occupancy[:] = _support_occupied(grid, pts)
    return out


def prune(grid: VoxelGrid, tau_sigma: float) -> VoxelGrid:
    """Drop vertices whose whole 3x3x3 neighborhood has sigma below ``tau_sigma``.

    The neighborhood is exactly the corner set of the (up to) 8 incident
    cells, so vertices bordering any dense cell survive.  Pruning never
    revives a vertex.
    """
    if tau_sigma < 0:
        raise ValueError("tau_sigma must be nonnegative")
    out = grid.copy()
    sig = np.where(grid.occupancy, grid.data[:, SIGMA], 0.0)
    nx, ny, nz = grid.resolution
    vol = sig.reshape(nz + 1, ny + 1, nx + 1)
    local_max = ndimage.maximum_filter(vol, size=3, mode="nearest").ravel()
    out.occupancy &= ~(local_max < tau_sigma)
    return out


def write_grid(path, grid: VoxelGrid) -> None:
    """Binary little-endian checkpoint: header, f32 payloads, occupancy bytes."""
    header = struct.pack(
        "<4sI3I6d", GRID_MAGIC, GRID_VERSION, *grid.resolution,
        *grid.bounds_min, *grid.bounds_max,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())
        f.write(grid.occupancy.astype(np.uint8).tobytes())


def read_grid(path, dtype=np.float64, color_offset: float = GREY_OFFSET) -> VoxelGrid:
    raw = Path(path).read_bytes()
    hsize = struct.calcsize("<4sI3I6d")
    if len(raw) < hsize:
        raise OSError(f"{path}: truncated grid header")
    magic, version, nx, ny, nz, *b = struct.unpack("<4sI3I6d", raw[:hsize])
    if magic != GRID_MAGIC:
        raise OSError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise OSError(f"{path}: unsupported grid version {version}")
    n = (nx + 1) * (ny + 1) * (nz + 1)
    expected = hsize + 4 * PAYLOAD_DIM * n + n
    if len(raw) != expected:
        raise OSError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", count=PAYLOAD_DIM * n, offset=hsize)
    occ = np.frombuffer(raw, dtype=np.uint8, count=n, offset=hsize + 4 * PAYLOAD_DIM * n)
    return VoxelGrid((nx, ny, nz), np.array(b[:3]), np.array(b[3:]),
                     data.reshape(n, PAYLOAD_DIM).astype(dtype), occ.astype(bool), color_offset)
