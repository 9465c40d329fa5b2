"""Per-frame explicit density volumes.

Grids store raw (pre-activation) densities on a node-centered lattice: node
(i, j, k) sits at bbox_min + (i, j, k) * voxel, with the outermost nodes on
the bbox faces. Cell (i, j, k) spans nodes i..i+1 along each axis. Raw values
map to per-step opacity through a shifted softplus, so empty space is
represented by strongly negative raw values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, OutOfBoundsError, ShapeError

# Shifted-softplus activation; EMPTY_RAW maps to near-zero opacity.
DENSITY_SHIFT = -2.0
EMPTY_RAW = -6.0

NVGD_MAGIC = b"NVGD"


@dataclass
class DensityGrid:
    """Dense 3D grid of raw density values with a world-space bounding box."""

    bbox_min: np.ndarray  # (3,)
    bbox_max: np.ndarray  # (3,)
    values: np.ndarray  # (Nx, Ny, Nz), raw densities
    empty_raw: float = EMPTY_RAW

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError("grid values must be 3-dimensional")
        if min(self.values.shape) < 2:
            raise ValueError("grid needs >= 2 nodes per axis")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox min must be < max per axis")

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.array(self.dims) - 1)

    def node_position(self, i: int, j: int, k: int) -> np.ndarray:
        return self.bbox_min + np.array([i, j, k]) * self.voxel_size

    def copy(self) -> "DensityGrid":
        return DensityGrid(
            bbox_min=self.bbox_min.copy(),
            bbox_max=self.bbox_max.copy(),
            values=self.values.copy(),
            empty_raw=self.empty_raw,
        )


def empty_grid(bbox_min, bbox_max, dims, dtype=np.float32, empty_raw=EMPTY_RAW):
    return DensityGrid(
        bbox_min=np.asarray(bbox_min, dtype=np.float64),
        bbox_max=np.asarray(bbox_max, dtype=np.float64),
        values=np.full(tuple(dims), empty_raw, dtype=dtype),
        empty_raw=empty_raw,
    )


@dataclass
class AlignedGroupGrids:
    """One grid per frame of a group, all sharing identical dims and bbox."""

    grids: list

    def __post_init__(self):
        g0 = self.grids[0]
        for g in self.grids[1:]:
            if g.dims != g0.dims:
                raise ShapeError("aligned grids must share dims")
            if not (
                np.array_equal(g.bbox_min, g0.bbox_min)
                and np.array_equal(g.bbox_max, g0.bbox_max)
            ):
                raise ValueError("aligned grids must share a bit-equal bbox")

    def __len__(self) -> int:
        return len(self.grids)

    def __iter__(self):
        return iter(self.grids)


# ---------------------------------------------------------------------------
# Trilinear interpolation
# ---------------------------------------------------------------------------


def _fractional_index(grid: DensityGrid, pts: np.ndarray) -> np.ndarray:
    return (pts - grid.bbox_min) / grid.voxel_size


def interp_weights(grid: DensityGrid, pts: np.ndarray):
    """Trilinear corner indices and weights for a batch of points.

    Returns (flat_idx (N,8) int64 into grid.values C-order, weights (N,8),
    inside (N,) bool). Outside points get all-zero weights (their clamped
    indices stay in range). d(interp)/d(values.flat[flat_idx[n,c]]) = w[n,c].
    Corner order: (dx, dy, dz) with dz fastest.
    """
    pts = np.atleast_2d(np.asarray(pts))
    nx, ny, nz = grid.dims
    f = _fractional_index(grid, pts)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    inside = (
        (fx >= 0.0) & (fx <= nx - 1.0)
        & (fy >= 0.0) & (fy <= ny - 1.0)
        & (fz >= 0.0) & (fz <= nz - 1.0)
    )
    ix = np.minimum(np.clip(fx, 0.0, nx - 1.0).astype(np.int64), nx - 2)
    iy = np.minimum(np.clip(fy, 0.0, ny - 1.0).astype(np.int64), ny - 2)
    iz = np.minimum(np.clip(fz, 0.0, nz - 1.0).astype(np.int64), nz - 2)
    rx = np.clip(fx, 0.0, nx - 1.0) - ix
    ry = np.clip(fy, 0.0, ny - 1.0) - iy
    rz = np.clip(fz, 0.0, nz - 1.0) - iz
    mx, my, mz = 1.0 - rx, 1.0 - ry, 1.0 - rz

    w = np.empty((len(pts), 8), dtype=f.dtype)
    mxmy, mxry, rxmy, rxry = mx * my, mx * ry, rx * my, rx * ry
    w[:, 0] = mxmy * mz
    w[:, 1] = mxmy * rz
    w[:, 2] = mxry * mz
    w[:, 3] = mxry * rz
    w[:, 4] = rxmy * mz
    w[:, 5] = rxmy * rz
    w[:, 6] = rxry * mz
    w[:, 7] = rxry * rz
    w *= inside[:, None]

    flat0 = (ix * ny + iy) * nz + iz
    offsets = np.array(
        [0, 1, nz, nz + 1, ny * nz, ny * nz + 1, (ny + 1) * nz, (ny + 1) * nz + 1]
    )
    flat = flat0[:, None] + offsets
    return flat, w, inside


def interp_density_batch(grid: DensityGrid, pts: np.ndarray, dtype=None) -> np.ndarray:
    """Trilinear raw densities for (N,3) points; outside -> grid.empty_raw."""
    flat, w, inside = interp_weights(grid, pts)
    vals = (grid.values.ravel()[flat] * w).sum(axis=-1)
    out = np.where(inside, vals, grid.empty_raw)
    return out.astype(dtype) if dtype is not None else out


def interp_density(grid: DensityGrid, x) -> float:
    """Raw density at a world point (empty_raw outside the bbox)."""
    return float(interp_density_batch(grid, np.asarray(x, dtype=np.float64)[None])[0])


def interp_gradient(grid: DensityGrid, x):
    """The 8 (flat corner index, trilinear weight) pairs at an inside point.

    Raises OutOfBoundsError outside the bbox: no gradient flows to empty space.
    """
    flat, w, inside = interp_weights(grid, np.asarray(x, dtype=np.float64)[None])
    if not inside[0]:
        raise OutOfBoundsError(f"point {x} outside grid bbox")
    return list(zip(flat[0].tolist(), w[0].tolist()))


def scatter_grid_gradient(grid: DensityGrid, flat, w, grad, inside) -> np.ndarray:
    """Accumulate d(loss)/d(values) from per-point interpolation gradients.

    flat/w from interp_weights, grad (N,) upstream gradients. Returns an array
    shaped like grid.values.
    """
    contrib = (w * grad[:, None]) * inside[:, None]
    g = np.bincount(
        flat.ravel(), weights=contrib.ravel(), minlength=grid.values.size
    )
    return g.reshape(grid.values.shape)


# ---------------------------------------------------------------------------
# Density activation
# ---------------------------------------------------------------------------


def softplus(x):
    x = np.asarray(x)
    return np.logaddexp(0.0, x)


def raw_to_alpha(raw, step, shift: float = DENSITY_SHIFT):
    """Per-sample opacity 1 - exp(-softplus(raw + shift) * step)."""
    sigma = softplus(np.asarray(raw) + shift)
    return -np.expm1(-sigma * step)


def raw_to_alpha_grad(raw, step, shift: float = DENSITY_SHIFT):
    """d(alpha)/d(raw) for the shifted-softplus activation."""
    raw = np.asarray(raw)
    sigma = softplus(raw + shift)
    dsigma = 1.0 / (1.0 + np.exp(-(raw + shift)))  # sigmoid
    return np.exp(-sigma * step) * dsigma * step


def alpha_threshold_raw(alpha: float, step: float = 1.0, shift: float = DENSITY_SHIFT):
    """Raw density at which raw_to_alpha(raw, step) reaches alpha."""
    sigma = -np.log1p(-alpha) / step
    return float(np.log(np.expm1(sigma)) - shift)


# ---------------------------------------------------------------------------
# Cross-frame alignment
# ---------------------------------------------------------------------------


def resample_grid(src: DensityGrid, bbox_min, bbox_max, dims) -> DensityGrid:
    """Trilinearly resample src onto a new lattice; outside fills empty_raw.

    Node positions that coincide with source nodes (within 1e-9 of a lattice
    step) copy values exactly, so integer-voxel shifts are lossless.
    """
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    nx, ny, nz = dims
    axes = [
        np.linspace(bbox_min[a], bbox_max[a], dims[a]) for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    f = _fractional_index(src, pts)
    snapped = np.round(f)
    snap_mask = np.abs(f - snapped) < 1e-9
    f = np.where(snap_mask, snapped, f)

    inside = np.all((f >= 0.0) & (f <= np.array(src.dims) - 1.0), axis=-1)
    fc = np.clip(f, 0.0, np.array(src.dims, dtype=np.float64) - 1.0)
    i0 = np.minimum(fc.astype(np.int64), np.array(src.dims) - 2)
    r = fc - i0

    sx, sy, sz = src.dims
    vals = np.zeros(len(pts), dtype=src.values.dtype)
    v = src.values
    exact = inside & np.all(r == 0.0, axis=-1)
    general = inside & ~exact
    if exact.any():
        ie = i0[exact]
        vals[exact] = v[ie[:, 0], ie[:, 1], ie[:, 2]]
    if general.any():
        ig, rg = i0[general], r[general]
        acc = np.zeros(ig.shape[0], dtype=np.float64)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (rg[:, 0] if dx else 1.0 - rg[:, 0])
                        * (rg[:, 1] if dy else 1.0 - rg[:, 1])
                        * (rg[:, 2] if dz else 1.0 - rg[:, 2])
                    )
                    acc += w * v[ig[:, 0] + dx, ig[:, 1] + dy, ig[:, 2] + dz]
        vals[general] = acc.astype(src.values.dtype)
    vals[~inside] = src.empty_raw
    return DensityGrid(
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        values=vals.reshape(dims),
        empty_raw=src.empty_raw,
    )


def align_group(grids: Sequence[DensityGrid]) -> AlignedGroupGrids:
    """Resample per-frame grids onto the union bbox with a shared lattice.

    The union of input bboxes is snapped outward to whole voxels of the first
    grid's lattice, so inputs that already agree pass through bit-identically.
    """
    if len(grids) == 0:
        raise ValueError("align_group needs at least one grid")
    g0 = grids[0]
    same = all(
        g.dims == g0.dims
        and np.array_equal(g.bbox_min, g0.bbox_min)
        and np.array_equal(g.bbox_max, g0.bbox_max)
        for g in grids
    )
    if same:
        return AlignedGroupGrids(grids=list(grids))

    h = g0.voxel_size
    union_min = np.min([g.bbox_min for g in grids], axis=0)
    union_max = np.max([g.bbox_max for g in grids], axis=0)
    # snap outward onto grid0's lattice (tiny tolerance absorbs fp noise)
    lo_steps = np.floor((union_min - g0.bbox_min) / h + 1e-9)
    hi_steps = np.ceil((union_max - g0.bbox_min) / h - 1e-9)
    new_min = g0.bbox_min + lo_steps * h
    new_max = g0.bbox_min + hi_steps * h
    dims = tuple((hi_steps - lo_steps).astype(int) + 1)
    out = [resample_grid(g, new_min, new_max, dims) for g in grids]
    return AlignedGroupGrids(grids=out)


# ---------------------------------------------------------------------------
# Raw grid dump (debug format; ordering is normative for the codec)
# ---------------------------------------------------------------------------


def grid_flat_values(grid: DensityGrid) -> np.ndarray:
    """Values in x-fastest order (x, then y, then z), float32."""
    return np.ascontiguousarray(
        grid.values.astype(np.float32).transpose(2, 1, 0)
    ).ravel()


def save_nvgd(path: str, grid: DensityGrid) -> None:
    nx, ny, nz = grid.dims
    with open(path, "wb") as f:
        f.write(NVGD_MAGIC)
        f.write(struct.pack("<3I", nx, ny, nz))
        f.write(
            struct.pack(
                "<6f",
                *[float(v) for v in grid.bbox_min],
                *[float(v) for v in grid.bbox_max],
            )
        )
        f.write(grid_flat_values(grid).tobytes())


def load_nvgd(path: str) -> DensityGrid:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NVGD_MAGIC:
        raise FormatError("bad NVGD magic")
    nx, ny, nz = struct.unpack_from("<3I", data, 4)
    bbox = struct.unpack_from("<6f", data, 16)
    n = nx * ny * nz
    if len(data) != 40 + 4 * n:
        raise FormatError("NVGD payload length mismatch")
    flat = np.frombuffer(data, dtype="<f4", count=n, offset=40)
    values = flat.reshape(nz, ny, nx).transpose(2, 1, 0).copy()
    return DensityGrid(
        bbox_min=np.array(bbox[:3], dtype=np.float64),
        bbox_max=np.array(bbox[3:], dtype=np.float64),
        values=values,
    )
