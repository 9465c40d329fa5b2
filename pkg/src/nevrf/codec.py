"""Block-SVD compression of aligned per-frame density grids.

A group's grids are cut into s^3 blocks (x-fastest within a block, blocks
ordered frame, then bz, by, bx), stacked into a row matrix M, factored with a
truncated SVD keeping the top eta fraction of the available spectrum, and
the factor rows of blocks whose raw-density sum is below zero are pruned.
The serialized container is bit-exact and little-endian throughout.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import FormatError, SvdError
from .grid import AlignedGroupGrids, DensityGrid

NVDC_MAGIC = b"NVDC"
NVDC_VERSION = 1
_HEADER = struct.Struct("<4sI3I6fIIfIQQf")  # through empty_fill


@dataclass
class BlockLayout:
    """Block partition of one frame's grid (padding filled with empty_raw)."""

    dims: tuple  # (nx, ny, nz) original grid nodes
    block_size: int
    blocks: tuple  # (bx, by, bz) = ceil(dim / s) per axis

    @property
    def blocks_per_frame(self) -> int:
        return int(np.prod(self.blocks))

    @property
    def padded_dims(self) -> tuple:
        s = self.block_size
        return tuple(b * s for b in self.blocks)


@dataclass
class CompressedDensityGroup:
    dims: tuple  # (nx, ny, nz)
    bbox_min: np.ndarray  # (3,) float32
    bbox_max: np.ndarray  # (3,) float32
    n_frames: int
    block_size: int
    eta: float
    k: int
    n_rows: int  # N_v = frames * blocks per frame
    kept_rows: np.ndarray  # (n_kept,) uint64, strictly ascending
    singular: np.ndarray  # (k,) float32
    bt: np.ndarray  # (k, s^3) float32
    u_kept: np.ndarray  # (n_kept, k) float32
    empty_fill: float

    def __post_init__(self):
        s3 = self.block_size**3
        if not (0 < self.k <= min(self.n_rows, s3)):
            raise ValueError("k outside the available spectrum")
        kr = np.asarray(self.kept_rows, dtype=np.uint64)
        if len(kr) and (np.any(np.diff(kr.astype(np.int64)) <= 0) or kr[-1] >= self.n_rows):
            raise ValueError("kept-row ids must be strictly ascending and < N_v")


def block_layout(dims, s: int) -> BlockLayout:
    return BlockLayout(
        dims=tuple(dims),
        block_size=s,
        blocks=tuple(int(math.ceil(d / s)) for d in dims),
    )


def blockify(grids: AlignedGroupGrids, s: int = 8):
    """Stack every s^3 block of every frame into the row matrix M (N_v, s^3)."""
    g0 = grids.grids[0]
    layout = block_layout(g0.dims, s)
    px, py, pz = layout.padded_dims
    rows = []
    for g in grids:
        padded = np.full((px, py, pz), g.empty_raw, dtype=np.float32)
        padded[: g.dims[0], : g.dims[1], : g.dims[2]] = g.values
        zyx = padded.transpose(2, 1, 0)  # (Z, Y, X)
        bz, by, bx = layout.blocks[2], layout.blocks[1], layout.blocks[0]
        blocks = (
            zyx.reshape(bz, s, by, s, bx, s)
            .transpose(0, 2, 4, 1, 3, 5)
            .reshape(layout.blocks_per_frame, s**3)
        )
        rows.append(blocks)
    return np.concatenate(rows, axis=0), layout


def unblockify(
    m: np.ndarray, layout: BlockLayout, bbox_min, bbox_max, n_frames: int,
    empty_raw: float,
) -> AlignedGroupGrids:
    """Inverse of blockify; crops padding back to the original dims."""
    s = layout.block_size
    bx, by, bz = layout.blocks
    px, py, pz = layout.padded_dims
    per = layout.blocks_per_frame
    grids = []
    for f in range(n_frames):
        blocks = m[f * per : (f + 1) * per].reshape(bz, by, bx, s, s, s)
        zyx = blocks.transpose(0, 3, 1, 4, 2, 5).reshape(pz, py, px)
        values = zyx.transpose(2, 1, 0)[: layout.dims[0], : layout.dims[1], : layout.dims[2]]
        grids.append(
            DensityGrid(
                bbox_min=np.asarray(bbox_min, dtype=np.float64),
                bbox_max=np.asarray(bbox_max, dtype=np.float64),
                values=np.ascontiguousarray(values),
                empty_raw=empty_raw,
            )
        )
    return AlignedGroupGrids(grids=grids)


def classify_empty(m: np.ndarray) -> np.ndarray:
    """A block row is empty iff the sum of its raw densities is strictly < 0."""
    return m.sum(axis=1, dtype=np.float64) < 0.0


def jacobi_svd(a: np.ndarray, max_sweeps: int = 30, tol: float = 1e-12):
    """Deterministic one-sided Jacobi SVD (fallback path).

    Returns (U (m, r), S (r,), Vt (r, n)) with r = min(m, n), singular values
    descending. Intended for small matrices; cost is O(sweeps * n^2 * m).
    """
    a = np.asarray(a, dtype=np.float64)
    transposed = a.shape[0] < a.shape[1]
    w = a.T.copy() if transposed else a.copy()
    m, n = w.shape
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = w[:, p] @ w[:, p]
                beta = w[:, q] @ w[:, q]
                gamma = w[:, p] @ w[:, q]
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                wp = w[:, p].copy()
                w[:, p] = c * wp - s * w[:, q]
                w[:, q] = s * wp + c * w[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if not rotated:
            break
    sig = np.linalg.norm(w, axis=0)
    order = np.argsort(-sig, kind="stable")
    sig = sig[order]
    w = w[:, order]
    v = v[:, order]
    u = np.divide(w, np.where(sig > 0, sig, 1.0))
    r = min(m, n)
    if transposed:
        return v[:, :r], sig[:r], u[:, :r].T
    return u[:, :r], sig[:r], v[:, :r].T


def _svd(m: np.ndarray):
    """Thin SVD with a robustness chain: LAPACK gesdd, then gesvd, then the
    deterministic one-sided Jacobi."""
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError:
        pass
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd")
    except Exception:
        pass
    try:
        return jacobi_svd(m)
    except Exception as e:
        raise SvdError("svd-failed") from e


def rank_for(eta: float, n_rows: int, s: int) -> int:
    """k = ceil(eta * min(N_v, s^3)): the fraction applies to the available
    spectrum, never beyond the rank bound."""
    return max(1, int(math.ceil(eta * min(n_rows, s**3))))


def compress(
    grids: AlignedGroupGrids, s: int = 8, eta: float = 0.20
) -> CompressedDensityGroup:
    """Truncated group SVD with empty-row pruning."""
    m, layout = blockify(grids, s)
    n_rows = m.shape[0]
    k = rank_for(eta, n_rows, s)
    u, sig, vt = _svd(m.astype(np.float64))
    u, sig, vt = u[:, :k], sig[:k], vt[:k]
    # deterministic sign: largest-magnitude entry of each right vector positive
    for r in range(k):
        i = int(np.argmax(np.abs(vt[r])))
        if vt[r, i] < 0:
            vt[r] = -vt[r]
            u[:, r] = -u[:, r]
    empty = classify_empty(m)
    kept = np.flatnonzero(~empty).astype(np.uint64)
    g0 = grids.grids[0]
    return CompressedDensityGroup(
        dims=g0.dims,
        bbox_min=g0.bbox_min.astype(np.float32),
        bbox_max=g0.bbox_max.astype(np.float32),
        n_frames=len(grids.grids),
        block_size=s,
        eta=float(eta),
        k=k,
        n_rows=n_rows,
        kept_rows=kept,
        singular=sig.astype(np.float32),
        bt=vt.astype(np.float32),
        u_kept=u[kept.astype(np.int64)].astype(np.float32),
        empty_fill=float(g0.empty_raw),
    )


def decompress(c: CompressedDensityGroup) -> AlignedGroupGrids:
    """Reconstruct kept rows as U diag(sigma) B^T; pruned rows fill empty."""
    s3 = c.block_size**3
    m = np.full((c.n_rows, s3), c.empty_fill, dtype=np.float32)
    if len(c.kept_rows):
        rows = (c.u_kept.astype(np.float64) * c.singular.astype(np.float64)) @ c.bt.astype(
            np.float64
        )
        m[c.kept_rows.astype(np.int64)] = rows.astype(np.float32)
    layout = block_layout(c.dims, c.block_size)
    return unblockify(
        m, layout, c.bbox_min.astype(np.float64), c.bbox_max.astype(np.float64),
        c.n_frames, c.empty_fill,
    )


# ---------------------------------------------------------------------------
# Container serialization
# ---------------------------------------------------------------------------


def serialize(c: CompressedDensityGroup) -> bytes:
    head = _HEADER.pack(
        NVDC_MAGIC,
        NVDC_VERSION,
        *c.dims,
        *[float(v) for v in c.bbox_min],
        *[float(v) for v in c.bbox_max],
        c.n_frames,
        c.block_size,
        c.eta,
        c.k,
        c.n_rows,
        len(c.kept_rows),
        c.empty_fill,
    )
    parts = [
        head,
        np.ascontiguousarray(c.kept_rows, dtype="<u8").tobytes(),
        np.ascontiguousarray(c.singular, dtype="<f4").tobytes(),
        np.ascontiguousarray(c.bt, dtype="<f4").tobytes(),
        np.ascontiguousarray(c.u_kept, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def container_nbytes(c: CompressedDensityGroup) -> int:
    s3 = c.block_size**3
    nk = len(c.kept_rows)
    return _HEADER.size + 8 * nk + 4 * (c.k + c.k * s3 + nk * c.k)


def deserialize(data: bytes) -> CompressedDensityGroup:
    if len(data) < _HEADER.size:
        raise FormatError("truncated container header")
    fields = _HEADER.unpack_from(data, 0)
    magic, version = fields[0], fields[1]
    if magic != NVDC_MAGIC:
        raise FormatError("bad NVDC magic")
    if version != NVDC_VERSION:
        raise FormatError(f"unsupported NVDC version {version}")
    dims = fields[2:5]
    bbox_min = np.array(fields[5:8], dtype=np.float32)
    bbox_max = np.array(fields[8:11], dtype=np.float32)
    n_frames, block_size = fields[11], fields[12]
    eta, k, n_rows, n_kept, empty_fill = (
        fields[13], fields[14], fields[15], fields[16], fields[17],
    )
    s3 = block_size**3
    if block_size == 0 or n_frames == 0:
        raise FormatError("zero block size or frame count")
    if not (0 < k <= min(n_rows, s3)):
        raise FormatError("k outside the available spectrum")
    if n_kept > n_rows:
        raise FormatError("kept-row count exceeds N_v")
    expected = _HEADER.size + 8 * n_kept + 4 * (k + k * s3 + n_kept * k)
    if len(data) != expected:
        raise FormatError(
            f"container length {len(data)} != expected {expected}"
        )
    pos = _HEADER.size

    def take(dtype, count, shape):
        nonlocal pos
        width = np.dtype(dtype).itemsize
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += width * count
        return arr.reshape(shape).copy()

    kept = take("<u8", n_kept, (n_kept,))
    if n_kept and (
        np.any(np.diff(kept.astype(np.int64)) <= 0) or kept[-1] >= n_rows
    ):
        raise FormatError("kept-row ids must be strictly ascending and < N_v")
    singular = take("<f4", k, (k,))
    bt = take("<f4", k * s3, (k, s3))
    u_kept = take("<f4", n_kept * k, (n_kept, k))
    return CompressedDensityGroup(
        dims=tuple(int(d) for d in dims),
        bbox_min=bbox_min,
        bbox_max=bbox_max,
        n_frames=int(n_frames),
        block_size=int(block_size),
        eta=float(eta),
        k=int(k),
        n_rows=int(n_rows),
        kept_rows=kept,
        singular=singular,
        bt=bt,
        u_kept=u_kept,
        empty_fill=float(empty_fill),
    )


def save_container(path: str, c: CompressedDensityGroup) -> None:
    with open(path, "wb") as f:
        f.write(serialize(c))


def load_container(path: str) -> CompressedDensityGroup:
    with open(path, "rb") as f:
        return deserialize(f.read())
