"""Point cloud to LiDAR BEV: voxelize, encode per voxel, compress along z.

The voxel encoder is a shared two-layer perceptron applied to each occupied
voxel's mean point feature; empty voxels stay zero. Compression concatenates
the z slices channel-wise and applies one affine projection. Aggregation runs
in ascending voxel-index order with content tiebreaks, so the result is
bit-identical under any input point permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import DimensionError, LinearParams, Tensor


@dataclass(frozen=True)
class VoxelConfig:
    size: tuple[float, float, float]  # (sx, sy, sz) meters
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float
    max_cells: int = 1 << 26

    def __post_init__(self):
        if any(s <= 0 for s in self.size):
            raise ValueError("voxel sizes must be positive")
        if self.x_max <= self.x_min or self.y_max <= self.y_min or self.z_max <= self.z_min:
            raise ValueError("voxel range must be non-empty on every axis")
        if self.counts[0] * self.counts[1] * self.counts[2] > self.max_cells:
            raise ValueError("voxel grid exceeds the configured cell cap")

    @property
    def counts(self) -> tuple[int, int, int]:
        return (
            int(np.ceil((self.x_max - self.x_min) / self.size[0] - 1e-9)),
            int(np.ceil((self.y_max - self.y_min) / self.size[1] - 1e-9)),
            int(np.ceil((self.z_max - self.z_min) / self.size[2] - 1e-9)),
        )


def desk_voxel_config() -> VoxelConfig:
    return VoxelConfig(size=(0.5, 0.5, 0.4), x_min=-8, x_max=8, y_min=-8, y_max=8, z_min=-0.4, z_max=2.8)


def full_scale_voxel_config() -> VoxelConfig:
    """Production-scale grid: 7.5 cm ground cells over a 108 m square."""
    return VoxelConfig(
        size=(0.075, 0.075, 0.2),
        x_min=-54.0,
        x_max=54.0,
        y_min=-54.0,
        y_max=54.0,
        z_min=-5.0,
        z_max=3.0,
        max_cells=1 << 27,
    )


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied voxels only: (ix, iy, iz) -> (mean 5-feature, point count)."""

    cfg: VoxelConfig
    occupied: dict[tuple[int, int, int], tuple[np.ndarray, int]]

    @property
    def total_points(self) -> int:
        return sum(count for _, count in self.occupied.values())


def voxelize(pc, cfg: VoxelConfig) -> VoxelGrid:
    """Mean-pool point 5-vectors into their owner voxels; drop out-of-range."""
    pts = pc.points
    X, Y, Z = cfg.counts
    if len(pts) == 0:
        return VoxelGrid(cfg=cfg, occupied={})
    ix = np.floor((pts[:, 0] - cfg.x_min) / cfg.size[0]).astype(np.int64)
    iy = np.floor((pts[:, 1] - cfg.y_min) / cfg.size[1]).astype(np.int64)
    iz = np.floor((pts[:, 2] - cfg.z_min) / cfg.size[2]).astype(np.int64)
    ok = (
        (pts[:, 0] >= cfg.x_min) & (pts[:, 0] < cfg.x_max)
        & (pts[:, 1] >= cfg.y_min) & (pts[:, 1] < cfg.y_max)
        & (pts[:, 2] >= cfg.z_min) & (pts[:, 2] < cfg.z_max)
        & (ix < X) & (iy < Y) & (iz < Z)
    )
    pts = pts[ok]
    flat = ix[ok] * (Y * Z) + iy[ok] * Z + iz[ok]
    # Canonical accumulation order: by voxel index, then by point content, so
    # the float sums are identical for any input permutation.
    order = np.lexsort((pts[:, 4], pts[:, 3], pts[:, 2], pts[:, 1], pts[:, 0], flat))
    flat = flat[order]
    pts = pts[order]
    occupied: dict[tuple[int, int, int], tuple[np.ndarray, int]] = {}
    starts = np.flatnonzero(np.r_[True, flat[1:] != flat[:-1]])
    ends = np.r_[starts[1:], len(flat)]
    for s, e in zip(starts, ends):
        f = int(flat[s])
        key = (f // (Y * Z), (f // Z) % Y, f % Z)
        mean = pts[s:e].sum(axis=0) / (e - s)
        occupied[key] = (mean, int(e - s))
    return VoxelGrid(cfg=cfg, occupied=occupied)


@dataclass(frozen=True)
class VoxelEncoderParams:
    hidden: LinearParams  # 5 -> h
    out: LinearParams  # h -> C_m


def encode_voxels(vg: VoxelGrid, params: VoxelEncoderParams) -> Tensor:
    """Dense middle feature [X, Y, Z, C_m]; empty voxels are zero."""
    X, Y, Z = vg.cfg.counts
    c_m = params.out.out_dim
    if params.hidden.in_dim != 5:
        raise DimensionError("voxel encoder expects 5 input features")
    if not vg.occupied:
        return Tensor(np.zeros((X, Y, Z, c_m)))
    keys = list(vg.occupied.keys())  # insertion order is ascending voxel index
    feats = Tensor(np.stack([vg.occupied[k][0] for k in keys]))
    flat_idx = np.array([k[0] * (Y * Z) + k[1] * Z + k[2] for k in keys], dtype=np.int64)
    encoded = nm.linear(nm.relu(nm.linear(feats, params.hidden)), params.out)
    dense = nm.scatter_add(encoded, flat_idx, X * Y * Z)
    return nm.reshape(dense, (X, Y, Z, c_m))


def compress_z(m: Tensor, proj: LinearParams) -> Tensor:
    """Concatenate z slices along channels, project to [X, Y, C_l]."""
    if m.ndim != 4:
        raise DimensionError("compress_z expects [X, Y, Z, C]")
    X, Y, Z, C = m.shape
    if proj.in_dim != Z * C:
        raise DimensionError(f"z projection expects {Z * C} inputs, has {proj.in_dim}")
    stacked = nm.reshape(m, (X, Y, Z * C))
    return nm.linear(stacked, proj)
