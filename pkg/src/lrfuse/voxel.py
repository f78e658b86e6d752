"""Sparse voxelization, the joint voxel feature encoder and BEV scatter."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from . import diffmath as dm
from .pointcloud import STACKED_WIDTH, Modality, StackedCloud

FEATURE_DIM = 9
RADAR_FEATURE_COLS = slice(5, 9)


class ScatterMode(str, enum.Enum):
    PILLAR = "PILLAR"
    ZSLICE = "ZSLICE"


@dataclass(frozen=True)
class VoxelGridSpec:
    x_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-3.0, 5.0)
    voxel_size: tuple[float, float, float] = (0.5, 0.5, 2.0)
    max_lidar_per_voxel: int = 16
    max_radar_per_voxel: int = 8

    def __post_init__(self):
        for lo_hi, size, axis in zip((self.x_range, self.y_range, self.z_range), self.voxel_size, "xyz"):
            if size <= 0:
                raise dm.ConfigurationError(f"voxel size along {axis} must be > 0")
            n = (lo_hi[1] - lo_hi[0]) / size
            if lo_hi[1] <= lo_hi[0] or abs(n - round(n)) > 1e-9:
                raise dm.ConfigurationError(
                    f"{axis} extent {lo_hi} is not a positive multiple of voxel size {size}")
        if self.max_lidar_per_voxel < 1 or self.max_radar_per_voxel < 1:
            raise dm.ConfigurationError("max points per voxel must be >= 1")

    @property
    def mins(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]])

    @property
    def maxs(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]])

    @property
    def dims(self) -> tuple[int, int, int]:
        """(nx, ny, nz) cell counts."""
        return tuple(int(round((hi - lo) / s)) for (lo, hi), s in
                     zip((self.x_range, self.y_range, self.z_range), self.voxel_size))

    @property
    def nz(self) -> int:
        return self.dims[2]

    @property
    def bev_shape(self) -> tuple[int, int]:
        """(H, W) = (ny, nx)."""
        nx, ny, _ = self.dims
        return ny, nx

    def collapsed_z(self) -> "VoxelGridSpec":
        """Same BEV footprint with a single z slice spanning the full height (pillars)."""
        dz = self.z_range[1] - self.z_range[0]
        return replace(self, voxel_size=(self.voxel_size[0], self.voxel_size[1], dz))

    def cell_centers_xy(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of every BEV cell center, each shaped (H, W)."""
        nx, ny, _ = self.dims
        xs = self.x_range[0] + (np.arange(nx) + 0.5) * self.voxel_size[0]
        ys = self.y_range[0] + (np.arange(ny) + 0.5) * self.voxel_size[1]
        return np.meshgrid(xs, ys)  # xy indexing gives (ny, nx)


@dataclass
class VoxelCell:
    lidar: np.ndarray  # (n, 9) stacked points
    radar: np.ndarray


@dataclass
class SparseVoxelGrid:
    """Non-empty cells only.

    ``coords`` is (V, 4) int64 of (batch, ix, iy, iz), sorted
    lexicographically.  ``points``/``modality`` hold the kept points grouped
    by cell (input order within a cell) and ``cell_index`` maps each point to
    its row in ``coords``.
    """

    spec: VoxelGridSpec
    coords: np.ndarray
    points: np.ndarray
    modality: np.ndarray
    cell_index: np.ndarray
    batch_size: int = 1

    def __len__(self) -> int:
        return self.coords.shape[0]

    def keys(self) -> list[tuple[int, int, int]]:
        return [tuple(int(v) for v in c[1:]) for c in self.coords]

    def _row(self, coord, batch: int = 0) -> int:
        key = np.array([batch, *coord])
        hits = np.flatnonzero((self.coords == key).all(axis=1))
        if hits.size == 0:
            raise KeyError(coord)
        return int(hits[0])

    def __contains__(self, coord) -> bool:
        try:
            self._row(coord)
        except KeyError:
            return False
        return True

    def cell(self, coord, batch: int = 0) -> VoxelCell:
        row = self._row(coord, batch)
        sel = self.cell_index == row
        pts, mod = self.points[sel], self.modality[sel]
        return VoxelCell(pts[mod == Modality.LIDAR], pts[mod == Modality.RADAR])


def _voxel_indices(xyz: np.ndarray, spec: VoxelGridSpec) -> tuple[np.ndarray, np.ndarray]:
    mins, maxs = spec.mins, spec.maxs
    inside = np.all((xyz >= mins) & (xyz < maxs), axis=1)
    idx = np.floor((xyz[inside] - mins) / np.array(spec.voxel_size)).astype(np.int64)
    # guard float rounding just below the upper bound
    idx = np.minimum(idx, np.array(spec.dims) - 1)
    return inside, idx


def voxelize(cloud: StackedCloud, spec: VoxelGridSpec, batch: int = 0) -> SparseVoxelGrid:
    """Bin points into half-open voxels, keeping the first max points per modality per cell."""
    pts = np.asarray(cloud.points, dtype=np.float64).reshape(-1, STACKED_WIDTH)
    mod = np.asarray(cloud.modality, dtype=np.uint8)
    inside, idx = _voxel_indices(pts[:, :3], spec)
    pts, mod = pts[inside], mod[inside]
    nx, ny, nz = spec.dims
    key = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
    group = key * 2 + mod
    order = np.argsort(group, kind="stable")
    sorted_group = group[order]
    starts = np.flatnonzero(np.r_[True, sorted_group[1:] != sorted_group[:-1]]) if order.size else np.zeros(0, int)
    first = np.repeat(starts, np.diff(np.r_[starts, order.size]))
    rank = np.arange(order.size) - first
    cap = np.where(mod[order] == Modality.RADAR, spec.max_radar_per_voxel, spec.max_lidar_per_voxel)
    kept = order[rank < cap]
    # regroup by cell (lidar and radar of one cell together), input order within a cell
    kept = kept[np.lexsort((kept, key[kept]))]
    ukeys, cell_index = np.unique(key[kept], return_inverse=True)
    coords = np.stack([
        np.full(ukeys.size, batch, dtype=np.int64),
        ukeys // (ny * nz),
        (ukeys // nz) % ny,
        ukeys % nz,
    ], axis=1)
    return SparseVoxelGrid(spec, coords, pts[kept], mod[kept], cell_index.astype(np.int64), batch + 1)


def merge_grids(grids: list[SparseVoxelGrid]) -> SparseVoxelGrid:
    """Concatenate per-sample grids into one batched grid (batch id = list position)."""
    if not grids:
        raise ValueError("merge_grids needs at least one grid")
    coords, points, mods, cells = [], [], [], []
    offset = 0
    for b, g in enumerate(grids):
        c = g.coords.copy()
        c[:, 0] = b
        coords.append(c)
        points.append(g.points)
        mods.append(g.modality)
        cells.append(g.cell_index + offset)
        offset += len(g)
    return SparseVoxelGrid(grids[0].spec, np.concatenate(coords), np.concatenate(points),
                           np.concatenate(mods), np.concatenate(cells), len(grids))


@dataclass
class JointEncoderParams:
    weight: dm.Param  # 4×4, applied as mean_row @ weight
    bias: dm.Param

    @classmethod
    def init(cls, rng: np.random.Generator, prefix: str = "encoder") -> "JointEncoderParams":
        w = np.eye(4) + rng.normal(0.0, 0.01, size=(4, 4))
        return cls(dm.Param(w, f"{prefix}.weight"), dm.Param(np.zeros(4), f"{prefix}.bias"))

    def params(self) -> list[dm.Param]:
        return [self.weight, self.bias]


@dataclass
class VoxelFeatures:
    coords: np.ndarray  # (V, 4) batch, ix, iy, iz
    features: dm.Tensor  # (V, 9)
    batch_size: int = 1

    def as_dict(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(int(v) for v in c[1:]): f for c, f in zip(self.coords, self.features.data)}


def _cell_means(values: np.ndarray, cells: np.ndarray, n_cells: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(cells, minlength=n_cells).astype(np.float64)
    sums = np.stack([np.bincount(cells, weights=values[:, j], minlength=n_cells)
                     for j in range(values.shape[1])], axis=1) if values.shape[1] else np.zeros((n_cells, 0))
    means = np.zeros_like(sums)
    nz = counts > 0
    means[nz] = sums[nz] / counts[nz, None]
    return means, counts


def encode_voxels(grid: SparseVoxelGrid, params: JointEncoderParams) -> VoxelFeatures:
    """Per-cell 9-dim features: centroid of all points, lidar attribute means,
    and the 4×4 linear layer applied to radar attribute means.

    Cells without radar points skip the linear layer and keep zeros there.
    """
    V = len(grid)
    pts, cells = grid.points, grid.cell_index
    centroid, _ = _cell_means(pts[:, 0:3], cells, V)
    is_lidar = grid.modality == Modality.LIDAR
    lidar_mean, _ = _cell_means(pts[is_lidar][:, 3:5], cells[is_lidar], V)
    radar_mean, radar_count = _cell_means(pts[~is_lidar][:, 5:9], cells[~is_lidar], V)
    base = np.zeros((V, FEATURE_DIM))
    base[:, 0:3] = centroid
    base[:, 3:5] = lidar_mean
    rows = np.flatnonzero(radar_count > 0)
    if rows.size == 0:
        return VoxelFeatures(grid.coords, dm.Tensor(base), grid.batch_size)
    radar_feat = dm.linear_forward(dm.Tensor(radar_mean[rows]), params.weight, params.bias)
    index = rows[:, None] * FEATURE_DIM + np.arange(5, 9)[None, :]
    placed = dm.scatter_add(radar_feat, index, (V, FEATURE_DIM))
    return VoxelFeatures(grid.coords, dm.add(dm.Tensor(base), placed), grid.batch_size)


def scatter_to_bev(vf: VoxelFeatures, spec: VoxelGridSpec, mode: ScatterMode | str) -> dm.Tensor:
    """Dense B×C×H×W map from voxel features.

    PILLAR: C = 9, voxels sharing a column are mean-pooled.
    ZSLICE: C = 9·nz, slice iz occupies channels [9·iz, 9·iz + 9).
    """
    mode = ScatterMode(mode)
    nx, ny, nz = spec.dims
    H, W = ny, nx
    B = vf.batch_size
    c = vf.coords
    if c.size and (c[:, 1].min() < 0 or c[:, 1].max() >= nx or c[:, 2].min() < 0 or c[:, 2].max() >= ny
                   or c[:, 3].min() < 0 or c[:, 3].max() >= nz or c[:, 0].min() < 0 or c[:, 0].max() >= B):
        raise dm.ContractError("voxel coordinate outside the BEV grid")
    f = np.arange(FEATURE_DIM)[None, :]
    b, ix, iy, iz = (c[:, j:j + 1] for j in range(4))
    if mode == ScatterMode.ZSLICE:
        C = FEATURE_DIM * nz
        index = ((b * C + FEATURE_DIM * iz + f) * H + iy) * W + ix
        return dm.scatter_add(vf.features, index, (B, C, H, W))
    C = FEATURE_DIM
    column = (c[:, 0] * H + c[:, 2]) * W + c[:, 1]
    _, inv, counts = np.unique(column, return_inverse=True, return_counts=True)
    weights = 1.0 / counts[inv]
    index = ((b * C + f) * H + iy) * W + ix
    return dm.scatter_add(vf.features, index, (B, C, H, W), weights=weights)


def bev_support(vf: VoxelFeatures, spec: VoxelGridSpec) -> np.ndarray:
    """B×H×W mask of BEV columns holding at least one voxel."""
    H, W = spec.bev_shape
    mask = np.zeros((vf.batch_size, H, W), dtype=bool)
    mask[vf.coords[:, 0], vf.coords[:, 2], vf.coords[:, 1]] = True
    return mask
