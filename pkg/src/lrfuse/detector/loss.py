from __future__ import annotations

from typing import Sequence

import numpy as np

from .. import diffmath as dm
from ..voxel import VoxelGridSpec


def gt_cells(gt: np.ndarray, spec: VoxelGridSpec) -> tuple[np.ndarray, np.ndarray]:
    """(iy, ix) BEV cell of each gt center."""
    nx, ny, _ = spec.dims
    ix = np.floor((gt[:, 0] - spec.x_range[0]) / spec.voxel_size[0]).astype(np.int64)
    iy = np.floor((gt[:, 1] - spec.y_range[0]) / spec.voxel_size[1]).astype(np.int64)
    if gt.shape[0] and (ix.min() < 0 or ix.max() >= nx or iy.min() < 0 or iy.max() >= ny):
        raise dm.ContractError("gt box center outside the BEV grid")
    return iy, ix


def heatmap_target(gt: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """H×W max over boxes of an axis-aligned Gaussian at each gt center.

    Per-axis sigma in cells is max(1, half the box extent in cells).
    """
    H, W = spec.bev_shape
    dx, dy = spec.voxel_size[0], spec.voxel_size[1]
    target = np.zeros((H, W))
    cx = np.arange(W) + 0.5
    cy = np.arange(H) + 0.5
    for x, y, _vx, _vy, wx, wy in gt:
        gx = (x - spec.x_range[0]) / dx
        gy = (y - spec.y_range[0]) / dy
        sx = max(1.0, wx / 2 / dx)
        sy = max(1.0, wy / 2 / dy)
        g = np.exp(-((cy[:, None] - gy) ** 2) / (2 * sy * sy) - ((cx[None, :] - gx) ** 2) / (2 * sx * sx))
        np.maximum(target, g, out=target)
    return target


def compute_loss(heatmap: dm.Tensor, velocity: dm.Tensor, gts: Sequence[np.ndarray], spec: VoxelGridSpec,
                 velocity_weight: float = 0.1) -> dm.Tensor:
    """MSE between sigmoid(heatmap) and the Gaussian splat, plus a weighted L1
    velocity term read at gt-center cells (mean over the 2·n_gt entries)."""
    B, _, H, W = heatmap.shape
    target = np.stack([heatmap_target(g, spec) for g in gts])[:, None]
    loss = dm.mean_all(dm.square(dm.sub(dm.sigmoid(heatmap), dm.Tensor(target))))
    idx, vals = [], []
    for b, g in enumerate(gts):
        if g.shape[0] == 0:
            continue
        iy, ix = gt_cells(g, spec)
        base = b * 2 * H * W + iy * W + ix
        idx.append(np.stack([base, base + H * W], axis=1))
        vals.append(g[:, 2:4])
    if idx:
        pred = dm.gather(velocity, np.concatenate(idx))
        l1 = dm.mean_all(dm.absolute(dm.sub(pred, dm.Tensor(np.concatenate(vals)))))
        loss = dm.add(loss, dm.scale(l1, velocity_weight))
    return loss
