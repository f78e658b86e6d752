"""Adaptive gated fusion of the lidar and radar BEV feature maps."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm


class GateMode(str, enum.Enum):
    CHANNEL_SPECIFIC = "CHANNEL_SPECIFIC"
    CHANNEL_CONSTANT = "CHANNEL_CONSTANT"


class Expert(str, enum.Enum):
    LIDAR = "LIDAR"
    RADAR = "RADAR"


@dataclass(frozen=True)
class GateConfig:
    mode: GateMode = GateMode.CHANNEL_SPECIFIC
    kernel_size: int = 3
    # normalization inside the gate conv block; reserved, only "none" exists
    norm: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "mode", GateMode(self.mode))
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise dm.ConfigurationError(f"gate kernel size must be odd, got {self.kernel_size}")
        if self.norm != "none":
            raise dm.ConfigurationError(f"gate norm {self.norm!r} is not implemented")


@dataclass
class GatedFusionParams:
    lidar_w: dm.Param
    lidar_b: dm.Param
    radar_w: dm.Param
    radar_b: dm.Param

    @classmethod
    def init(cls, rng: np.random.Generator, c1: int, c2: int, config: GateConfig,
             prefix: str = "gate") -> "GatedFusionParams":
        k = config.kernel_size
        constant = config.mode == GateMode.CHANNEL_CONSTANT
        lw, lb = dm.conv_params(rng, f"{prefix}.lidar", c1 + c2, 1 if constant else c1, k)
        rw, rb = dm.conv_params(rng, f"{prefix}.radar", c1 + c2, 1 if constant else c2, k)
        return cls(lw, lb, rw, rb)

    def params(self) -> list[dm.Param]:
        return [self.lidar_w, self.lidar_b, self.radar_w, self.radar_b]


@dataclass
class GateWeights:
    lidar: dm.Tensor  # B×C1×H×W
    radar: dm.Tensor  # B×C2×H×W

    def expert(self, which: Expert | str) -> np.ndarray:
        return (self.lidar if Expert(which) == Expert.LIDAR else self.radar).data


def gated_fuse(lidar_map, radar_map, params: GatedFusionParams,
               config: GateConfig = GateConfig()) -> tuple[dm.Tensor, GateWeights]:
    """Weight each expert map by a sigmoid gate computed from both, then concatenate."""
    L, R = dm.as_tensor(lidar_map), dm.as_tensor(radar_map)
    if L.data.ndim != 4 or R.data.ndim != 4 or L.shape[0] != R.shape[0] or L.shape[2:] != R.shape[2:]:
        raise dm.DimensionError(f"gated_fuse: lidar map {L.shape} and radar map {R.shape} "
                                "must share batch and spatial dims")
    c1, c2 = L.shape[1], R.shape[1]
    cat = dm.concat_channels(L, R)
    # both branches read the same input: run them as one conv, then split
    n_l = params.lidar_w.shape[0]
    logits = dm.conv2d_forward(cat, dm.concat_axis0([params.lidar_w, params.radar_w]),
                               dm.concat_axis0([params.lidar_b, params.radar_b]))
    w_l = dm.sigmoid(dm.slice_channels(logits, 0, n_l))
    w_r = dm.sigmoid(dm.slice_channels(logits, n_l, logits.shape[1]))
    if config.mode == GateMode.CHANNEL_CONSTANT:
        w_l = dm.broadcast_channels(w_l, c1)
        w_r = dm.broadcast_channels(w_r, c2)
    if w_l.shape[1] != c1 or w_r.shape[1] != c2:
        raise dm.DimensionError(f"gate outputs {w_l.shape[1]}/{w_r.shape[1]} channels, "
                                f"expected {c1}/{c2}")
    fused = dm.concat_channels(dm.eltwise_mul(w_l, L), dm.eltwise_mul(w_r, R))
    return fused, GateWeights(w_l, w_r)


def export_weight_map(weights: GateWeights, expert: Expert | str, batch: int = 0) -> np.ndarray:
    """H×W channel mean of one expert's weights for a single batch entry."""
    return weights.expert(expert)[batch].mean(axis=0)


def range_masks(radius: np.ndarray, bins: list[tuple[float, float]]) -> list[np.ndarray]:
    return [(radius >= lo) & (radius < hi) for lo, hi in bins]


def gate_stats(weights: GateWeights, bins: list[tuple[float, float]],
               cell_xy: tuple[np.ndarray, np.ndarray]) -> dict:
    """Mean gate weight per expert, overall and per annulus ``[lo, hi)`` around the ego.

    Bins with no cells are reported as ``None``.
    """
    x, y = cell_xy
    masks = range_masks(np.hypot(x, y), bins)
    out = {}
    for expert in Expert:
        w = weights.expert(expert)  # B×C×H×W
        per_cell = w.mean(axis=(0, 1))
        out[expert.value.lower()] = {
            "mean": float(w.mean()),
            "bins": [float(per_cell[m].mean()) if m.any() else None for m in masks],
        }
    return out
