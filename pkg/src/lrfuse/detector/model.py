"""Toy two-stream BEV detector around the early and middle fusion modules."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import diffmath as dm
from ..fusion import GateConfig, GatedFusionParams, GateWeights, gated_fuse
from ..pointcloud import StackedCloud, accumulate_sweeps, stack_modalities
from ..voxel import (FEATURE_DIM, JointEncoderParams, ScatterMode, SparseVoxelGrid, VoxelGridSpec,
                     VoxelFeatures, bev_support, encode_voxels, merge_grids, scatter_to_bev, voxelize)


class Mode(str, enum.Enum):
    LO = "LO"
    LR_EARLY_ONLY = "LR_EARLY_ONLY"
    LR_MIDDLE_ONLY = "LR_MIDDLE_ONLY"
    LR_FULL = "LR_FULL"

    @property
    def uses_radar_stream(self) -> bool:
        return self != Mode.LO

    @property
    def stacks_radar(self) -> bool:
        return self in (Mode.LR_EARLY_ONLY, Mode.LR_FULL)

    @property
    def gated(self) -> bool:
        return self in (Mode.LR_MIDDLE_ONLY, Mode.LR_FULL)


@dataclass(frozen=True)
class PipelineConfig:
    mode: Mode = Mode.LR_FULL
    gate: GateConfig = field(default_factory=GateConfig)
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    c1: int = 16
    c2: int = 8
    head_channels: int = 16
    max_lidar_sweeps: int = 10
    max_radar_sweeps: int = 6
    # training
    lr: float = 2e-3
    epochs: int = 10
    batch_size: int = 2
    seed: int = 42
    optimizer: str = "adam"
    momentum: float = 0.0
    # the heat term is a mean over every BEV cell, so it is ~100x smaller than
    # the per-object velocity L1; 0.01 keeps the two within an order of magnitude
    velocity_weight: float = 0.01
    # decoding / evaluation
    score_threshold: float = 0.1
    peak_window: int = 5
    match_radius: float = 2.0
    range_bins: tuple[tuple[float, float], ...] = ((0.0, 12.0), (12.0, 20.0), (20.0, 32.0))

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.peak_window % 2 == 0:
            raise dm.ConfigurationError("peak window must be odd")
        if min(self.c1, self.c2, self.head_channels) < 1 or self.batch_size < 1:
            raise dm.ConfigurationError("channel widths and batch size must be >= 1")


@dataclass
class Sample:
    """Param-independent per-scene inputs, voxelized once and reused every epoch."""

    lidar_grid: SparseVoxelGrid
    radar_grid: SparseVoxelGrid | None
    gt: np.ndarray
    scene_id: str = ""


def stream_clouds(lidar: np.ndarray, radar: np.ndarray, mode: Mode) -> tuple[StackedCloud, StackedCloud]:
    """(lidar-stream cloud, radar-stream cloud) for a modality mode."""
    empty = np.zeros((0, 7))
    lidar_cloud = stack_modalities(lidar, radar if mode.stacks_radar else empty)
    radar_cloud = stack_modalities(np.zeros((0, 5)), radar)
    return lidar_cloud, radar_cloud


def prepare_sample(scene, config: PipelineConfig) -> Sample:
    lidar = accumulate_sweeps(scene.lidar_sweeps, config.max_lidar_sweeps)
    radar = accumulate_sweeps(scene.radar_sweeps, config.max_radar_sweeps)
    lc, rc = stream_clouds(lidar, radar, config.mode)
    lgrid = voxelize(lc, config.grid)
    rgrid = voxelize(rc, config.grid.collapsed_z()) if config.mode.uses_radar_stream else None
    return Sample(lgrid, rgrid, scene.gt, scene.scene_id)


class DetectorParams:
    """Ordered collection of named params for one pipeline configuration."""

    def __init__(self, config: PipelineConfig, seed: int | None = None):
        rng = np.random.default_rng(config.seed if seed is None else seed)
        nz = config.grid.nz
        self.config = config
        self.lidar_encoder = JointEncoderParams.init(rng, "lidar.encoder")
        self.lidar_conv1 = dm.conv_params(rng, "lidar.conv1", FEATURE_DIM * nz, config.c1, 3)
        self.lidar_conv2 = dm.conv_params(rng, "lidar.conv2", config.c1, config.c1, 3)
        self.radar_encoder = self.radar_conv = self.gate = None
        head_in = config.c1
        if config.mode.uses_radar_stream:
            self.radar_encoder = JointEncoderParams.init(rng, "radar.encoder")
            self.radar_conv = dm.conv_params(rng, "radar.conv", FEATURE_DIM, config.c2, 3)
            head_in = config.c1 + config.c2
        if config.mode.gated:
            self.gate = GatedFusionParams.init(rng, config.c1, config.c2, config.gate)
        self.head_shared = dm.conv_params(rng, "head.shared", head_in, config.head_channels, 3)
        self.head_heat = dm.conv_params(rng, "head.heatmap", config.head_channels, 1, 1)
        self.head_vel = dm.conv_params(rng, "head.velocity", config.head_channels, 2, 1)

    def params(self) -> list[dm.Param]:
        out = [*self.lidar_encoder.params(), *self.lidar_conv1, *self.lidar_conv2]
        if self.radar_encoder is not None:
            out += [*self.radar_encoder.params(), *self.radar_conv]
        if self.gate is not None:
            out += self.gate.params()
        out += [*self.head_shared, *self.head_heat, *self.head_vel]
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        mine = {p.name: p for p in self.params()}
        if set(mine) != set(state):
            missing = sorted(set(mine) ^ set(state))
            raise KeyError(f"checkpoint/param name mismatch: {missing}")
        for name, arr in state.items():
            if arr.shape != mine[name].shape:
                raise dm.DimensionError(f"{name}: checkpoint shape {arr.shape} != {mine[name].shape}")
            mine[name].data[...] = arr


@dataclass
class Outputs:
    heatmap: dm.Tensor  # B×1×H×W logits
    velocity: dm.Tensor  # B×2×H×W
    weights: GateWeights | None
    lidar_map: dm.Tensor
    radar_map: dm.Tensor | None


# fixed per-feature scaling applied to encoded voxels before the first conv of
# each stream: centroid / 32 m, z / 4 m, dt / 0.5 s, rcs and velocities / 10
FEATURE_SCALE = np.array([1 / 32, 1 / 32, 1 / 4, 1.0, 2.0, 0.1, 0.1, 0.1, 2.0])


def _scaled(vf: VoxelFeatures) -> VoxelFeatures:
    scale = dm.Tensor(np.broadcast_to(FEATURE_SCALE, vf.features.shape))
    return VoxelFeatures(vf.coords, dm.eltwise_mul(vf.features, scale), vf.batch_size)


def lidar_stream_forward(grid: SparseVoxelGrid, params: DetectorParams) -> dm.Tensor:
    vf = _scaled(encode_voxels(grid, params.lidar_encoder))
    x = scatter_to_bev(vf, params.config.grid, ScatterMode.ZSLICE)
    x = dm.relu(dm.conv2d_sparse_input(x, *params.lidar_conv1, bev_support(vf, params.config.grid)))
    return dm.relu(dm.conv2d_forward(x, *params.lidar_conv2))


def radar_stream_forward(grid: SparseVoxelGrid, params: DetectorParams) -> dm.Tensor:
    vf = _scaled(encode_voxels(grid, params.radar_encoder))
    spec = params.config.grid.collapsed_z()
    x = scatter_to_bev(vf, spec, ScatterMode.PILLAR)
    return dm.relu(dm.conv2d_sparse_input(x, *params.radar_conv, bev_support(vf, spec)))


def head_forward(fused, params: DetectorParams) -> tuple[dm.Tensor, dm.Tensor]:
    h = dm.relu(dm.conv2d_forward(fused, *params.head_shared))
    return dm.conv2d_forward(h, *params.head_heat), dm.conv2d_forward(h, *params.head_vel)


def forward(samples: Sequence[Sample], params: DetectorParams) -> Outputs:
    cfg = params.config
    L = lidar_stream_forward(merge_grids([s.lidar_grid for s in samples]), params)
    R = weights = None
    fused = L
    if cfg.mode.uses_radar_stream:
        R = radar_stream_forward(merge_grids([s.radar_grid for s in samples]), params)
        if cfg.mode.gated:
            fused, weights = gated_fuse(L, R, params.gate, cfg.gate)
        else:
            fused = dm.concat_channels(L, R)
    heat, vel = head_forward(fused, params)
    return Outputs(heat, vel, weights, L, R)
