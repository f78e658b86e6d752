"""Registered finite-difference checks over every trainable block.

Each check builds a tiny random problem, draws *all* params (biases included)
away from zero so no ReLU sits exactly on its kink, and compares the tape's
gradient against central differences.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffmath as dm
from .detector.loss import compute_loss
from .detector.model import (DetectorParams, Mode, PipelineConfig, Sample, forward, head_forward,
                             lidar_stream_forward, radar_stream_forward)
from .fusion import GateConfig, GatedFusionParams, GateMode, gated_fuse
from .pointcloud import stack_modalities
from .voxel import JointEncoderParams, VoxelGridSpec, encode_voxels, voxelize

EPS = 1e-5
TOLERANCE = 1e-4
SEEDS = (0, 1, 2, 3, 4)

# 8×8 BEV, two z slices: big enough to exercise every code path, small
# enough that full element-wise differencing stays cheap
MICRO_GRID = VoxelGridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0), z_range=(-2.0, 2.0),
                           voxel_size=(0.5, 0.5, 2.0), max_lidar_per_voxel=4, max_radar_per_voxel=4)


def micro_config(mode: Mode = Mode.LR_FULL, gate_mode: GateMode = GateMode.CHANNEL_SPECIFIC) -> PipelineConfig:
    return PipelineConfig(mode=mode, gate=GateConfig(gate_mode), grid=MICRO_GRID, c1=3, c2=2, head_channels=3)


def random_cloud(rng: np.random.Generator, spec: VoxelGridSpec, n_lidar: int, n_radar: int):
    lo, hi = spec.mins, spec.maxs
    lidar = np.column_stack([rng.uniform(lo, hi, (n_lidar, 3)), rng.uniform(0, 1, n_lidar),
                             rng.uniform(0, 0.5, n_lidar)])
    radar = np.column_stack([rng.uniform(lo, hi, (n_radar, 3)), rng.normal(10, 2, n_radar),
                             rng.normal(0, 3, (n_radar, 2)), rng.uniform(0, 0.3, n_radar)])
    return lidar, radar


def randomize(params, rng: np.random.Generator, scale: float = 0.5) -> None:
    for p in params:
        p.data[...] = rng.normal(0.0, scale, p.shape)


def _weighted_sum(t: dm.Tensor, w: np.ndarray) -> dm.Tensor:
    return dm.sum_all(dm.eltwise_mul(t, dm.Tensor(w)))


def _micro_sample(rng, config: PipelineConfig) -> Sample:
    lidar, radar = random_cloud(rng, config.grid, 40, 8)
    lc = stack_modalities(lidar, radar)
    rc = stack_modalities(np.zeros((0, 5)), radar)
    gt = np.array([[rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5), 2.0, -1.0, 1.0, 1.0]])
    return Sample(voxelize(lc, config.grid), voxelize(rc, config.grid.collapsed_z()), gt)


# each builder returns (loss_fn, params)

def _encoder_case(rng):
    lidar, radar = random_cloud(rng, MICRO_GRID, 30, 12)
    grid = voxelize(stack_modalities(lidar, radar), MICRO_GRID)
    enc = JointEncoderParams.init(rng, "encoder")
    randomize(enc.params(), rng)
    w = rng.normal(size=(len(grid), 9))
    return (lambda: _weighted_sum(encode_voxels(grid, enc).features, w)), enc.params()


def _gate_case(which: str, gate_mode: GateMode):
    def build(rng):
        cfg = GateConfig(gate_mode)
        gp = GatedFusionParams.init(rng, 3, 2, cfg)
        randomize(gp.params(), rng)
        L = dm.Tensor(rng.normal(size=(2, 3, 5, 6)))
        R = dm.Tensor(rng.normal(size=(2, 2, 5, 6)))
        w = rng.normal(size=(2, 5, 5, 6))
        params = gp.params()[:2] if which == "lidar" else gp.params()[2:]
        return (lambda: _weighted_sum(gated_fuse(L, R, gp, cfg)[0], w)), params
    return build


def _backbone_case(stream: str):
    def build(rng):
        cfg = micro_config()
        dp = DetectorParams(cfg, seed=int(rng.integers(1 << 31)))
        randomize(dp.params(), rng)
        s = _micro_sample(rng, cfg)
        if stream == "lidar":
            w = rng.normal(size=(1, cfg.c1, *cfg.grid.bev_shape))
            params = [*dp.lidar_encoder.params(), *dp.lidar_conv1, *dp.lidar_conv2]
            return (lambda: _weighted_sum(lidar_stream_forward(s.lidar_grid, dp), w)), params
        w = rng.normal(size=(1, cfg.c2, *cfg.grid.bev_shape))
        params = [*dp.radar_encoder.params(), *dp.radar_conv]
        return (lambda: _weighted_sum(radar_stream_forward(s.radar_grid, dp), w)), params
    return build


def _head_case(rng):
    cfg = micro_config()
    dp = DetectorParams(cfg, seed=int(rng.integers(1 << 31)))
    randomize(dp.params(), rng)
    fused = dm.Tensor(rng.normal(size=(2, cfg.c1 + cfg.c2, *cfg.grid.bev_shape)))
    gts = [np.array([[0.3, -0.4, 1.0, 2.0, 1.0, 1.0]]), np.zeros((0, 6))]

    def loss_fn():
        heat, vel = head_forward(fused, dp)
        return compute_loss(heat, vel, gts, cfg.grid, cfg.velocity_weight)
    return loss_fn, [*dp.head_shared, *dp.head_heat, *dp.head_vel]


def _end_to_end_case(mode: Mode, gate_mode: GateMode = GateMode.CHANNEL_SPECIFIC):
    def build(rng):
        cfg = micro_config(mode, gate_mode)
        dp = DetectorParams(cfg, seed=int(rng.integers(1 << 31)))
        randomize(dp.params(), rng)
        s = _micro_sample(rng, cfg)
        if not mode.stacks_radar:
            lidar_only = s.lidar_grid.points[s.lidar_grid.modality == 0]
            s.lidar_grid = voxelize(stack_modalities(lidar_only[:, :5], np.zeros((0, 7))), cfg.grid)

        def loss_fn():
            out = forward([s], dp)
            return compute_loss(out.heatmap, out.velocity, [s.gt], cfg.grid, cfg.velocity_weight)
        # the blocks above cover every conv in isolation; end to end, check
        # what sits upstream of the fusion point so the whole chain is exercised
        params = [*dp.lidar_encoder.params()]
        if dp.radar_encoder is not None:
            params += dp.radar_encoder.params()
        if dp.gate is not None:
            params += dp.gate.params()
        return loss_fn, params
    return build


@dataclass(frozen=True)
class GradCheck:
    name: str
    build: Callable


REGISTRY: tuple[GradCheck, ...] = (
    GradCheck("encoder.linear4x4", _encoder_case),
    GradCheck("gate.lidar_block", _gate_case("lidar", GateMode.CHANNEL_SPECIFIC)),
    GradCheck("gate.radar_block", _gate_case("radar", GateMode.CHANNEL_SPECIFIC)),
    GradCheck("gate.lidar_block.constant", _gate_case("lidar", GateMode.CHANNEL_CONSTANT)),
    GradCheck("gate.radar_block.constant", _gate_case("radar", GateMode.CHANNEL_CONSTANT)),
    GradCheck("backbone.lidar", _backbone_case("lidar")),
    GradCheck("backbone.radar", _backbone_case("radar")),
    GradCheck("head", _head_case),
    GradCheck("pipeline.LR_FULL", _end_to_end_case(Mode.LR_FULL)),
    GradCheck("pipeline.LR_FULL.constant", _end_to_end_case(Mode.LR_FULL, GateMode.CHANNEL_CONSTANT)),
    GradCheck("pipeline.LR_EARLY_ONLY", _end_to_end_case(Mode.LR_EARLY_ONLY)),
    GradCheck("pipeline.LO", _end_to_end_case(Mode.LO)),
)


def run_checks(seeds=SEEDS, eps: float = EPS, tolerance: float = TOLERANCE, names=None) -> dict:
    """JSON-ready report: per check, max relative error over all seeds and pass/fail."""
    t0 = time.perf_counter()
    checks = []
    for gc in REGISTRY:
        if names is not None and gc.name not in names:
            continue
        errs = []
        for seed in seeds:
            loss_fn, params = gc.build(np.random.default_rng(seed))
            errs.append(dm.grad_check(loss_fn, params, eps))
        worst = max(errs)
        checks.append({"name": gc.name, "max_rel_err": worst, "per_seed": errs,
                       "passed": bool(worst < tolerance)})
    return {"eps": eps, "tolerance": tolerance, "seeds": list(seeds), "checks": checks,
            "passed": all(c["passed"] for c in checks),
            "seconds": time.perf_counter() - t0}
