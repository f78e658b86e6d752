from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrfuse import diffmath as dm
from lrfuse.pointcloud import stack_modalities
from lrfuse.voxel import (JointEncoderParams, ScatterMode, VoxelFeatures, VoxelGridSpec, bev_support,
                          encode_voxels, merge_grids, scatter_to_bev, voxelize)
from oracles import dense_bin, encode_oracle, random_cloud

SMALL = VoxelGridSpec(x_range=(-4.0, 4.0), y_range=(-4.0, 4.0), z_range=(-3.0, 5.0),
                      voxel_size=(1.0, 1.0, 2.0), max_lidar_per_voxel=5, max_radar_per_voxel=3)


def identity_params(bias=(0.0, 0.0, 0.0, 0.0)):
    return JointEncoderParams(dm.Param(np.eye(4), "w"), dm.Param(np.array(bias, dtype=float), "b"))


def lidar_cloud(xyz):
    xyz = np.atleast_2d(np.asarray(xyz, dtype=float))
    return stack_modalities(np.column_stack([xyz, np.zeros((len(xyz), 2))]), np.zeros((0, 7)))


def test_default_spec_dims():
    spec = VoxelGridSpec()
    assert spec.dims == (128, 128, 4)
    assert spec.bev_shape == (128, 128)
    assert spec.collapsed_z().nz == 1


def test_spec_rejects_non_divisible():
    with pytest.raises(dm.ConfigurationError):
        VoxelGridSpec(x_range=(0.0, 1.0), voxel_size=(0.3, 0.5, 2.0))
    with pytest.raises(dm.ConfigurationError):
        VoxelGridSpec(voxel_size=(0.0, 0.5, 2.0))


def test_single_point_one_cell():
    grid = voxelize(lidar_cloud([0.0, 0.0, 1.0]), SMALL)
    assert grid.keys() == [(4, 4, 2)]
    assert (4, 4, 2) in grid


def test_upper_boundary_dropped():
    grid = voxelize(lidar_cloud([[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 5.0], [-4.0, -4.0, -3.0]]), SMALL)
    assert grid.keys() == [(0, 0, 0)]


def test_binning_matches_dense_oracle():
    rng = np.random.default_rng(0)
    lidar, _ = random_cloud(rng, 1000, 0, lo=(-5, -5, -4), hi=(5, 5, 6))
    cloud = stack_modalities(lidar, np.zeros((0, 7)))
    spec = VoxelGridSpec(x_range=(-4.0, 4.0), y_range=(-4.0, 4.0), z_range=(-3.0, 5.0),
                         voxel_size=(1.0, 1.0, 2.0), max_lidar_per_voxel=1000, max_radar_per_voxel=8)
    grid = voxelize(cloud, spec)
    oracle = dense_bin(cloud.points, spec)
    assert sorted(grid.keys()) == sorted(oracle)
    for key, members in oracle.items():
        np.testing.assert_array_equal(grid.cell(key).lidar, cloud.points[members])


def test_truncation_keeps_first_points_per_modality():
    pts = np.column_stack([np.full((8, 3), 0.1), np.arange(8.0), np.zeros(8)])
    radar = np.column_stack([np.full((6, 3), 0.1), np.arange(6.0), np.zeros((6, 3))])
    grid = voxelize(stack_modalities(pts, radar), SMALL)
    cell = grid.cell((4, 4, 1))
    assert cell.lidar[:, 3].tolist() == [0, 1, 2, 3, 4]
    assert cell.radar[:, 5].tolist() == [0, 1, 2]


def test_single_lidar_point_features():
    grid = voxelize(stack_modalities([[0.2, 0.3, 0.4, 0.7, 0.05]], np.zeros((0, 7))), SMALL)
    feat = encode_voxels(grid, identity_params((1.0, 2.0, 3.0, 4.0))).features.data[0]
    np.testing.assert_array_equal(feat, [0.2, 0.3, 0.4, 0.7, 0.05, 0, 0, 0, 0])


def test_centroid_over_all_points():
    grid = voxelize(stack_modalities([[0.0, 0.0, 0.0, 1.0, 0.0]], [[2.0, 0.0, 0.0, 5.0, 1.0, 1.0, 0.0]]),
                    VoxelGridSpec(x_range=(-4.0, 4.0), y_range=(-4.0, 4.0), z_range=(-4.0, 4.0),
                                  voxel_size=(4.0, 4.0, 4.0)))
    feat = encode_voxels(grid, identity_params()).features.data
    assert feat.shape == (1, 9)
    np.testing.assert_allclose(feat[0, :3], [1.0, 0.0, 0.0])


def test_radar_mean_identity_weight():
    radar = np.array([[0.1, 0.1, 0.1, 10.0, 1.0, -1.0, 0.0],
                      [0.2, 0.2, 0.2, 12.0, 2.0, -2.0, 0.05],
                      [0.3, 0.3, 0.3, 14.0, 3.0, -3.0, 0.10]])
    grid = voxelize(stack_modalities(np.zeros((0, 5)), radar), SMALL)
    feat = encode_voxels(grid, identity_params()).features.data[0]
    np.testing.assert_allclose(feat[5:], [12.0, 2.0, -2.0, 0.05], atol=1e-15)
    assert feat[3] == 0 and feat[4] == 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), n_lidar=st.integers(0, 200), n_radar=st.integers(0, 60))
def test_encoder_matches_oracle(seed, n_lidar, n_radar):
    rng = np.random.default_rng(seed)
    lidar, radar = random_cloud(rng, n_lidar, n_radar)
    cloud = stack_modalities(lidar, radar)
    params = JointEncoderParams(dm.Param(rng.normal(size=(4, 4)), "w"), dm.Param(rng.normal(size=4), "b"))
    got = encode_voxels(voxelize(cloud, SMALL), params).as_dict()
    want = encode_oracle(cloud.points, cloud.modality, SMALL, params.weight.data, params.bias.data)
    assert set(got) == set(want)
    for key, feat in want.items():
        np.testing.assert_allclose(got[key], feat, rtol=0, atol=1e-12)


def test_no_radar_cells_stay_zero_with_bias():
    rng = np.random.default_rng(5)
    lidar, _ = random_cloud(rng, 100, 0)
    grid = voxelize(stack_modalities(lidar, np.zeros((0, 7))), SMALL)
    feats = encode_voxels(grid, identity_params((3.0, -1.0, 2.0, 7.0))).features.data
    assert np.all(feats[:, 5:] == 0.0)


def test_encoder_gradient():
    rng = np.random.default_rng(6)
    lidar, radar = random_cloud(rng, 80, 30)
    grid = voxelize(stack_modalities(lidar, radar), SMALL)
    params = JointEncoderParams(dm.Param(rng.normal(size=(4, 4)), "w"), dm.Param(rng.normal(size=4), "b"))
    r = rng.normal(size=(len(grid), 9))
    loss = lambda: dm.sum_all(dm.eltwise_mul(encode_voxels(grid, params).features, dm.Tensor(r)))  # noqa: E731
    assert dm.grad_check(loss, params.params()) < 1e-4


def _features(coords, feats):
    return VoxelFeatures(np.asarray(coords, dtype=np.int64), dm.Tensor(np.asarray(feats, dtype=float)))


def test_scatter_single_voxel():
    bev = scatter_to_bev(_features([[0, 2, 3, 1]], [np.arange(1.0, 10.0)]), SMALL, ScatterMode.PILLAR).data
    assert bev.shape == (1, 9, 8, 8)
    nonzero = np.argwhere(np.any(bev != 0, axis=1))
    assert nonzero.tolist() == [[0, 3, 2]]


def test_scatter_zslice_and_pillar_two_voxels():
    f0, f1 = np.arange(1.0, 10.0), np.arange(11.0, 20.0)
    vf = _features([[0, 2, 3, 0], [0, 2, 3, 1]], [f0, f1])
    z = scatter_to_bev(vf, SMALL, ScatterMode.ZSLICE).data
    assert z.shape == (1, 36, 8, 8)
    np.testing.assert_array_equal(z[0, 0:9, 3, 2], f0)
    np.testing.assert_array_equal(z[0, 9:18, 3, 2], f1)
    assert np.count_nonzero(z) == 18
    p = scatter_to_bev(vf, SMALL, "PILLAR").data
    np.testing.assert_allclose(p[0, :, 3, 2], (f0 + f1) / 2)


def test_scatter_rejects_out_of_grid():
    with pytest.raises(dm.ContractError):
        scatter_to_bev(_features([[0, 8, 0, 0]], [np.ones(9)]), SMALL, ScatterMode.PILLAR)


def test_merge_grids_batches():
    rng = np.random.default_rng(9)
    grids = [voxelize(stack_modalities(*random_cloud(rng, 20, 5)), SMALL) for _ in range(3)]
    merged = merge_grids(grids)
    assert merged.batch_size == 3
    vf = encode_voxels(merged, identity_params())
    bev = scatter_to_bev(vf, SMALL, ScatterMode.ZSLICE).data
    for b, g in enumerate(grids):
        single = scatter_to_bev(encode_voxels(g, identity_params()), SMALL, ScatterMode.ZSLICE).data
        np.testing.assert_allclose(bev[b], single[0], atol=1e-12)
    support = bev_support(vf, SMALL)
    assert np.array_equal(support, np.any(bev != 0, axis=1) | support)
