"""Independent slow references used by the tests.  Plain Python loops, no
shared code with the package beyond the input types."""
from __future__ import annotations

import math

import numpy as np


def dense_bin(points, spec):
    """{(ix, iy, iz): [point indices in input order]} by explicit per-point floor."""
    nx, ny, nz = spec.dims
    cells = {}
    for n, p in enumerate(points):
        x, y, z = float(p[0]), float(p[1]), float(p[2])
        if not (spec.x_range[0] <= x < spec.x_range[1] and spec.y_range[0] <= y < spec.y_range[1]
                and spec.z_range[0] <= z < spec.z_range[1]):
            continue
        key = (min(int(math.floor((x - spec.x_range[0]) / spec.voxel_size[0])), nx - 1),
               min(int(math.floor((y - spec.y_range[0]) / spec.voxel_size[1])), ny - 1),
               min(int(math.floor((z - spec.z_range[0]) / spec.voxel_size[2])), nz - 1))
        cells.setdefault(key, []).append(n)
    return cells


def encode_oracle(points, modality, spec, weight, bias):
    """{cell: 9-vector} with per-modality truncation to the first max points."""
    out = {}
    for key, members in dense_bin(points, spec).items():
        lid = [i for i in members if modality[i] == 0][:spec.max_lidar_per_voxel]
        rad = [i for i in members if modality[i] == 1][:spec.max_radar_per_voxel]
        kept = lid + rad
        feat = [0.0] * 9
        for d in range(3):
            feat[d] = sum(float(points[i][d]) for i in kept) / len(kept)
        if lid:
            for d in (3, 4):
                feat[d] = sum(float(points[i][d]) for i in lid) / len(lid)
        if rad:
            mean = [sum(float(points[i][5 + d]) for i in rad) / len(rad) for d in range(4)]
            for j in range(4):
                feat[5 + j] = sum(mean[i] * float(weight[i][j]) for i in range(4)) + float(bias[j])
        out[key] = feat
    return out


def brute_ap(scores, is_tp, n_gt):
    """All-point AP: sum over recall steps of the max precision at any recall >= that step."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    prec, rec = [], []
    tp = 0
    for rank, i in enumerate(order, start=1):
        tp += is_tp[i]
        prec.append(tp / rank)
        rec.append(tp / n_gt)
    ap, prev = 0.0, 0.0
    for k, r in enumerate(rec):
        if r > prev:
            ap += (r - prev) * max(prec[k:])
            prev = r
    return ap


def random_cloud(rng, n_lidar, n_radar, lo=(-4.0, -4.0, -3.0), hi=(4.0, 4.0, 5.0)):
    lo, hi = np.array(lo), np.array(hi)
    lidar = np.column_stack([rng.uniform(lo, hi, (n_lidar, 3)), rng.uniform(0, 1, n_lidar),
                             rng.uniform(0, 0.5, n_lidar)])
    radar = np.column_stack([rng.uniform(lo, hi, (n_radar, 3)), rng.normal(10, 3, n_radar),
                             rng.normal(0, 4, (n_radar, 2)), rng.uniform(0, 0.3, n_radar)])
    return lidar, radar
