"""LiDAR / radar point records, sweep accumulation and zero-padded stacking.

Points are kept as float64 numpy arrays with fixed column layouts:

* lidar: ``x, y, z, intensity, dt``
* radar: ``x, y, z, rcs, vx_comp, vy_comp, dt``
* stacked: ``x, y, z, intensity, dt_l, rcs, vx_comp, vy_comp, dt_r``
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

LIDAR_WIDTH = 5
RADAR_WIDTH = 7
STACKED_WIDTH = 9

# stacked columns holding each modality's attributes
LIDAR_ATTR_COLS = (3, 4)
RADAR_ATTR_COLS = (5, 6, 7, 8)


class Modality(enum.IntEnum):
    LIDAR = 0
    RADAR = 1


@dataclass(frozen=True)
class LidarPoint:
    x: float
    y: float
    z: float
    intensity: float
    dt: float = 0.0

    def as_row(self) -> list[float]:
        return [self.x, self.y, self.z, self.intensity, self.dt]


@dataclass(frozen=True)
class RadarPoint:
    x: float
    y: float
    z: float
    rcs: float
    vx_comp: float
    vy_comp: float
    dt: float = 0.0

    def as_row(self) -> list[float]:
        return [self.x, self.y, self.z, self.rcs, self.vx_comp, self.vy_comp, self.dt]


@dataclass(frozen=True)
class Pose2D:
    """Rigid BEV transform taking sweep-frame coordinates into the key frame."""

    tx: float = 0.0
    ty: float = 0.0
    yaw: float = 0.0

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s], [s, c]])

    def is_identity(self) -> bool:
        return self.tx == 0.0 and self.ty == 0.0 and self.yaw == 0.0


@dataclass
class Sweep:
    modality: Modality
    points: np.ndarray  # (N, LIDAR_WIDTH) or (N, RADAR_WIDTH); dt column ignored on input
    pose: Pose2D = field(default_factory=Pose2D)
    time_offset: float = 0.0

    def __post_init__(self):
        self.modality = Modality(self.modality)
        lidar = self.modality == Modality.LIDAR
        self.points = _as_rows(self.points, LIDAR_WIDTH if lidar else RADAR_WIDTH, self.modality.name.lower())
        if self.time_offset < 0:
            raise ValueError(f"sweep time offset must be >= 0, got {self.time_offset}")


def _as_rows(points, width: int, what: str) -> np.ndarray:
    if not isinstance(points, np.ndarray):
        points = [p.as_row() if hasattr(p, "as_row") else p for p in points]
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, width))
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"{what} points need {width} columns, got shape {arr.shape}")
    return arr


def as_lidar_array(points) -> np.ndarray:
    return _as_rows(points, LIDAR_WIDTH, "lidar")


def as_radar_array(points) -> np.ndarray:
    return _as_rows(points, RADAR_WIDTH, "radar")


def accumulate_sweeps(sweeps: list[Sweep], max_sweeps: int | None = None) -> np.ndarray:
    """Merge sweeps of one modality into the key frame, stamping each point's dt.

    ``sweeps[0]`` is the key frame.  At most ``max_sweeps`` newest sweeps
    (smallest time offset) are kept, in input order.  Radar velocity vectors
    are rotated by the sweep yaw but not translated.
    """
    if not sweeps:
        raise ValueError("accumulate_sweeps needs at least one sweep")
    modality = sweeps[0].modality
    if any(s.modality != modality for s in sweeps):
        raise ValueError("accumulate_sweeps got mixed modalities")
    order = list(range(len(sweeps)))
    if max_sweeps is not None and len(sweeps) > max_sweeps:
        newest = sorted(order, key=lambda i: (sweeps[i].time_offset, i))[:max_sweeps]
        order = sorted(newest)
    out = []
    for i in order:
        s = sweeps[i]
        pts = s.points.copy()
        if not s.pose.is_identity():
            rot = s.pose.rotation()
            pts[:, 0:2] = pts[:, 0:2] @ rot.T + np.array([s.pose.tx, s.pose.ty])
            if modality == Modality.RADAR:
                pts[:, 4:6] = pts[:, 4:6] @ rot.T
        pts[:, -1] = s.time_offset
        out.append(pts)
    return np.concatenate(out, axis=0)


@dataclass
class StackedCloud:
    """Zero-padded 9-column points plus a per-point modality tag."""

    points: np.ndarray  # (N, 9)
    modality: np.ndarray  # (N,) uint8 of Modality values

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_radar(self) -> np.ndarray:
        return self.modality == Modality.RADAR

    def lidar_only(self) -> "StackedCloud":
        keep = ~self.is_radar
        return StackedCloud(self.points[keep], self.modality[keep])

    def radar_only(self) -> "StackedCloud":
        keep = self.is_radar
        return StackedCloud(self.points[keep], self.modality[keep])


def stack_modalities(lidar, radar) -> StackedCloud:
    """Pad lidar and radar points to the shared 9-column layout; lidar first."""
    lid = as_lidar_array(lidar)
    rad = as_radar_array(radar)
    out = np.zeros((lid.shape[0] + rad.shape[0], STACKED_WIDTH))
    out[:lid.shape[0], 0:5] = lid
    out[lid.shape[0]:, 0:3] = rad[:, 0:3]
    out[lid.shape[0]:, 5:9] = rad[:, 3:7]
    tags = np.concatenate([
        np.full(lid.shape[0], Modality.LIDAR, dtype=np.uint8),
        np.full(rad.shape[0], Modality.RADAR, dtype=np.uint8),
    ])
    return StackedCloud(out, tags)


def unstack(cloud: StackedCloud) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``stack_modalities``: recover (lidar rows, radar rows)."""
    lid = cloud.points[~cloud.is_radar][:, 0:5].copy()
    rpts = cloud.points[cloud.is_radar]
    rad = np.concatenate([rpts[:, 0:3], rpts[:, 5:9]], axis=1)
    return lid, rad
