"""Seeded synthetic scenes: moving boxes seen by a LiDAR and a radar.

LiDAR returns thin out with range (inverse square) and, in rain, beyond a
cutoff radius.  Radar returns are sparse, have noisy height and carry
compensated velocities; radar clutter is sprinkled over the whole range.
Every scene is reproducible bit-exactly from ``(config, sensor model, seed)``.
"""
from __future__ import annotations

import enum
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as lrio
from .pointcloud import Modality, Pose2D, Sweep

SWEEP_INTERVAL = 0.05
OBJECT_Z_BOTTOM = -1.6
OBJECT_HEIGHT = 1.5


class Weather(str, enum.Enum):
    CLEAR = "CLEAR"
    RAIN = "RAIN"


class PlacementError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    n_objects: int = 8
    radius_range: tuple[float, float] = (4.0, 30.0)
    speed_range: tuple[float, float] = (0.0, 10.0)
    weather: Weather = Weather.CLEAR
    seed: int = 0
    lidar_sweeps: int = 10
    radar_sweeps: int = 6
    ego_speed: float = 5.0
    extent_range: tuple[tuple[float, float], tuple[float, float]] = ((3.8, 5.0), (1.7, 2.1))
    world_limit: float = 32.0
    max_tries: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "weather", Weather(self.weather))
        lo, hi = self.radius_range
        if not 0 <= lo <= hi <= self.world_limit:
            raise ValueError(f"radius range {self.radius_range} must lie within [0, {self.world_limit}]")
        if self.n_objects < 0 or self.lidar_sweeps < 1 or self.radar_sweeps < 1:
            raise ValueError("object count must be >= 0 and sweep counts >= 1")


@dataclass(frozen=True)
class SensorModel:
    lidar_n0: float = 4.0
    lidar_r0: float = 10.0
    lidar_sigma: float = 0.05
    rain_radius: float = 16.0
    rain_keep: float = 0.3
    radar_mu: float = 3.0
    radar_sigma_xy: float = 0.3
    radar_sigma_z: float = 1.0
    radar_sigma_v: float = 0.2
    clutter_mu: float = 20.0

    def __post_init__(self):
        for name in ("lidar_sigma", "radar_sigma_xy", "radar_sigma_z", "radar_sigma_v"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.rain_keep <= 1.0:
            raise ValueError("rain_keep must be a probability")
        if self.lidar_n0 < 0 or self.radar_mu < 0 or self.clutter_mu < 0 or self.lidar_r0 <= 0:
            raise ValueError("sensor rates must be >= 0")


@dataclass
class Scene:
    scene_id: str
    seed: int
    weather: Weather
    gt: np.ndarray  # (n, 6): x, y, vx, vy, wx, wy in the key frame
    lidar_sweeps: list[Sweep] = field(default_factory=list)
    radar_sweeps: list[Sweep] = field(default_factory=list)


def _f32(a: np.ndarray) -> np.ndarray:
    # stored point files are float32; keep in-memory scenes identical to what is written
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _place_objects(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    boxes: list[list[float]] = []
    margin = 0.5
    for _ in range(cfg.n_objects):
        for _try in range(cfg.max_tries):
            r = rng.uniform(*cfg.radius_range)
            phi = rng.uniform(-np.pi, np.pi)
            x, y = r * np.cos(phi), r * np.sin(phi)
            length = rng.uniform(*cfg.extent_range[0])
            width = rng.uniform(*cfg.extent_range[1])
            along_x = rng.random() < 0.5
            wx, wy = (length, width) if along_x else (width, length)
            speed = rng.uniform(*cfg.speed_range)
            sign = 1.0 if rng.random() < 0.5 else -1.0
            vx, vy = (sign * speed, 0.0) if along_x else (0.0, sign * speed)
            if abs(x) + wx / 2 >= cfg.world_limit or abs(y) + wy / 2 >= cfg.world_limit:
                continue
            clash = any(abs(x - b[0]) < (wx + b[4]) / 2 + margin and abs(y - b[1]) < (wy + b[5]) / 2 + margin
                        for b in boxes)
            if not clash:
                boxes.append([x, y, vx, vy, wx, wy])
                break
        else:
            raise PlacementError(f"could not place object {len(boxes)} after {cfg.max_tries} tries")
    return np.array(boxes, dtype=np.float64).reshape(-1, 6)


def _sweep_pose(cfg: SceneConfig, k: int) -> tuple[Pose2D, float]:
    t = k * SWEEP_INTERVAL
    # ego drives along +x; sweep k was captured t seconds before the key frame
    return Pose2D(tx=-cfg.ego_speed * t, ty=0.0, yaw=0.0), t


def _to_sweep_frame(xy: np.ndarray, pose: Pose2D) -> np.ndarray:
    return (xy - np.array([pose.tx, pose.ty])) @ pose.rotation()


def _lidar_sweep(gt, cfg, model, pose, t, rng, rain_rng, reflect) -> np.ndarray:
    rows = []
    for obj, refl in zip(gt, reflect):
        center = obj[0:2] - obj[2:4] * t
        c_s = _to_sweep_frame(center[None], pose)[0]
        r = max(float(np.hypot(*c_s)), 1.0)
        n = rng.poisson(model.lidar_n0 * (model.lidar_r0 / r) ** 2)
        u = rng.uniform(-0.5, 0.5, size=(n, 2)) * obj[4:6]
        xy = _to_sweep_frame(center + u, pose)
        z = OBJECT_Z_BOTTOM + rng.uniform(0.0, OBJECT_HEIGHT, size=n)
        pts = np.column_stack([xy, z]) + rng.normal(0.0, model.lidar_sigma, size=(n, 3))
        inten = np.clip(refl + rng.normal(0.0, 0.05, size=n), 0.0, 1.0)
        rows.append(np.column_stack([pts, inten, np.zeros(n)]))
    pts = np.concatenate(rows) if rows else np.zeros((0, 5))
    keep_draw = rain_rng.random(pts.shape[0])
    if cfg.weather == Weather.RAIN:
        far = np.hypot(pts[:, 0], pts[:, 1]) > model.rain_radius
        pts = pts[~far | (keep_draw < model.rain_keep)]
    return pts


def _radar_sweep(gt, cfg, model, pose, t, rng, rcs) -> np.ndarray:
    rows = []
    rot_inv = pose.rotation().T
    for obj, obj_rcs in zip(gt, rcs):
        center = obj[0:2] - obj[2:4] * t
        n = rng.poisson(model.radar_mu)
        u = rng.uniform(-0.5, 0.5, size=(n, 2)) * obj[4:6]
        xy = _to_sweep_frame(center + u, pose) + rng.normal(0.0, model.radar_sigma_xy, size=(n, 2))
        z = OBJECT_Z_BOTTOM + OBJECT_HEIGHT / 2 + rng.normal(0.0, model.radar_sigma_z, size=n)
        v = (obj[2:4] @ rot_inv.T)[None] + rng.normal(0.0, model.radar_sigma_v, size=(n, 2))
        rows.append(np.column_stack([xy, z, np.full(n, obj_rcs), v, np.zeros(n)]))
    nc = rng.poisson(model.clutter_mu)
    lim = cfg.world_limit
    cxy = rng.uniform(-lim, lim, size=(nc, 2))
    cz = OBJECT_Z_BOTTOM + OBJECT_HEIGHT / 2 + rng.normal(0.0, model.radar_sigma_z, size=nc)
    speed = rng.uniform(*cfg.speed_range, size=nc)
    heading = rng.uniform(-np.pi, np.pi, size=nc)
    crcs = rng.normal(10.0, 2.0, size=nc)
    rows.append(np.column_stack([cxy, cz, crcs, speed * np.cos(heading), speed * np.sin(heading),
                                 np.zeros(nc)]))
    return np.concatenate(rows)


def generate_scene(cfg: SceneConfig, model: SensorModel = SensorModel(), scene_id: str = "") -> Scene:
    """Build one scene.  Each stream has its own generator so weather only
    changes the lidar dropout draws, never the radar or the object layout."""
    place_ss, lidar_ss, radar_ss, rain_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    place_rng = np.random.default_rng(place_ss)
    gt = _place_objects(cfg, place_rng)
    reflect = place_rng.uniform(0.3, 0.9, size=len(gt))
    rcs = place_rng.normal(10.0, 2.0, size=len(gt))

    lidar_rng, radar_rng = np.random.default_rng(lidar_ss), np.random.default_rng(radar_ss)
    rain_rng = np.random.default_rng(rain_ss)
    lidar, radar = [], []
    for k in range(cfg.lidar_sweeps):
        pose, t = _sweep_pose(cfg, k)
        pts = _lidar_sweep(gt, cfg, model, pose, t, lidar_rng, rain_rng, reflect)
        lidar.append(Sweep(Modality.LIDAR, _f32(pts), pose, t))
    for k in range(cfg.radar_sweeps):
        pose, t = _sweep_pose(cfg, k)
        pts = _radar_sweep(gt, cfg, model, pose, t, radar_rng, rcs)
        radar.append(Sweep(Modality.RADAR, _f32(pts), pose, t))
    return Scene(scene_id or f"scene_{cfg.seed}", cfg.seed, cfg.weather, gt, lidar, radar)


def split_of(index: int, n_scenes: int) -> str:
    n_train = max(1, (n_scenes * 8) // 10)
    return "train" if index < n_train else "val"


def generate_dataset(n_scenes: int, cfg: SceneConfig, model: SensorModel, base_seed: int,
                     out_dir: str | Path, paired_rain_val: bool = True, jobs: int = 1) -> Path:
    """Write ``n_scenes`` scenes (seed = base_seed + i) plus a manifest.

    The first 80% of scenes are ``train``, the rest ``val``.  With
    ``paired_rain_val`` every val scene is also written in RAIN mode under the
    same seed (split ``val_rain``); when the template is already RAIN the
    pair is written as ``val_clear`` instead.  ``jobs > 1`` generates scenes
    in worker processes; the manifest order does not depend on it.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_jobs, jobs = jobs, []
    for i in range(n_scenes):
        split = split_of(i, n_scenes)
        jobs.append((f"{i:05d}", split, cfg.weather))
        if paired_rain_val and split == "val":
            other = Weather.CLEAR if cfg.weather == Weather.RAIN else Weather.RAIN
            jobs.append((f"{i:05d}_{other.value.lower()}", f"val_{other.value.lower()}", other))
    tasks = [(out, cfg, model, base_seed, *job) for job in jobs]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            entries = list(pool.map(_write_one, tasks))
    else:
        entries = [_write_one(t) for t in tasks]
    manifest = {
        "format": lrio.POINT_MAGIC.decode(),
        "base_seed": base_seed,
        "n_scenes": n_scenes,
        "scene_config": config_to_dict(cfg),
        "sensor_model": asdict(model),
        "scenes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return out


def _write_one(task) -> dict:
    out, cfg, model, base_seed, scene_id, split, weather = task
    i = int(scene_id[:5])
    scene = generate_scene(replace(cfg, seed=base_seed + i, weather=weather), model, scene_id)
    return lrio.write_scene(out, scene, split)


def config_to_dict(cfg: SceneConfig) -> dict:
    d = asdict(cfg)
    d["weather"] = cfg.weather.value
    return d
