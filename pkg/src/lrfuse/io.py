"""On-disk formats: LRPC1 point files, dataset manifests, LRFK1 checkpoints,
PGM/CSV weight maps and JSON-lines metrics."""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .pointcloud import LIDAR_WIDTH, RADAR_WIDTH, Modality, Pose2D, Sweep

if TYPE_CHECKING:
    from .datagen import Scene

POINT_MAGIC = b"LRPC1"
CKPT_MAGIC = b"LRFK1"


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- point files


def encode_points(modality: Modality, points: np.ndarray) -> bytes:
    width = LIDAR_WIDTH if modality == Modality.LIDAR else RADAR_WIDTH
    pts = np.asarray(points, dtype="<f4").reshape(-1, width)
    header = POINT_MAGIC + struct.pack("<BII", int(modality), pts.shape[0], width)
    return header + pts.tobytes()


def decode_points(blob: bytes) -> tuple[Modality, np.ndarray]:
    if blob[:5] != POINT_MAGIC:
        raise FormatError("not an LRPC1 point file")
    modality, count, width = struct.unpack_from("<BII", blob, 5)
    expected = LIDAR_WIDTH if modality == Modality.LIDAR else RADAR_WIDTH
    if width != expected:
        raise FormatError(f"record width {width} does not match modality {modality}")
    body = blob[14:]
    if len(body) != count * width * 4:
        raise FormatError("truncated point file")
    pts = np.frombuffer(body, dtype="<f4").reshape(count, width).astype(np.float64)
    return Modality(modality), pts


def write_points(path: Path, modality: Modality, points: np.ndarray) -> None:
    Path(path).write_bytes(encode_points(modality, points))


def read_points(path: Path) -> tuple[Modality, np.ndarray]:
    return decode_points(Path(path).read_bytes())


# ---------------------------------------------------------------- scenes


def write_scene(root: Path, scene: "Scene", split: str) -> dict:
    """Write one scene's sweeps under ``root/scenes/<id>/`` and return its manifest entry."""
    sdir = Path(root) / "scenes" / scene.scene_id
    sdir.mkdir(parents=True, exist_ok=True)
    entry = {
        "id": scene.scene_id,
        "seed": scene.seed,
        "split": split,
        "weather": scene.weather.value,
        "gt": [dict(zip(("x", "y", "vx", "vy", "wx", "wy"), map(float, row))) for row in scene.gt],
    }
    for name, sweeps in (("lidar", scene.lidar_sweeps), ("radar", scene.radar_sweeps)):
        recs = []
        for k, s in enumerate(sweeps):
            fname = f"{name}_{k:02d}.bin"
            write_points(sdir / fname, s.modality, s.points)
            recs.append({"file": f"scenes/{scene.scene_id}/{fname}",
                         "pose": [s.pose.tx, s.pose.ty, s.pose.yaw],
                         "time_offset": s.time_offset})
        entry[f"{name}_sweeps"] = recs
    return entry


def load_manifest(root: Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    return json.loads(path.read_text())


def load_scene(root: Path, entry: dict) -> "Scene":
    from .datagen import Scene, Weather

    sweeps = {}
    for name in ("lidar", "radar"):
        out = []
        for rec in entry[f"{name}_sweeps"]:
            modality, pts = read_points(Path(root) / rec["file"])
            out.append(Sweep(modality, pts, Pose2D(*rec["pose"]), rec["time_offset"]))
        sweeps[name] = out
    gt = np.array([[g[k] for k in ("x", "y", "vx", "vy", "wx", "wy")] for g in entry["gt"]],
                  dtype=np.float64).reshape(-1, 6)
    return Scene(entry["id"], entry["seed"], Weather(entry["weather"]), gt, sweeps["lidar"], sweeps["radar"])


# ---------------------------------------------------------------- checkpoints


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:5] != CKPT_MAGIC:
        raise FormatError("not an LRFK1 checkpoint")
    pos = 5
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise FormatError("trailing bytes in checkpoint")
    return out


def save_checkpoint(path: Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: Path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- weight maps


def encode_pgm(grid: np.ndarray) -> bytes:
    """Binary P5 greyscale, maxval 255, pixel = round(255·w).  Row 0 is written first."""
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise FormatError("PGM export needs a 2-D grid")
    pix = np.clip(np.round(255.0 * g), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    fields = blob.split(b"\n", 3)
    if fields[0] != b"P5":
        raise FormatError("not a P5 PGM")
    w, h = map(int, fields[1].split())
    return np.frombuffer(fields[3], dtype=np.uint8).reshape(h, w)


def write_csv_grid(path: Path, grid: np.ndarray) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(grid)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv_grid(path: Path) -> np.ndarray:
    return np.array([[float(v) for v in line.split(",")] for line in Path(path).read_text().splitlines()])


# ---------------------------------------------------------------- json


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)


def append_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(dumps(record) + "\n")
