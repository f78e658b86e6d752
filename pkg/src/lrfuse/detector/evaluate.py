"""Peak decoding and center-distance AP / velocity-error evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..voxel import VoxelGridSpec


@dataclass(frozen=True)
class DetectionBox:
    x: float
    y: float
    vx: float
    vy: float
    score: float


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def peak_mask(logits: np.ndarray, window: int) -> np.ndarray:
    """Cells that beat every other cell of their w×w window.

    Equal values are resolved in favour of the smaller row-major index.
    """
    if window % 2 == 0:
        raise ValueError("peak window must be odd")
    H, W = logits.shape
    p = window // 2
    padded = np.full((H + 2 * p, W + 2 * p), -np.inf)
    padded[p:p + H, p:p + W] = logits
    mask = np.ones((H, W), dtype=bool)
    for dy in range(-p, p + 1):
        for dx in range(-p, p + 1):
            if dy == 0 and dx == 0:
                continue
            nb = padded[p + dy:p + dy + H, p + dx:p + dx + W]
            # neighbour earlier in row-major order wins ties
            earlier = dy < 0 or (dy == 0 and dx < 0)
            mask &= (logits >= nb) if not earlier else (logits > nb)
    return mask


def decode_detections(heatmap: np.ndarray, velocity: np.ndarray, spec: VoxelGridSpec,
                      score_threshold: float = 0.1, window: int = 5) -> list[DetectionBox]:
    """Local-maximum cells with sigmoid score above threshold, by descending score."""
    logits = np.asarray(heatmap).reshape(spec.bev_shape)
    scores = _sigmoid(logits)
    mask = peak_mask(logits, window) & (scores > score_threshold)
    iy, ix = np.nonzero(mask)  # row-major order
    order = np.argsort(-scores[iy, ix], kind="stable")
    xc, yc = spec.cell_centers_xy()
    vel = np.asarray(velocity).reshape(2, *spec.bev_shape)
    return [DetectionBox(float(xc[iy[i], ix[i]]), float(yc[iy[i], ix[i]]), float(vel[0, iy[i], ix[i]]),
                         float(vel[1, iy[i], ix[i]]), float(scores[iy[i], ix[i]])) for i in order]


def average_precision(tp: np.ndarray, n_gt: int) -> float | None:
    """All-point interpolated area under the precision/recall curve."""
    if n_gt == 0:
        return None
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def match_detections(dets: Sequence[Sequence[DetectionBox]], gts: Sequence[np.ndarray],
                     radius: float) -> tuple[np.ndarray, list[tuple[int, int, int]], int]:
    """Greedy score-ordered matching pooled over scenes.

    Each detection takes the nearest unmatched gt of its scene within
    ``radius`` (ties by gt x, then y).  Returns the TP flags in pooled score
    order, the (scene, det, gt) matches and the total gt count.
    """
    pooled = [(-d.score, s, j) for s, ds in enumerate(dets) for j, d in enumerate(ds)]
    pooled.sort()
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(pooled))
    matches = []
    for k, (_, s, j) in enumerate(pooled):
        d = dets[s][j]
        g = gts[s]
        if len(g) == 0:
            continue
        dist = np.hypot(g[:, 0] - d.x, g[:, 1] - d.y)
        ok = (dist <= radius) & ~used[s]
        if not ok.any():
            continue
        cand = np.flatnonzero(ok)
        best = min(cand, key=lambda i: (dist[i], g[i, 0], g[i, 1]))
        used[s][best] = True
        tp[k] = 1.0
        matches.append((s, j, int(best)))
    return tp, matches, sum(len(g) for g in gts)


def _in_bin(x, y, lo, hi):
    r = np.hypot(x, y)
    return (r >= lo) & (r < hi)


def evaluate(dets: Sequence[Sequence[DetectionBox]], gts: Sequence[np.ndarray], match_radius: float = 2.0,
             range_bins: Sequence[tuple[float, float]] = ((0.0, 12.0), (12.0, 20.0), (20.0, 32.0))) -> dict:
    """AP, mean velocity error over matches, and AP per range bin (None when undefined)."""
    gts = [np.asarray(g, dtype=np.float64).reshape(-1, 6) for g in gts]
    tp, matches, n_gt = match_detections(dets, gts, match_radius)
    errs = [np.hypot(dets[s][j].vx - gts[s][i, 2], dets[s][j].vy - gts[s][i, 3]) for s, j, i in matches]
    per_bin = []
    for lo, hi in range_bins:
        bd = [[d for d in ds if _in_bin(d.x, d.y, lo, hi)] for ds in dets]
        bg = [g[_in_bin(g[:, 0], g[:, 1], lo, hi)] for g in gts]
        btp, _, bn = match_detections(bd, bg, match_radius)
        per_bin.append(average_precision(btp, bn))
    return {
        "ap": average_precision(tp, n_gt),
        "velocity_error": float(np.mean(errs)) if errs else None,
        "range_ap": per_bin,
        "n_gt": n_gt,
        "n_det": int(tp.size),
        "n_tp": int(tp.sum()),
    }
