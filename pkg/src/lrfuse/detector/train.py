"""Deterministic training loop and batched inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import diffmath as dm
from .. import io as lrio
from ..datagen import Scene
from ..fusion import GateWeights, gate_stats
from .evaluate import DetectionBox, decode_detections, evaluate
from .loss import compute_loss
from .model import DetectorParams, PipelineConfig, Sample, forward, prepare_sample

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.lrfk"
METRICS_NAME = "metrics.jsonl"


class TrainingAborted(RuntimeError):
    pass


@dataclass
class Dataset:
    splits: dict[str, list[Scene]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Scene]:
        return self.splits.get(split, [])


def load_dataset(root: str | Path, splits: Sequence[str] | None = None) -> Dataset:
    manifest = lrio.load_manifest(root)
    out: dict[str, list[Scene]] = {}
    for entry in manifest["scenes"]:
        if splits is not None and entry["split"] not in splits:
            continue
        out.setdefault(entry["split"], []).append(lrio.load_scene(root, entry))
    return Dataset(out)


@dataclass
class Prediction:
    detections: list[list[DetectionBox]]
    gate: dict | None
    loss: float
    metrics: dict


def _batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, size):
        yield idx[start:start + size]


def predict(params: DetectorParams, samples: Sequence[Sample]) -> Prediction:
    """Forward every sample, decode, evaluate and average the gate maps."""
    cfg = params.config
    dets: list[list[DetectionBox]] = []
    gate_sum = None
    loss_sum = 0.0
    for batch in _batches(len(samples), cfg.batch_size):
        chunk = [samples[i] for i in batch]
        out = forward(chunk, params)
        loss = compute_loss(out.heatmap, out.velocity, [s.gt for s in chunk], cfg.grid, cfg.velocity_weight)
        loss_sum += float(loss.data) * len(chunk)
        for b in range(len(chunk)):
            dets.append(decode_detections(out.heatmap.data[b, 0], out.velocity.data[b], cfg.grid,
                                          cfg.score_threshold, cfg.peak_window))
        if out.weights is not None:
            per_cell = np.stack([out.weights.lidar.data.mean(axis=1).sum(axis=0),
                                 out.weights.radar.data.mean(axis=1).sum(axis=0)])
            gate_sum = per_cell if gate_sum is None else gate_sum + per_cell
    metrics = evaluate(dets, [s.gt for s in samples], cfg.match_radius, cfg.range_bins)
    gate = None
    if gate_sum is not None:
        mean = gate_sum / len(samples)
        weights = GateWeights(dm.Tensor(mean[0][None, None]), dm.Tensor(mean[1][None, None]))
        gate = gate_stats(weights, list(cfg.range_bins), cfg.grid.cell_centers_xy())
    return Prediction(dets, gate, loss_sum / max(len(samples), 1), metrics)


def train(config: PipelineConfig, dataset: Dataset, out_dir: str | Path | None = None,
          run_id: str = "run", train_split: str = "train", val_split: str = "val",
          params: DetectorParams | None = None) -> tuple[DetectorParams, list[dict]]:
    """Train ``config`` on ``dataset`` and return the params plus one metrics record per epoch.

    Shuffling and init are seeded from ``config.seed``.  With ``out_dir`` the
    metrics log and the final checkpoint are written there.
    """
    init_ss, shuffle_ss = np.random.SeedSequence(config.seed).spawn(2)
    if params is None:
        params = DetectorParams(config, seed=int(init_ss.generate_state(1)[0]))
    plist = params.params()
    shuffle_rng = np.random.default_rng(shuffle_ss)
    train_samples = [prepare_sample(s, config) for s in dataset[train_split]]
    val_samples = [prepare_sample(s, config) for s in dataset[val_split]]
    if not train_samples:
        raise ValueError(f"split {train_split!r} is empty")
    state = dm.OptimState(config.lr, momentum=config.momentum, kind=config.optimizer)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / METRICS_NAME).write_text("")
    records = []
    last_good = params.state_dict()
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_samples))
        losses = []
        for batch in _batches(len(train_samples), config.batch_size, order):
            chunk = [train_samples[i] for i in batch]
            o = forward(chunk, params)
            loss = compute_loss(o.heatmap, o.velocity, [s.gt for s in chunk], config.grid,
                                config.velocity_weight)
            value = float(loss.data)
            try:
                if not np.isfinite(value):
                    raise dm.NonFiniteError(f"non-finite loss {value} at epoch {epoch}")
                dm.zero_grad(plist)
                dm.backward(loss, plist)
                dm.optim_step(plist, state)
            except dm.NonFiniteError as exc:
                params.load_state_dict(last_good)
                if out is not None:
                    lrio.save_checkpoint(out / CHECKPOINT_NAME, last_good)
                raise TrainingAborted(f"{exc}; last good checkpoint restored") from exc
            losses.append(value * len(chunk))
            last_good = params.state_dict()
        record = {
            "run_id": run_id,
            "mode": config.mode.value,
            "gate_mode": config.gate.mode.value,
            "seed": config.seed,
            "epoch": epoch,
            "loss": float(np.sum(losses) / len(train_samples)),
        }
        if val_samples:
            pred = predict(params, val_samples)
            record.update({
                "val_loss": pred.loss,
                "ap": pred.metrics["ap"],
                "range_ap": pred.metrics["range_ap"],
                "velocity_error": pred.metrics["velocity_error"],
                "gate": pred.gate,
            })
        log.info("%s epoch %d loss %.5f ap %s", run_id, epoch, record["loss"], record.get("ap"))
        records.append(record)
        if out is not None:
            lrio.append_jsonl(out / METRICS_NAME, record)
    if out is not None:
        lrio.save_checkpoint(out / CHECKPOINT_NAME, params.state_dict())
    return params, records


def initial_loss(config: PipelineConfig, params: DetectorParams, samples: Sequence[Sample]) -> float:
    total = 0.0
    for batch in _batches(len(samples), config.batch_size):
        chunk = [samples[i] for i in batch]
        o = forward(chunk, params)
        total += float(compute_loss(o.heatmap, o.velocity, [s.gt for s in chunk], config.grid,
                                    config.velocity_weight).data) * len(chunk)
    return total / len(samples)
