"""Experiment orchestration: evaluation of a checkpoint and the five-row ablation."""
from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path

from . import config as rc
from . import io as lrio
from .detector.model import DetectorParams, Mode, prepare_sample
from .detector.train import CHECKPOINT_NAME, METRICS_NAME, Dataset, predict, train
from .fusion import GateMode

log = logging.getLogger(__name__)

ABLATION_ROWS: tuple[tuple[str, Mode, GateMode], ...] = (
    ("LO", Mode.LO, GateMode.CHANNEL_SPECIFIC),
    ("LR_EARLY_ONLY", Mode.LR_EARLY_ONLY, GateMode.CHANNEL_SPECIFIC),
    ("LR_MIDDLE_ONLY", Mode.LR_MIDDLE_ONLY, GateMode.CHANNEL_SPECIFIC),
    ("LR_FULL", Mode.LR_FULL, GateMode.CHANNEL_SPECIFIC),
    ("LR_FULL_CONSTANT", Mode.LR_FULL, GateMode.CHANNEL_CONSTANT),
)

CONFIG_NAME = "config.json"


def eval_split(params: DetectorParams, dataset: Dataset, split: str) -> dict:
    samples = [prepare_sample(s, params.config) for s in dataset[split]]
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    pred = predict(params, samples)
    return {"split": split, "loss": pred.loss, **pred.metrics, "gate": pred.gate}


def load_trained(checkpoint: str | Path, cfg: rc.RunConfig) -> DetectorParams:
    params = DetectorParams(cfg.pipeline)
    params.load_state_dict(lrio.load_checkpoint(checkpoint))
    return params


def run_training(cfg: rc.RunConfig, dataset: Dataset, out_dir: str | Path, run_id: str = "run"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc.dump(cfg, out / CONFIG_NAME)
    return train(cfg.pipeline, dataset, out, run_id=run_id)


def run_ablation(cfg: rc.RunConfig, dataset: Dataset, out_dir: str | Path,
                 rows=ABLATION_ROWS, rain_split: str = "val_rain") -> dict:
    """Train every ablation row with the same seed and evaluate it on the clear and rain val splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rc.dump(cfg, out / CONFIG_NAME)
    results = []
    for row_id, mode, gate_mode in rows:
        row_cfg = cfg.with_mode(mode.value, gate_mode.value)
        t0 = time.process_time()
        params, records = run_training(row_cfg, dataset, out / row_id, run_id=row_id)
        seconds = time.process_time() - t0
        clear = eval_split(params, dataset, "val")
        rain = eval_split(params, dataset, rain_split) if dataset[rain_split] else None
        weights_spread = None
        if mode.gated and gate_mode == GateMode.CHANNEL_CONSTANT:
            weights_spread = constant_gate_spread(params, dataset)
        results.append({"row": row_id, "mode": mode.value, "gate_mode": gate_mode.value,
                        "cpu_seconds": seconds, "epochs": len(records),
                        "clear": clear, "rain": rain, "constant_gate_spread": weights_spread})
        log.info("%s: ap %.4f (%.0f s)", row_id, clear["ap"], seconds)
    report = {"seed": cfg.pipeline.seed, "range_bins": [list(b) for b in cfg.pipeline.range_bins],
              "rows": results}
    (out / "ablation.json").write_text(lrio.dumps(report) + "\n")
    (out / "ablation.md").write_text(format_report(report))
    return report


def constant_gate_spread(params: DetectorParams, dataset: Dataset) -> float:
    """Largest cross-channel spread of the gate weights over the val split."""
    from .detector.model import forward

    worst = 0.0
    samples = [prepare_sample(s, params.config) for s in dataset["val"]]
    for i in range(0, len(samples), params.config.batch_size):
        out = forward(samples[i:i + params.config.batch_size], params)
        for w in (out.weights.lidar.data, out.weights.radar.data):
            worst = max(worst, float((w.max(axis=1) - w.min(axis=1)).max()))
    return worst


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


def _row(cells) -> str:
    return "| " + " | ".join(cells) + " |"


def format_report(report: dict) -> str:
    rows = {r["row"]: r for r in report["rows"]}
    bins = report["range_bins"]
    lines = ["# Ablation report", "", f"seed {report['seed']}", "", "## Fusion module", ""]
    lines += [_row(["row", "early", "middle", "AP", "velocity error", "CPU s"]),
              _row(["---"] * 6)]
    flags = {"LO": ("", ""), "LR_EARLY_ONLY": ("x", ""), "LR_MIDDLE_ONLY": ("", "x"), "LR_FULL": ("x", "x")}
    for name, (e, m) in flags.items():
        if name in rows:
            r = rows[name]
            lines.append(_row([name, e, m, _fmt(r["clear"]["ap"]), _fmt(r["clear"]["velocity_error"]),
                               f"{r['cpu_seconds']:.0f}"]))
    lines += ["", "## Gated network design", "", _row(["gate", "AP", "max cross-channel spread"]),
              _row(["---"] * 3)]
    for name, label in (("LR_FULL", "channel-specific"), ("LR_FULL_CONSTANT", "channel-constant")):
        if name in rows:
            r = rows[name]
            lines.append(_row([label, _fmt(r["clear"]["ap"]), _fmt(r["constant_gate_spread"])]))
    lines += ["", "## AP by range", "",
              _row(["row"] + [f"[{lo:g}, {hi:g}) m" for lo, hi in bins]), _row(["---"] * (len(bins) + 1))]
    for r in report["rows"]:
        lines.append(_row([r["row"]] + [_fmt(v) for v in r["clear"]["range_ap"]]))
    lines += ["", "## AP by weather", "", _row(["row", "clear", "rain"]), _row(["---"] * 3)]
    for r in report["rows"]:
        lines.append(_row([r["row"], _fmt(r["clear"]["ap"]), _fmt(r["rain"]["ap"] if r["rain"] else None)]))
    lines += ["", "## Mean gate weights (clear val)", "",
              _row(["row", "expert", "overall"] + [f"[{lo:g}, {hi:g})" for lo, hi in bins]),
              _row(["---"] * (len(bins) + 3))]
    for r in report["rows"]:
        gate = r["clear"]["gate"]
        if gate is None:
            continue
        for expert in ("lidar", "radar"):
            lines.append(_row([r["row"], expert, _fmt(gate[expert]["mean"])]
                              + [_fmt(v) for v in gate[expert]["bins"]]))
    if "LO" in rows and "LR_FULL" in rows:
        lo, full = rows["LO"], rows["LR_FULL"]
        lines += ["", "## LR_FULL minus LO", "", _row(["quantity", "gain"]), _row(["---"] * 2)]
        lines.append(_row(["AP clear", _fmt(full["clear"]["ap"] - lo["clear"]["ap"])]))
        if lo["rain"] and full["rain"]:
            lines.append(_row(["AP rain", _fmt(full["rain"]["ap"] - lo["rain"]["ap"])]))
        for (a, b), fa, la in zip(bins, full["clear"]["range_ap"], lo["clear"]["range_ap"]):
            gain = None if fa is None or la is None else fa - la
            lines.append(_row([f"AP [{a:g}, {b:g}) m", _fmt(gain)]))
        lines.append(_row(["velocity error", _fmt(full["clear"]["velocity_error"] - lo["clear"]["velocity_error"])]))
    return "\n".join(lines) + "\n"


def with_overrides(cfg: rc.RunConfig, seed: int | None = None, mode: str | None = None) -> rc.RunConfig:
    if seed is not None:
        cfg = replace(cfg, pipeline=replace(cfg.pipeline, seed=seed),
                      dataset=replace(cfg.dataset, base_seed=seed))
    if mode is not None:
        cfg = cfg.with_mode(mode)
    return cfg


__all__ = ["ABLATION_ROWS", "CHECKPOINT_NAME", "METRICS_NAME", "eval_split", "load_trained",
           "run_training", "run_ablation", "format_report", "with_overrides"]
