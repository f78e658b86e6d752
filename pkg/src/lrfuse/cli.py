"""``lrfuse`` command line: datagen, train, eval, gradcheck, ablate, export-weights."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as rc
from . import diffmath as dm
from . import io as lrio
from .datagen import generate_dataset
from .detector.model import Mode, forward, prepare_sample
from .detector.train import TrainingAborted, load_dataset
from .experiments import CONFIG_NAME, eval_split, load_trained, run_ablation, run_training, with_overrides
from .fusion import Expert, export_weight_map

log = logging.getLogger("lrfuse")


def _config(args) -> rc.RunConfig:
    cfg = rc.load(args.config)
    return with_overrides(cfg, getattr(args, "seed", None), getattr(args, "mode", None))


def cmd_datagen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    generate_dataset(cfg.dataset.n_scenes, cfg.scene, cfg.sensor, cfg.dataset.base_seed, out,
                     cfg.dataset.paired_rain_val, jobs=args.jobs)
    rc.dump(cfg, out / CONFIG_NAME)
    print(f"wrote {cfg.dataset.n_scenes} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.data)
    _, records = run_training(cfg, dataset, args.out, run_id=args.run_id)
    last = records[-1]
    print(lrio.dumps({k: last.get(k) for k in ("epoch", "loss", "ap", "velocity_error")}))
    return 0


def _checkpoint_config(args) -> rc.RunConfig:
    if args.config is not None:
        return _config(args)
    echoed = Path(args.checkpoint).parent / CONFIG_NAME
    if not echoed.exists():
        raise rc.ConfigError(f"no --config given and no {CONFIG_NAME} next to the checkpoint")
    return rc.load(echoed)


def cmd_eval(args) -> int:
    cfg = _checkpoint_config(args)
    params = load_trained(args.checkpoint, cfg)
    dataset = load_dataset(args.data, [args.split])
    record = {"run_id": args.run_id, "mode": cfg.pipeline.mode.value,
              "gate_mode": cfg.pipeline.gate.mode.value, "seed": cfg.pipeline.seed,
              **eval_split(params, dataset, args.split)}
    text = lrio.dumps(record)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.jsonl").write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SEEDS, run_checks

    seeds = SEEDS if args.seed is None else tuple(range(args.seed, args.seed + len(SEEDS)))
    report = run_checks(seeds=seeds)
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0 if report["passed"] else 1


def cmd_ablate(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(args.data)
    report = run_ablation(cfg, dataset, args.out)
    print((Path(args.out) / "ablation.md").read_text())
    return 0 if len(report["rows"]) == 5 else 1


def cmd_export_weights(args) -> int:
    cfg = _checkpoint_config(args)
    if not cfg.pipeline.mode.gated:
        raise rc.ConfigError(f"mode {cfg.pipeline.mode.value} has no gate to export")
    params = load_trained(args.checkpoint, cfg)
    manifest = lrio.load_manifest(args.data)
    entry = next((e for e in manifest["scenes"] if e["id"] == args.scene), None)
    if entry is None:
        raise KeyError(f"scene {args.scene!r} not in {args.data}")
    scene = lrio.load_scene(args.data, entry)
    weights = forward([prepare_sample(scene, cfg.pipeline)], params).weights
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for expert in Expert:
        grid = export_weight_map(weights, expert)
        stem = f"{args.scene}_{expert.value.lower()}"
        (out / f"{stem}.pgm").write_bytes(lrio.encode_pgm(grid))
        lrio.write_csv_grid(out / f"{stem}.csv", grid)
        print(f"{stem}: mean {grid.mean():.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, data=False, out_required=True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--mode", choices=[m.value for m in Mode], help="override the fusion mode")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for per-scene work")
        p.add_argument("--out", required=out_required, help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        p.set_defaults(func=fn)
        return p

    add("datagen", cmd_datagen, "generate a synthetic dataset")
    add("train", cmd_train, "train one configuration", data=True).add_argument("--run-id", default="run")
    p = add("eval", cmd_eval, "evaluate a checkpoint", data=True, out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--run-id", default="eval")
    add("gradcheck", cmd_gradcheck, "run every registered gradient check", out_required=False)
    add("ablate", cmd_ablate, "train and compare the five ablation rows", data=True)
    p = add("export-weights", cmd_export_weights, "write gate weight maps for one scene", data=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (rc.ConfigError, dm.ConfigurationError, lrio.FormatError, TrainingAborted,
            FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
