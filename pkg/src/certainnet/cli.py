"""Command-line front end: ``certainnet {synth,train,infer,eval}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
Set ``CERTAINNET_LOG`` (e.g. ``DEBUG``) to change log verbosity.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .decode import (DecodeConfig, DumpFormatError, decode, read_detections,
                     read_heatmap_dump, write_detections, write_heatmap_dump)
from .metrics import EvalConfig, evaluate
from .model import CertainNetModel, CheckpointError
from .synthdata import (DatasetError, SceneConfig, ShiftConfig, apply_shift, generate_dataset,
                        load_dataset, save_dataset)
from .training import ABLATIONS, TrainConfig, TrainingDiverged, train

log = logging.getLogger("certainnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _read_json_config(path, required=True):
    if path is None:
        if required:
            raise UsageError("--config is required")
        return {}
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return data


def _write_manifest(path, command, config, seed, inputs, outputs, timings):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "python": platform.python_version(),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timings": timings,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    raw = _read_json_config(args.config)
    raw = dict(raw)
    count = int(raw.pop("count", 100))
    start = int(raw.pop("start_index", 0))
    shift_raw = raw.pop("shift", None)
    shift_seed = int(raw.pop("shift_seed", 0))
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.count is not None:
        count = args.count
    try:
        config = SceneConfig.from_dict(raw)
        shift = ShiftConfig(**shift_raw) if shift_raw else None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scene config: {exc}") from None
    t0 = time.perf_counter()
    scenes = generate_dataset(config, count, start)
    if shift is not None:
        scenes = [apply_shift(s, shift, shift_seed) for s in scenes]
    out = Path(args.out)
    save_dataset(out, scenes, config)
    elapsed = time.perf_counter() - t0
    resolved = {"scene": config.to_dict(), "count": count, "start_index": start,
                "shift": None if shift is None else vars(shift), "shift_seed": shift_seed}
    _write_manifest(out / "run_manifest.json", "synth", resolved, config.seed,
                    {"config": args.config}, {"dataset": out}, {"total_s": elapsed})
    log.info("wrote %d scenes to %s", len(scenes), out)
    return EXIT_OK


def _load_scenes(path):
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"dataset directory not found: {path}")
    return load_dataset(path)


def cmd_train(args):
    raw = _read_json_config(args.config, required=False)
    try:
        config = TrainConfig.desk(**raw)
        if args.ablation:
            config = config.with_ablation(args.ablation)
        if args.epochs is not None:
            config = TrainConfig.from_dict({**config.to_dict(), "epochs": args.epochs,
                                            "freeze_epochs": min(config.freeze_epochs,
                                                                 args.epochs)})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None
    scenes = _load_scenes(args.dataset)
    if not scenes:
        raise DataError(f"{args.dataset}: dataset is empty")
    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    model, trace = train(scenes, config, seed=seed)
    elapsed = time.perf_counter() - t0
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    trace_path = out.with_name(out.name + ".trace.csv")
    trace.write_csv(trace_path)
    _write_manifest(out.with_name(out.name + ".manifest.json"), "train",
                    {"train": config.to_dict(), "flags": trace.flags,
                     "ablation": args.ablation}, seed,
                    {"dataset": args.dataset, "config": args.config},
                    {"checkpoint": out, "trace": trace_path}, {"total_s": elapsed})
    return EXIT_OK


def cmd_infer(args):
    src = Path(args.input)
    decode_config = DecodeConfig(threshold=args.threshold, eta=args.eta,
                                 boundary_scale=args.boundary_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    detections, latencies, dumped = [], [], []
    if src.is_file():
        mode = "post-hoc"
        for image_id, heads in read_heatmap_dump(src):
            t0 = time.perf_counter()
            detections.extend(decode(heads, decode_config, image_id))
            latencies.append((image_id, (time.perf_counter() - t0) * 1e3))
    elif src.is_dir():
        mode = "model"
        if args.checkpoint is None:
            raise UsageError("--checkpoint is required when the input is a dataset")
        model = CertainNetModel.load(args.checkpoint)
        scenes = _load_scenes(src)
        n_cls = model.config.n_classes
        for s in scenes:
            if len(s.classes) and s.classes.max() >= n_cls:
                raise DataError(
                    f"{src}: image {s.image_id} has class {int(s.classes.max())} but "
                    f"checkpoint {args.checkpoint} knows {n_cls} classes")
        for s in scenes:
            t0 = time.perf_counter()
            heads = model.forward(s.image)
            dets = decode(heads, decode_config, s.image_id)
            latencies.append((s.image_id, (time.perf_counter() - t0) * 1e3))
            detections.extend(dets)
            if args.export_heatmaps:
                dumped.append((s.image_id, heads))
        if args.export_heatmaps:
            write_heatmap_dump(args.export_heatmaps, dumped)
    else:
        raise DataError(f"input not found: {src}")
    write_detections(out, detections)
    lat_path = out.with_name(out.name + ".latency.csv")
    with open(lat_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image_id", "ms"))
        writer.writerows((i, f"{ms:.3f}") for i, ms in latencies)
    outputs = {"detections": out, "latency": lat_path}
    if args.export_heatmaps:
        outputs["heatmaps"] = args.export_heatmaps
    _write_manifest(out.with_name(out.name + ".manifest.json"), "infer",
                    {"mode": mode, "decode": vars(decode_config)}, None,
                    {"input": src, "checkpoint": args.checkpoint}, outputs,
                    {"total_ms": float(sum(ms for _, ms in latencies))})
    return EXIT_OK


def _group(dets):
    grouped = {}
    for d in dets:
        grouped.setdefault(d.image_id, []).append(d)
    return grouped


def _check_ids(dets_path, grouped, gts):
    unknown = sorted(set(grouped) - set(gts), key=str)
    if unknown:
        raise DataError(f"{dets_path}: image ids not in dataset: {unknown[:20]}"
                        + (" ..." if len(unknown) > 20 else ""))


def cmd_eval(args):
    raw = _read_json_config(args.config, required=False)
    try:
        config = EvalConfig.from_dict(raw)
    except TypeError as exc:
        raise UsageError(f"invalid eval config: {exc}") from None
    if args.iou_thresh is not None:
        config.iou_threshold = args.iou_thresh
    if args.bins is not None:
        config.n_bins = args.bins
    if args.boundary_scale is not None:
        config.boundary_scale = args.boundary_scale
    t0 = time.perf_counter()
    scenes = _load_scenes(args.dataset)
    gts = {s.image_id: (s.boxes, s.classes) for s in scenes}
    dets = _group(read_detections(args.detections))
    _check_ids(args.detections, dets, gts)
    report = evaluate(dets, gts, config)
    out = Path(args.out)
    report.write(out)
    summary = report.summary()
    if args.shifted:
        shifted_dets = read_detections(args.shifted)
        u = [1.0 - d.score for d in shifted_dets]
        mean_u = float(np.mean(u)) if u else None
        shifted = {
            "detections": str(args.shifted),
            "mean_u_obj": mean_u,
            "delta_u_obj": (None if mean_u is None or report.mean_u_obj is None
                            else mean_u - report.mean_u_obj),
        }
        if args.shifted_dataset:
            sscenes = _load_scenes(args.shifted_dataset)
            sgts = {s.image_id: (s.boxes, s.classes) for s in sscenes}
            sgrouped = _group(shifted_dets)
            _check_ids(args.shifted, sgrouped, sgts)
            shifted["report"] = evaluate(sgrouped, sgts, config).summary()
        summary["shifted"] = shifted
        (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_manifest(out / "run_manifest.json", "eval", vars(config), None,
                    {"detections": args.detections, "dataset": args.dataset,
                     "shifted": args.shifted}, {"report": out / "report.json"},
                    {"total_s": time.perf_counter() - t0})
    print(json.dumps({k: summary[k] for k in ("ap", "aupr_in", "aupr_out", "auroc", "ece", "ue",
                                              "ce_loc", "ubq_loc", "ce_dims", "ubq_dims")}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="certainnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", help="JSON scene config (SceneConfig keys, plus count, "
                                    "start_index, shift, shift_seed)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector on a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="JSON TrainConfig overrides (desk preset otherwise)")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="detect objects, or decode a heatmap dump post hoc")
    p.add_argument("input", help="dataset directory, or heatmap dump (.jsonl) for post-hoc mode")
    p.add_argument("--out", required=True, help="detections JSON Lines path")
    p.add_argument("--checkpoint")
    p.add_argument("--export-heatmaps", help="also write the raw head outputs as a dump")
    p.add_argument("--threshold", type=float, default=DecodeConfig.threshold)
    p.add_argument("--eta", type=float, default=DecodeConfig.eta)
    p.add_argument("--boundary-scale", type=float, default=DecodeConfig.boundary_scale)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate detections against a dataset")
    p.add_argument("detections")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--config", help="JSON EvalConfig")
    p.add_argument("--iou-thresh", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--boundary-scale", type=float)
    p.add_argument("--shifted", help="detections on shifted data for the mean U_obj delta")
    p.add_argument("--shifted-dataset", help="ground truth for --shifted (full shifted report)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    level = os.environ.get("CERTAINNET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"certainnet {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetError, DumpFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"certainnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"certainnet {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
