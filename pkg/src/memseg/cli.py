"""Command-line entry point: gen-data, train, infer, eval, ensemble."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import InferenceConfig, RunConfig
from .data import (DataIOError, DatasetManifest, ManifestError, SyntheticConfig, generate_synthetic,
                   load_clip, load_split, read_pgm, write_pgm)
from .experiments import format_rows
from .metrics import ConfusionMatrix
from .model import SegModel
from .pipeline import ensemble, multi_stage_infer
from .training import FrameSource, Trainer, build_trainer, write_log

log = logging.getLogger("memseg")


class UsageError(Exception):
    """Bad user input; exits with status 2."""


USER_ERRORS = (UsageError, T.ConfigError, T.ShapeError, ManifestError, DataIOError, FileNotFoundError)


def stage_path(root: Path, vid: str, t: int, stage: int) -> Path:
    return root / vid / f"{t:05d}_stage{stage}.pgm"


def probs_path(root: Path, vid: str, t: int) -> Path:
    return root / vid / f"{t:05d}_probs.mstf"


def _load_manifest(path) -> DatasetManifest:
    if path is None or not (Path(path) / "manifest.json").exists():
        raise UsageError(f"dataset not found at {path} (run gen-data first)")
    return DatasetManifest.load(path)


def _videos(manifest: DatasetManifest, split: str):
    vids = manifest.split(split)
    if not vids:
        raise UsageError(f"split {split!r} of {manifest.root} has no videos")
    return vids


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(n_train=args.train, n_val=args.val, frames_per_video=args.frames,
                          height=args.size[0], width=args.size[1], num_classes=args.classes)
    manifest = generate_synthetic(args.out, args.seed, cfg)
    print(f"wrote {len(manifest.videos)} videos to {manifest.root}")
    return 0


# ---------------------------------------------------------------- train


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    if args.variant is not None:
        cfg.variant = args.variant
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.steps is not None:
        cfg.train.steps = args.steps
    if args.checkpoint_every is not None:
        cfg.train.checkpoint_every = args.checkpoint_every
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    manifest = _load_manifest(args.data)
    clips = load_split(manifest, "train")
    if not clips:
        raise UsageError(f"{manifest.root} has no training videos")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        if not Path(args.resume).exists():
            raise UsageError(f"checkpoint {args.resume} not found")
        sections, meta = T.load_bundle(args.resume)
        trainer = Trainer.resume(args.resume, FrameSource(clips, np.dtype(meta["model"]["dtype"])))
        if args.steps is not None:
            trainer.cfg.train.steps = args.steps
        log_records = _read_log(out / "train_log.jsonl")[:trainer.step_index]
    else:
        cfg = _run_config(args)
        if cfg.model.num_classes != manifest.num_classes:
            log.info("model num_classes set from manifest: %d", manifest.num_classes)
            cfg.model.num_classes = manifest.num_classes
        trainer = build_trainer(cfg, clips)
        log_records = []
    every = trainer.cfg.train.checkpoint_every

    def on_step(tr):
        log.debug("step %d loss %.5f", tr.step_index, tr.log[-1]["loss"])
        if every and tr.step_index % every == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            tr.save(out / "checkpoints" / f"step_{tr.step_index:06d}.ckpt")

    trainer.run(on_step=on_step)
    trainer.save(out / "model.ckpt")
    write_log(out / "train_log.jsonl", log_records + trainer.log)
    last = trainer.log[-1]["loss"] if trainer.log else float("nan")
    print(f"trained {trainer.model.variant} to step {trainer.step_index}; final loss {last:.4f}")
    return 0


def _read_log(path: Path) -> list:
    if not path.exists():
        return []
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------- infer


def _inference_config(args) -> InferenceConfig:
    cfg = InferenceConfig(scales=tuple(args.scales), flip=args.flip, stages=args.stages)
    cfg.validate()
    return cfg


def cmd_infer(args) -> int:
    manifest = _load_manifest(args.data)
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    model, _, _ = SegModel.load(args.checkpoint)
    if model.cfg.num_classes != manifest.num_classes:
        raise UsageError(f"checkpoint has K={model.cfg.num_classes}, dataset K={manifest.num_classes}")
    icfg = _inference_config(args)
    out = Path(args.out)
    vids = _videos(manifest, args.split)

    def run(entry):
        clip = load_clip(manifest, entry.id)
        return multi_stage_infer(model, clip.float_frames(model.dtype), icfg.stages, icfg)

    results = _map(run, vids, args.jobs)
    for entry, res in zip(vids, results):
        (out / entry.id).mkdir(parents=True, exist_ok=True)
        for t, stages in enumerate(res.per_frame):
            for sm in stages:
                write_pgm(stage_path(out, entry.id, t, sm.stage), sm.mask)
            if args.save_probs:
                T.save_tensor(probs_path(out, entry.id, t), res.final_probs[t])
    changes = np.sum([r.changes for r in results], axis=0).tolist()
    summary = {"variant": model.variant, "split": args.split, "stages": icfg.stages,
               "scales": list(icfg.scales), "flip": icfg.flip, "pixel_changes": changes}
    with open(out / "inference.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    print(f"wrote masks for {len(vids)} videos, stages 0..{icfg.stages}; pixel changes per stage {changes}")
    return 0


# ---------------------------------------------------------------- eval


def _stage_count(manifest, vids, root: Path) -> int:
    n = 0
    while all(stage_path(root, v.id, t, n).exists() for v in vids for t in range(v.frames)):
        n += 1
    if n == 0:
        raise UsageError(f"no complete set of stage0 masks under {root}")
    return n


def evaluate_dir(manifest: DatasetManifest, vids, root: Path, name: str, jobs: int = 1) -> list:
    rows = []
    gts = {}
    for s in range(_stage_count(manifest, vids, root)):
        def score(entry):
            if entry.id not in gts:
                gts[entry.id] = load_clip(manifest, entry.id).masks
            cm = ConfusionMatrix(manifest.num_classes)
            for t, gt in enumerate(gts[entry.id]):
                pred = read_pgm(stage_path(root, entry.id, t, s))
                if pred.shape != gt.shape:
                    raise UsageError(f"{stage_path(root, entry.id, t, s)}: dims {pred.shape} vs GT {gt.shape}")
                if pred.max(initial=0) >= manifest.num_classes:
                    raise UsageError(f"{stage_path(root, entry.id, t, s)}: label outside [0, {manifest.num_classes})")
                cm.add(pred, gt)
            return cm

        total = ConfusionMatrix(manifest.num_classes)
        for cm in _map(score, vids, jobs):  # merged in manifest order
            total = total.merge(cm)
        rows.append({"name": name, "stage": s, **total.report()})
    return rows


def _named_dirs(specs):
    out = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        out.append((name, Path(path)) if sep else (Path(spec).name, Path(spec)))
    return out


def _emit_report(rows, split, report_path):
    report = {"split": split, "results": rows}
    table = format_rows([[r["name"], f"stage{r['stage']}", f"{100 * r['miou']:.2f}", f"{100 * r['pixel_acc']:.2f}"]
                         for r in rows], ["method", "stage", "mIoU", "pixel acc"])
    print(table)
    if report_path:
        with open(report_path, "w") as f:
            json.dump(report, f, indent=1, sort_keys=True)
            f.write("\n")
    return report


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.data)
    vids = _videos(manifest, args.split)
    rows = []
    for name, root in _named_dirs(args.pred):
        rows += evaluate_dir(manifest, vids, root, name, args.jobs)
    _emit_report(rows, args.split, args.report)
    return 0


# ---------------------------------------------------------------- ensemble


def cmd_ensemble(args) -> int:
    manifest = _load_manifest(args.data)
    vids = _videos(manifest, args.split)
    out = Path(args.out)
    for entry in vids:
        (out / entry.id).mkdir(parents=True, exist_ok=True)
        for t in range(entry.frames):
            pa, pb = probs_path(Path(args.probs_a), entry.id, t), probs_path(Path(args.probs_b), entry.id, t)
            for p in (pa, pb):
                if not p.exists():
                    raise UsageError(f"missing probability map {p}")
            a, b = T.load_tensor(pa), T.load_tensor(pb)
            if a.shape != b.shape:
                raise UsageError(f"{pa} has shape {a.shape} but {pb} has {b.shape}")
            write_pgm(stage_path(out, entry.id, t, 0), ensemble(a, b))
    rows = evaluate_dir(manifest, vids, out, "ensemble")
    _emit_report(rows, args.split, args.report)
    return 0


# ---------------------------------------------------------------- entry


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="memseg", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic moving-shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=40)
    g.add_argument("--val", type=int, default=10)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    g.add_argument("--classes", type=int, default=5)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON run config; flags below override it")
    t.add_argument("--variant")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="continue from a checkpoint written by train")
    t.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; training is one stream")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="predict masks for a split")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--split", default="val")
    i.add_argument("--stages", type=int, default=0)
    i.add_argument("--scales", type=float, nargs="+", default=[1.0])
    i.add_argument("--flip", action="store_true")
    i.add_argument("--save-probs", action="store_true")
    i.add_argument("--jobs", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score saved masks against ground truth")
    e.add_argument("--data", required=True)
    e.add_argument("--pred", nargs="+", required=True, metavar="[NAME=]DIR")
    e.add_argument("--split", default="val")
    e.add_argument("--report")
    e.add_argument("--jobs", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("ensemble", help="sum two sets of saved probability maps")
    s.add_argument("--data", required=True)
    s.add_argument("--probs-a", required=True)
    s.add_argument("--probs-b", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--report")
    s.set_defaults(func=cmd_ensemble)
    return ap


def main(argv=None) -> int:
    level = os.environ.get("MEMSEG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
