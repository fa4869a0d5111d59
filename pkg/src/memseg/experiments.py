"""Toy-scale ablations mirroring the ensemble and multi-stage tables."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import InferenceConfig, RunConfig
from .data import DatasetManifest, load_split
from .metrics import ConfusionMatrix
from .model import SegModel
from .pipeline import ensemble, multi_stage_infer, video_infer
from .training import build_trainer

log = logging.getLogger(__name__)


@dataclass
class SeedResult:
    seed: int
    miou: dict = field(default_factory=dict)
    pixel_acc: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {"seed": self.seed, "miou": self.miou, "pixel_acc": self.pixel_acc, "seconds": self.seconds}


def train_variant(variant: str, train_clips, seed: int, steps: int, base: RunConfig | None = None) -> SegModel:
    cfg = RunConfig.from_dict(base.to_dict()) if base else RunConfig()
    cfg.variant = variant
    cfg.seed = seed
    cfg.train.steps = steps
    trainer = build_trainer(cfg, train_clips)
    trainer.run()
    return trainer.model


def evaluate_model(model: SegModel, clips, cfg: InferenceConfig | None = None):
    """Returns (confusion matrix, per-frame probability maps per clip)."""
    cm = ConfusionMatrix(model.cfg.num_classes)
    probs = []
    for clip in clips:
        masks, p = video_infer(model, clip.float_frames(model.dtype), cfg)
        for m, g in zip(masks, clip.masks):
            cm.add(m, g)
        probs.append(p)
    return cm, probs


def ensemble_table(data_root, seeds=(0, 1, 2), steps: int = 2000, base: RunConfig | None = None,
                   progress=None, keep_models: bool = False) -> list:
    """Train baseline, Decoder A and Decoder B per seed and score them on val."""
    manifest = DatasetManifest.load(data_root)
    train, val = load_split(manifest, "train"), load_split(manifest, "val")
    results = []
    for seed in seeds:
        res = SeedResult(seed)
        probs = {}
        for variant in ("baseline", "decoder_a", "decoder_b"):
            t0 = time.perf_counter()
            model = train_variant(variant, train, seed, steps, base)
            cm, probs[variant] = evaluate_model(model, val)
            res.miou[variant] = cm.miou()
            res.pixel_acc[variant] = cm.pixel_accuracy()
            res.seconds[variant] = time.perf_counter() - t0
            if keep_models:
                res.models[variant] = model
            if progress:
                progress(f"seed {seed} {variant}: mIoU {res.miou[variant]:.4f} ({res.seconds[variant]:.0f}s)")
        cm = ConfusionMatrix(manifest.num_classes)
        for clip, pa, pb in zip(val, probs["decoder_a"], probs["decoder_b"]):
            for a, b, g in zip(pa, pb, clip.masks):
                cm.add(ensemble(a, b), g)
        res.miou["ensemble"] = cm.miou()
        res.pixel_acc["ensemble"] = cm.pixel_accuracy()
        if progress:
            progress(f"seed {seed} ensemble: mIoU {res.miou['ensemble']:.4f}")
        results.append(res)
    return results


def stage_table(model: SegModel, clips, n_stages: int = 4, cfg: InferenceConfig | None = None) -> dict:
    """Per-stage mIoU and pixel-change counts of multi-stage inference."""
    k = model.cfg.num_classes
    cms = [ConfusionMatrix(k) for _ in range(n_stages + 1)]
    changes = np.zeros(n_stages + 1, dtype=np.int64)
    results = []
    for clip in clips:
        res = multi_stage_infer(model, clip.float_frames(model.dtype), n_stages, cfg)
        results.append(res)
        changes += np.asarray(res.changes)
        for s in range(n_stages + 1):
            for m, g in zip(res.stage_masks(s), clip.masks):
                cms[s].add(m, g)
    return {"miou": [cm.miou() for cm in cms], "changes": changes.tolist(), "results": results}


def format_rows(rows, headers) -> str:
    cells = [headers] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
