"""Augmentation, loss, AdamW and the training loop with memory updates."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import AugmentConfig, MemoryConfig, RunConfig, TrainConfig, substream
from .data import IGNORE
from .memory import FeatureMemory, init_memory
from .model import SegModel
from .temporal import TemporalMemory
from .tensor import ConfigError, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- sampling


@dataclass
class FrameSample:
    clip: int
    index: int
    frame: np.ndarray  # (3, H, W) float
    mask: np.ndarray
    prev_mask: np.ndarray | None


class FrameSource:
    """Training clips held in memory as float frames."""

    def __init__(self, clips, dtype=np.float32):
        self.clips = list(clips)
        if not self.clips or not any(len(c) for c in self.clips):
            raise ConfigError("training split is empty")
        self.frames = [c.float_frames(dtype) for c in self.clips]
        self.masks = [list(c.masks) for c in self.clips]
        self.pairs = [(ci, t) for ci, c in enumerate(self.clips) for t in range(len(c))]

    def get(self, ci: int, t: int) -> FrameSample:
        prev = self.masks[ci][t - 1] if t > 0 else None
        return FrameSample(ci, t, self.frames[ci][t], self.masks[ci][t], prev)


def sample_frame(source: FrameSource, rng: np.random.Generator) -> FrameSample:
    """Uniform draw over all (video, frame) pairs of the training split."""
    ci, t = source.pairs[int(rng.integers(len(source.pairs)))]
    return source.get(ci, t)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentParams:
    scale: float = 1.0
    flip: bool = False
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    # crop offset into the rescaled image (pad happens at bottom/right)
    offset: tuple = (0, 0)


def sample_augment(cfg: AugmentConfig, rng: np.random.Generator, size, crop) -> AugmentParams:
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi))
    flip = bool(rng.random() < cfg.flip_prob)
    b = float(rng.uniform(-cfg.brightness, cfg.brightness))
    c = 1.0 + float(rng.uniform(-cfg.contrast, cfg.contrast))
    s = 1.0 + float(rng.uniform(-cfg.saturation, cfg.saturation))
    sh, sw = _scaled(size, scale)
    oy = int(rng.integers(sh - crop[0] + 1)) if sh > crop[0] else 0
    ox = int(rng.integers(sw - crop[1] + 1)) if sw > crop[1] else 0
    return AugmentParams(scale, flip, b, c, s, (oy, ox))


def _scaled(size, scale):
    return max(1, int(round(size[0] * scale))), max(1, int(round(size[1] * scale)))


def _crop_pad(x: np.ndarray, offset, crop, fill):
    h, w = x.shape[-2:]
    oy, ox = offset
    part = x[..., oy:oy + crop[0], ox:ox + crop[1]]
    if part.shape[-2:] == tuple(crop):
        return part.copy()
    out = np.full(x.shape[:-2] + tuple(crop), fill, dtype=x.dtype)
    out[..., :part.shape[-2], :part.shape[-1]] = part
    return out


def color_jitter(frame: np.ndarray, p: AugmentParams) -> np.ndarray:
    x = frame
    if p.brightness != 0.0:
        x = x + p.brightness
    if p.contrast != 1.0:
        m = x.mean()
        x = (x - m) * p.contrast + m
    if p.saturation != 1.0:
        gray = x.mean(axis=-3, keepdims=True)
        x = gray + (x - gray) * p.saturation
    if x is frame:
        return frame
    return np.clip(x, 0.0, 1.0).astype(frame.dtype)


def apply_augment(frames, masks, p: AugmentParams, crop):
    """Apply one geometric draw to every frame (bilinear) and mask (nearest).

    Colour jitter touches frames only; padded mask pixels are IGNORE.
    """
    out_f, out_m = [], []
    for f in frames:
        f = np.asarray(f)
        size = f.shape[-2:]
        sh, sw = _scaled(size, p.scale)
        if (sh, sw) != tuple(size):
            f = T.bilinear_resize(T.Tensor(f), sh, sw).data
        if p.flip:
            f = T.hflip(f)
        f = color_jitter(f, p)
        out_f.append(_crop_pad(f, p.offset, crop, 0.0))
    for m in masks:
        if m is None:
            out_m.append(None)
            continue
        m = np.asarray(m)
        sh, sw = _scaled(m.shape, p.scale)
        m = T.nearest_resize(m, sh, sw)
        if p.flip:
            m = T.hflip(m)
        out_m.append(_crop_pad(m, p.offset, crop, IGNORE))
    return out_f, out_m


def augment(frame, mask, cfg: AugmentConfig, rng, crop=None):
    crop = crop or frame.shape[-2:]
    p = sample_augment(cfg, rng, frame.shape[-2:], crop)
    (f,), (m,) = apply_augment([frame], [mask], p, crop)
    return f, m


# ---------------------------------------------------------------- loss / optimizer


def cross_entropy_loss(probs: Tensor, gt) -> Tensor:
    """Mean -log p[gt] over non-ignored pixels, with p clamped at 1e-12."""
    gt = np.asarray(gt)
    if probs.shape[-2:] != gt.shape[-2:]:
        raise T.ShapeError(f"probabilities {probs.shape} do not match labels {gt.shape}")
    if not (gt != IGNORE).any():
        log.warning("every pixel ignored; loss is 0")
    return T.nll_of_probs(probs, gt, IGNORE)


class AdamW:
    """Adam with decoupled weight decay (decay applied to the weights before the Adam step)."""

    def __init__(self, lr: float = 1e-3, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise T.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)

    def state(self):
        sections = {}
        for name in self.m:
            sections[f"adam.m.{name}"] = self.m[name]
            sections[f"adam.v.{name}"] = self.v[name]
        return sections, {"steps": self.steps, "lr": self.lr, "weight_decay": self.weight_decay}

    def load(self, sections: dict, meta: dict, dtype) -> None:
        self.steps = int(meta["steps"])
        self.m = {k[len("adam.m."):]: np.array(v, dtype=dtype) for k, v in sections.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: np.array(v, dtype=dtype) for k, v in sections.items() if k.startswith("adam.v.")}


def adamw_step(params: dict, grads: dict, state: AdamW, lr: float, wd: float) -> AdamW:
    state.weight_decay = wd
    state.step(params, grads, lr)
    return state


# ---------------------------------------------------------------- training loop


@dataclass
class Batch:
    frames: np.ndarray        # (N, 3, h, w)
    masks: np.ndarray         # (N, h, w)
    guides: list              # previous-frame masks or None
    history: list             # per item: list of (3, h, w) earlier frames, oldest first
    history_frames_prev: list  # per item: previous frame or None (for live guidance)


def polynomial_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return base
    return base * (1.0 - min(step, total) / total) ** power


class Trainer:
    def __init__(self, model: SegModel, source: FrameSource, cfg: RunConfig):
        self.model = model
        self.source = source
        self.cfg = cfg
        tc = cfg.train
        self.opt = AdamW(tc.lr, tc.weight_decay)
        self.rng = substream(cfg.seed, "train-data")
        self.step_index = 0
        self.log = []

    # -- setup

    def init_memory(self) -> None:
        """Seed the class memory from one pass over the training frames."""
        if not self.model.uses_memory:
            return
        mc: MemoryConfig = self.cfg.memory

        def samples():
            with T.no_grad():
                for frames, masks in zip(self.source.frames, self.source.masks):
                    for f, m in zip(frames, masks):
                        _, r = self.model.features(f)
                        yield r.data, m

        k, c = self.model.cfg.num_classes, self.model.cfg.embed_dim
        self.model.memory = init_memory(samples(), k, c, substream(self.cfg.seed, "memory-init"),
                                        dtype=self.model.dtype, momentum=mc.momentum, mode=mc.mode,
                                        power=mc.power, total_steps=self.cfg.train.steps)

    # -- batches

    def next_batch(self) -> Batch:
        tc = self.cfg.train
        crop = tuple(tc.crop)
        n_hist = self.model.cfg.temporal_len if self.model.variant == "decoder_b" else 0
        frames, masks, guides, hist, prevs = [], [], [], [], []
        for _ in range(tc.batch_size):
            s = sample_frame(self.source, self.rng)
            p = sample_augment(self.cfg.augment, self.rng, s.frame.shape[-2:], crop)
            start = max(0, s.index - n_hist)
            past = [self.source.frames[s.clip][t] for t in range(start, s.index)]
            need_prev = tc.guidance == "prediction" and s.index > 0 and self.model.variant == "decoder_a"
            extra = [self.source.frames[s.clip][s.index - 1]] if need_prev else []
            fs, ms = apply_augment([s.frame] + past + extra, [s.mask, s.prev_mask], p, crop)
            frames.append(fs[0])
            masks.append(ms[0])
            guides.append(ms[1])
            hist.append(fs[1:1 + len(past)])
            prevs.append(fs[-1] if need_prev else None)
        return Batch(np.stack(frames), np.stack(masks), guides, hist, prevs)

    # -- one step

    def guidance_for(self, batch: Batch, first_pass: np.ndarray, step_index: int, total: int):
        if step_index < math.floor(self.cfg.train.warmup_fraction * total):
            return batch.masks.copy()
        if self.model.variant == "decoder_b":
            return first_pass
        out = []
        for i, g in enumerate(batch.guides):
            if self.cfg.train.guidance == "prediction" and batch.history_frames_prev[i] is not None:
                prev = batch.history_frames_prev[i]
                with T.no_grad():
                    g0 = self.model.first_pass_mask(prev)
                    g = self.model.forward(prev, guidance=g0).probs.data.argmax(axis=-3)
            elif g is None:
                g = first_pass[i]
            else:
                g = np.where(g == IGNORE, first_pass[i], g)
            out.append(g)
        return np.stack(out)

    def loss_and_forward(self, batch: Batch, step_index: int, total: int):
        model = self.model
        out_h, out_w = batch.frames.shape[-2:]
        c_wi, r = model.features(batch.frames)
        first = model.first_pass(c_wi, out_h, out_w)
        if model.variant == "baseline":
            return cross_entropy_loss(first, batch.masks), None
        first_mask = first.data.argmax(axis=-3)
        guidance = self.guidance_for(batch, first_mask, step_index, total)
        if model.variant == "decoder_a":
            query = r
        else:
            states = []
            with T.no_grad():
                for past in batch.history:
                    mem = TemporalMemory(model.cfg.temporal_len)
                    for f in past:
                        mem = mem.push(model.features(f)[1].data)
                    states.append(mem)
            query = model.temporal(states, r)
        probs = model.memory_branch(query, c_wi, guidance, out_h, out_w)
        loss = cross_entropy_loss(probs, batch.masks)
        if self.cfg.train.first_pass_weight:
            loss = loss + cross_entropy_loss(first, batch.masks) * self.cfg.train.first_pass_weight
        return loss, query

    def train_step(self, batch: Batch | None = None) -> float:
        total = self.cfg.train.steps
        batch = batch or self.next_batch()
        params = self.model.trainable()
        loss, mem_input = self.loss_and_forward(batch, self.step_index, total)
        grads = T.grad(loss, params)
        lr = polynomial_lr(self.cfg.train.lr, self.step_index, total)
        self.opt.step(params, grads, lr)
        if mem_input is not None:
            self.model.memory.update(mem_input.data, batch.masks, self.cfg.memory.transform_mode)
        self.step_index += 1
        rec = {"step": self.step_index, "loss": float(loss.data), "lr": lr,
               "memory_t": self.model.memory.t}
        self.log.append(rec)
        return rec["loss"]

    def run(self, steps: int | None = None, on_step=None) -> list:
        end = self.cfg.train.steps if steps is None else min(self.cfg.train.steps, self.step_index + steps)
        while self.step_index < end:
            self.train_step()
            if on_step is not None:
                on_step(self)
        return self.log

    # -- persistence

    def save(self, path) -> None:
        adam_sections, adam_meta = self.opt.state()
        meta = {"run": self.cfg.to_dict(), "step": self.step_index, "adam": adam_meta,
                "rng": self.rng.bit_generator.state}
        self.model.save(path, adam_sections, meta)

    @classmethod
    def resume(cls, path, source: FrameSource) -> "Trainer":
        model, sections, meta = SegModel.load(path)
        cfg = RunConfig.from_dict(meta["run"])
        tr = cls(model, source, cfg)
        tr.step_index = int(meta["step"])
        tr.opt.load(sections, meta["adam"], model.dtype)
        tr.rng.bit_generator.state = meta["rng"]
        return tr


def build_trainer(cfg: RunConfig, clips) -> Trainer:
    if cfg.variant == "ensemble":
        raise ConfigError("train decoder_a and decoder_b separately; ensembling happens at inference")
    model = SegModel(cfg.model, cfg.variant, cfg.seed)
    source = FrameSource(clips, model.dtype)
    tr = Trainer(model, source, cfg)
    tr.init_memory()
    return tr


def write_log(path, records) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
