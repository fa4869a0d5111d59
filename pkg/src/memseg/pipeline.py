"""Decoder forward paths, ensembling, and video-level inference strategies."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import SINGLE_SCALE, InferenceConfig
from .model import SegModel
from .temporal import TemporalMemory

log = logging.getLogger(__name__)


@dataclass
class StageMask:
    stage: int
    mask: np.ndarray


@dataclass
class MultiStageResult:
    # per_frame[i] lists that frame's StageMask for stage 0..n
    per_frame: list
    # pixels whose label changed relative to the previous stage; entry 0 is 0
    changes: list
    final_probs: list = field(default_factory=list)

    def stage_masks(self, stage: int) -> list:
        return [frame[stage].mask for frame in self.per_frame]


def decoder_a_forward(model: SegModel, frame, guidance) -> np.ndarray:
    with T.no_grad():
        return model.forward(frame, guidance=guidance).probs.data


def decoder_b_forward(model: SegModel, frame, tmem: TemporalMemory, guidance=None):
    with T.no_grad():
        out = model.forward(frame, guidance=guidance, state=tmem)
    return out.probs.data, out.state


def ensemble(p_a, p_b) -> np.ndarray:
    """Argmax of the summed class distributions; ties go to the lowest class."""
    p_a, p_b = np.asarray(p_a), np.asarray(p_b)
    if p_a.shape != p_b.shape:
        raise T.ShapeError(f"cannot ensemble {p_a.shape} with {p_b.shape}")
    return (p_a + p_b).argmax(axis=-3).astype(np.uint8)


def to_mask(probs) -> np.ndarray:
    return np.asarray(probs).argmax(axis=-3).astype(np.uint8)


def _scaled_dims(h: int, w: int, s: float):
    sh, sw = h * s, w * s
    if sh < 32 or sw < 32:
        return None
    return 32 * math.ceil(sh / 32 - 1e-9), 32 * math.ceil(sw / 32 - 1e-9)


def multi_scale_flip_infer(model: SegModel, frame, cfg: InferenceConfig, guidance=None, states=None):
    """Average class distributions over rescaled (and optionally mirrored) copies.

    ``states`` maps (scale, flipped) to that branch's temporal memory for
    Decoder B. Returns (probs K x H x W, updated states).
    """
    frame = np.asarray(frame)
    h, w = frame.shape[-2:]
    states = dict(states or {})
    maps = []
    with T.no_grad():
        for s in cfg.scales:
            dims = _scaled_dims(h, w, s)
            if dims is None:
                log.warning("scale %s skipped: %dx%d input too small", s, h, w)
                continue
            th, tw = dims
            img = frame if (th, tw) == (h, w) else T.bilinear_resize(T.Tensor(frame), th, tw).data
            for flipped in ((False, True) if cfg.flip else (False,)):
                x = T.hflip(img) if flipped else img
                g = None
                if guidance is not None:
                    g = T.hflip(guidance) if flipped else guidance
                key = (float(s), flipped)
                state = states.get(key) if model.variant == "decoder_b" else None
                if model.variant == "decoder_b" and state is None:
                    state = model.empty_state()
                out = model.forward(x, guidance=g, state=state)
                if model.variant == "decoder_b":
                    states[key] = out.state
                p = out.probs
                p = T.bilinear_resize(p, h, w).data
                maps.append(T.hflip(p) if flipped else p)
    if not maps:
        raise ValueError(f"every scale in {cfg.scales} is too small for a {h}x{w} frame")
    if len(maps) == 1:
        return maps[0], states
    avg = np.sum(maps, axis=0) / len(maps)
    return avg / avg.sum(axis=-3, keepdims=True), states


def video_infer(model: SegModel, frames, cfg: InferenceConfig | None = None, stage_guidance=None):
    """Predict every frame in order. Returns (masks, probs).

    Without ``cfg`` this is plain single-scale inference. Decoder A is guided
    by the previous frame's prediction (first pass for frame 0) unless
    ``stage_guidance`` supplies per-frame masks. Decoder B
    uses ``stage_guidance`` only when the model enables stage feedback.
    """
    cfg = cfg or InferenceConfig(scales=SINGLE_SCALE)
    frames = list(frames)
    if not frames:
        raise ValueError("cannot run inference on an empty clip")
    masks, probs = [], []
    states = {}
    prev = None
    for i, frame in enumerate(frames):
        guidance = None
        if model.variant == "decoder_a":
            if stage_guidance is not None:
                guidance = stage_guidance[i]
            elif prev is None:
                guidance = model.first_pass_mask(frame)
            else:
                guidance = prev
        elif model.variant == "decoder_b" and stage_guidance is not None and model.cfg.b_stage_feedback:
            guidance = stage_guidance[i]
        p, states = multi_scale_flip_infer(model, frame, cfg, guidance, states)
        prev = to_mask(p)
        masks.append(prev)
        probs.append(p)
    return masks, probs


def multi_stage_infer(model: SegModel, frames, n_stages: int, cfg: InferenceConfig | None = None) -> MultiStageResult:
    """Stage 0 is plain video inference; stage s re-runs with stage s-1's masks as guidance."""
    if n_stages < 0:
        raise ValueError("n_stages must be >= 0")
    frames = list(frames)
    masks, probs = video_infer(model, frames, cfg)
    history = [masks]
    changes = [0]
    for _ in range(n_stages):
        prev = history[-1]
        masks, probs = video_infer(model, frames, cfg, stage_guidance=prev)
        history.append(masks)
        changes.append(int(sum(int((a != b).sum()) for a, b in zip(masks, prev))))
    per_frame = [[StageMask(s, history[s][i]) for s in range(len(history))] for i in range(len(frames))]
    return MultiStageResult(per_frame, changes, probs)
