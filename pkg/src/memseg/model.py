"""Segmentation models: baseline (context head only), Decoder A, Decoder B."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import classify, fuse_and_classify, init_classifier, init_projections, refine, relations
from .config import ModelConfig, substream
from .encoder import encode, init_encoder
from .head import bottleneck, context_features, init_head
from .memory import FeatureMemory, gather
from .temporal import TemporalMemory, attend
from .tensor import ConfigError, Tensor

MODEL_VARIANTS = ("baseline", "decoder_a", "decoder_b")


@dataclass
class Forward:
    probs: Tensor
    first_pass: Tensor
    # feature handed to the memory transform after the step
    memory_input: Tensor | None = None
    state: object = None
    guidance: np.ndarray | None = None


class SegModel:
    def __init__(self, cfg: ModelConfig, variant: str = "decoder_a", seed: int = 0):
        if variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; choose from {', '.join(MODEL_VARIANTS)}")
        cfg.validate()
        self.cfg = cfg
        self.variant = variant
        self.seed = seed
        dt = cfg.dtype
        c, k = cfg.embed_dim, cfg.num_classes
        rng = substream(seed, "decoder")
        p = {}
        p.update(init_encoder(seed, cfg))
        p.update(init_head(seed, cfg))
        p.update(init_classifier(rng, "aux", c, k, dt))
        if variant != "baseline":
            p.update(init_projections(rng, "attn", c, dt))
            p.update(init_classifier(rng, "cls", 2 * c, k, dt))
        if variant == "decoder_b":
            p.update(init_projections(rng, "tma", c, dt))
        self.params = p
        self.memory = FeatureMemory(np.zeros((k, c), dtype=dt))

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    @property
    def uses_memory(self) -> bool:
        return self.variant != "baseline"

    def trainable(self) -> dict:
        if self.cfg.train_encoder:
            return self.params
        return {n: p for n, p in self.params.items() if not n.startswith("encoder.")}

    def state_arrays(self) -> dict:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
        for n, p in self.params.items():
            a = np.asarray(arrays[n])
            if a.shape != p.shape:
                raise ValueError(f"parameter {n}: checkpoint shape {a.shape}, model {p.shape}")
            p.data = a.astype(self.dtype)

    # ---------------------------------------------------------- building blocks

    def features(self, frame):
        """Backbone + head: (context features at stride 8, memory-facing features)."""
        x = T.as_tensor(np.asarray(frame.data if isinstance(frame, Tensor) else frame, dtype=self.dtype))
        feats = encode(self.params, x)
        c_wi = context_features(self.params, feats, self.cfg.pool_grids)
        r = c_wi if self.cfg.rep_source == "context" else bottleneck(self.params, feats)
        return c_wi, r

    def first_pass(self, c_wi: Tensor, out_h: int, out_w: int) -> Tensor:
        return classify(self.params, "aux", c_wi, out_h, out_w)

    def memory_branch(self, query: Tensor, c_wi: Tensor, guidance, out_h: int, out_w: int) -> Tensor:
        h, w = query.shape[-2:]
        c_bi_prime = Tensor(gather(self.memory, guidance, h, w).astype(self.dtype, copy=False))
        o = relations(self.params, "attn", query, c_bi_prime)
        c_bi = refine(self.params, "attn", o, c_bi_prime)
        return fuse_and_classify(self.params, c_wi, c_bi, out_h, out_w)

    def temporal(self, state, r: Tensor) -> Tensor:
        if isinstance(state, (list, tuple)):
            return T.stack([attend(self.params, "tma", m, T.index(r, i)) for i, m in enumerate(state)])
        return attend(self.params, "tma", state, r)

    def empty_state(self):
        return TemporalMemory(self.cfg.temporal_len) if self.variant == "decoder_b" else None

    # ---------------------------------------------------------- forward

    def forward(self, frame, guidance=None, state=None) -> Forward:
        """One frame (or batch) through the selected variant.

        Decoder A needs ``guidance``. Decoder B derives guidance from its first
        pass unless ``guidance`` is given, and threads ``state`` (a
        TemporalMemory, or one per batch item).
        """
        frame_arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
        out_h, out_w = frame_arr.shape[-2:]
        c_wi, r = self.features(frame_arr)
        first = self.first_pass(c_wi, out_h, out_w)
        if self.variant == "baseline":
            return Forward(first, first)
        if self.variant == "decoder_a":
            if guidance is None:
                raise ValueError("decoder_a needs a guidance mask")
            probs = self.memory_branch(r, c_wi, guidance, out_h, out_w)
            return Forward(probs, first, r, None, np.asarray(guidance))
        if state is None:
            state = self.empty_state()
        tma_out = self.temporal(state, r)
        if guidance is None:
            guidance = first.data.argmax(axis=-3)
        probs = self.memory_branch(tma_out, c_wi, guidance, out_h, out_w)
        if isinstance(state, (list, tuple)):
            new_state = [m.push(r.data[i]) for i, m in enumerate(state)]
        else:
            new_state = state.push(r.data)
        return Forward(probs, first, tma_out, new_state, np.asarray(guidance))

    def first_pass_mask(self, frame) -> np.ndarray:
        with T.no_grad():
            frame = np.asarray(frame)
            c_wi, _ = self.features(frame)
            return self.first_pass(c_wi, *frame.shape[-2:]).data.argmax(axis=-3)

    # ---------------------------------------------------------- persistence

    def save(self, path, extra_sections=None, extra_meta=None) -> None:
        sections = {f"param.{n}": a for n, a in self.state_arrays().items()}
        matrix, mem_meta = self.memory.state()
        sections["memory"] = matrix
        sections.update(extra_sections or {})
        meta = {"variant": self.variant, "seed": self.seed, "model": _cfg_dict(self.cfg),
                "memory": mem_meta}
        meta.update(extra_meta or {})
        T.save_bundle(path, sections, meta)

    @classmethod
    def load(cls, path):
        sections, meta = T.load_bundle(path)
        model = cls.from_bundle(sections, meta)
        return model, sections, meta

    @classmethod
    def from_bundle(cls, sections, meta):
        mc = dict(meta["model"])
        for key in ("channels", "pool_grids"):
            mc[key] = tuple(mc[key])
        model = cls(ModelConfig(**mc), meta["variant"], meta["seed"])
        model.load_arrays({n[len("param."):]: a for n, a in sections.items() if n.startswith("param.")})
        model.memory = FeatureMemory.from_state(sections["memory"], meta["memory"], dtype=model.dtype)
        return model


def _cfg_dict(cfg: ModelConfig) -> dict:
    import dataclasses

    d = dataclasses.asdict(cfg)
    d["channels"] = list(d["channels"])
    d["pool_grids"] = list(d["pool_grids"])
    return d
