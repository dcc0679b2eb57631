"""The grounding network and batch assembly."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import AssignmentConfig, ModelConfig
from .data import FeatureSequence, GroundingSample, QueryTokens
from .encoder import TextEncoder, TextProjection, VideoEncoder, VideoProjection
from .heads_loss import BatchTargets, GroundingHeads, HeadOutputs, assign_labels, stack_targets
from .pyramid import MultiScaleEncoder, Pyramid, level_lengths

HEAD_PREFIXES = ("heads.",)


class GroundNLQ(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.video_proj = VideoProjection(cfg.D_video_in, cfg.d_model)
        self.text_proj = TextProjection(cfg.D_text_in, cfg.d_model)
        self.text_encoder = TextEncoder(cfg)
        self.video_encoder = VideoEncoder(cfg)
        self.pyramid = MultiScaleEncoder(cfg)
        self.heads = GroundingHeads(cfg.d_model, cfg.cls_prior_prob)

    def encode(self, video, video_mask, text, text_mask) -> Pyramid:
        t = self.text_encoder(self.text_proj(text, text_mask), text_mask)
        v = self.video_encoder(self.video_proj(video, video_mask), video_mask, t, text_mask)
        return self.pyramid(v, video_mask, t, text_mask)

    def forward(self, video, video_mask, text, text_mask) -> HeadOutputs:
        return self.heads(self.encode(video, video_mask, text, text_mask))

    def reset_heads(self) -> None:
        self.heads.reset_parameters()

    @staticmethod
    def is_head_param(name: str) -> bool:
        return name.startswith(HEAD_PREFIXES)


def zero_cross_projections(model: GroundNLQ, where: str = "pyramid") -> None:
    """Zero the output projections of cross-attention layers in ``where``."""
    root = getattr(model, where)
    with torch.no_grad():
        for name, mod in root.named_modules():
            if name.endswith("cross_attn") and mod is not None:
                mod.out_proj.weight.zero_()
                mod.out_proj.bias.zero_()


def star_from_base(base: GroundNLQ, zero_cross: bool = True) -> GroundNLQ:
    """Star-variant model sharing every parameter of ``base``."""
    cfg = ModelConfig(**{**base.cfg.__dict__, "variant": "star"})
    star = GroundNLQ(cfg).to(next(base.parameters()).dtype)
    missing, unexpected = star.load_state_dict(base.state_dict(), strict=False)
    assert not unexpected and all(".cross_attn." in k or ".norm_cross." in k for k in missing)
    if zero_cross:
        zero_cross_projections(star)
    return star


@dataclass
class Batch:
    video: torch.Tensor  # [B, T, D]
    video_mask: torch.Tensor  # [B, T]
    text: torch.Tensor  # [B, L, D_t]
    text_mask: torch.Tensor  # [B, L]
    samples: list[GroundingSample]
    lengths: list[int]  # valid snippets per sample
    snippet_sec: list[float]
    targets: BatchTargets | None = None


def collate(
    samples: Sequence[GroundingSample],
    features: dict[str, FeatureSequence],
    queries: dict[str, QueryTokens],
    assign_cfg: AssignmentConfig | None = None,
    n_levels: int = 7,
    dtype=torch.float32,
    label_cache: dict | None = None,
) -> Batch:
    """Tail-pad a list of samples into one batch, optionally with targets."""
    feats = [features[s.video_id] for s in samples]
    qs = [queries[s.query_id] for s in samples]
    T = max(f.T for f in feats)
    L = max(q.L for q in qs)
    B = len(samples)
    video = np.zeros((B, T, feats[0].D), dtype=np.float32)
    vmask = np.zeros((B, T), dtype=bool)
    text = np.zeros((B, L, qs[0].data.shape[1]), dtype=np.float32)
    tmask = np.zeros((B, L), dtype=bool)
    for b, (f, q) in enumerate(zip(feats, qs)):
        video[b, : f.T] = f.data[: f.T]
        vmask[b, : f.T] = True
        text[b, : q.L] = q.data
        tmask[b, : q.L] = q.valid_mask
    batch = Batch(
        torch.from_numpy(video).to(dtype), torch.from_numpy(vmask),
        torch.from_numpy(text).to(dtype), torch.from_numpy(tmask),
        list(samples), [f.T for f in feats], [f.snippet_duration_sec for f in feats],
    )
    if assign_cfg is not None:
        items = []
        for s, f in zip(samples, feats):
            key = (s.video_id, s.query_id, s.moment)
            lt = label_cache.get(key) if label_cache is not None else None
            if lt is None:
                lt = assign_labels(f.T, f.snippet_duration_sec, s.moment, assign_cfg, n_levels)
                if label_cache is not None:
                    label_cache[key] = lt
            items.append(lt)
        batch.targets = stack_targets(items, level_lengths(T, n_levels), dtype)
    return batch
