"""Multi-scale transformer encoder producing the 7-level feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .encoder import FeedForward, MultiHeadAttention, _zero_invalid, cross_attention, local_self_attention


def level_lengths(T: int, n_levels: int = 7) -> list[int]:
    lengths = [T]
    for _ in range(n_levels - 1):
        lengths.append(max(1, -(-lengths[-1] // 2)))
    return lengths


def masked_max_pool(x: torch.Tensor, mask: torch.Tensor, stride: int = 2) -> tuple[torch.Tensor, torch.Tensor]:
    """Non-overlapping max pooling over valid positions only.

    Output length is ``ceil(N / stride)``; an output position is valid iff
    at least one of its sources is, and invalid outputs are zero.
    """
    B, N, C = x.shape
    n_out = -(-N // stride)
    pad = n_out * stride - N
    if pad:
        x = torch.cat([x, x.new_zeros(B, pad, C)], dim=1)
        mask = torch.cat([mask, mask.new_zeros(B, pad)], dim=1)
    m = mask.view(B, n_out, stride)
    vals = x.masked_fill(~mask.unsqueeze(-1), float("-inf")).view(B, n_out, stride, C).amax(dim=2)
    out_mask = m.any(dim=2)
    vals = torch.where(out_mask.unsqueeze(-1), vals, torch.zeros_like(vals))
    return vals, out_mask


@dataclass
class Pyramid:
    feats: list[torch.Tensor]
    masks: list[torch.Tensor]

    @property
    def strides(self) -> list[int]:
        return [2**l for l in range(len(self.feats))]

    @property
    def lengths(self) -> list[int]:
        return [f.shape[1] for f in self.feats]

    def __len__(self) -> int:
        return len(self.feats)


class MultiScaleBlock(nn.Module):
    """Local MHA -> stride-2 max pool -> (cross-attention, star only) -> FFN.

    Pooling has no residual; it downsamples the whole residual stream.
    """

    def __init__(self, cfg: ModelConfig, with_cross: bool):
        super().__init__()
        self.window = cfg.window
        self.norm_local = nn.LayerNorm(cfg.d_model)
        self.local_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_ffn = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_expansion, cfg.dropout)
        if with_cross:
            self.norm_cross = nn.LayerNorm(cfg.d_model)
            self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        else:
            self.cross_attn = None

    def forward(self, x, mask, t, t_mask):
        x = x + local_self_attention(self.norm_local(x), mask, self.window, self.local_attn)
        x, mask = masked_max_pool(x, mask, 2)
        if self.cross_attn is not None:
            x = x + cross_attention(self.norm_cross(x), mask, t, t_mask, self.cross_attn)
        x = x + self.ffn(self.norm_ffn(x), mask)
        return _zero_invalid(x, mask), mask


class MultiScaleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        star = cfg.variant == "star"
        self.blocks = nn.ModuleList([MultiScaleBlock(cfg, star) for _ in range(cfg.n_pyramid_blocks)])

    def forward(self, v, v_mask, t, t_mask) -> Pyramid:
        feats, masks = [v], [v_mask]
        for block in self.blocks:
            v, v_mask = block(v, v_mask, t, t_mask)
            feats.append(v)
            masks.append(v_mask)
        return Pyramid(feats, masks)


def multiscale_forward(v, v_mask, t, t_mask, encoder: MultiScaleEncoder) -> Pyramid:
    return encoder(v, v_mask, t, t_mask)
