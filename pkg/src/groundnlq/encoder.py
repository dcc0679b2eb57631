"""Feature projections and the multi-modal transformer encoder.

Tensors are channel-last: sequences are ``[B, N, C]`` with a boolean
validity mask ``[B, N]`` whose valid entries form a prefix. Every layer
zeroes invalid rows on output so padding never leaks into valid rows.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import ModelConfig


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    """Fixed sin/cos table: ``(pos, 2i) -> sin(pos / 10000^(2i/d))``, ``(pos, 2i+1) -> cos(...)``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if d < 2 or d % 2:
        raise ValueError(f"position width must be even, got {d}")
    pos = np.arange(T, dtype=np.float64)[:, None]
    freq = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((T, d), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table


def _zero_invalid(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * mask.unsqueeze(-1).to(x.dtype)


class MaskedConv1d(nn.Conv1d):
    """Same-padded 1-D convolution over ``[B, N, C]`` that ignores invalid inputs."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3):
        super().__init__(in_ch, out_ch, kernel_size, padding=kernel_size // 2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        y = super().forward(_zero_invalid(x, mask).transpose(1, 2)).transpose(1, 2)
        return _zero_invalid(y, mask)


class VideoProjection(nn.Module):
    """Two (conv, LayerNorm, ReLU) layers followed by sinusoidal positions."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.d_in = d_in
        self.convs = nn.ModuleList([MaskedConv1d(d_in, d_model), MaskedConv1d(d_model, d_model)])
        self.norms = nn.ModuleList([nn.LayerNorm(d_model), nn.LayerNorm(d_model)])

    def forward(self, x, mask):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"video feature width {x.shape[-1]} != configured D_video_in {self.d_in}")
        for conv, norm in zip(self.convs, self.norms):
            x = _zero_invalid(F.relu(norm(conv(x, mask))), mask)
        pos = torch.as_tensor(sinusoidal_positions(x.shape[1], x.shape[2]), dtype=x.dtype, device=x.device)
        return _zero_invalid(x + pos, mask)


class TextProjection(nn.Module):
    """Two position-wise (linear, LayerNorm, ReLU) layers; no positions are added."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.d_in = d_in
        self.linears = nn.ModuleList([nn.Linear(d_in, d_model), nn.Linear(d_model, d_model)])
        self.norms = nn.ModuleList([nn.LayerNorm(d_model), nn.LayerNorm(d_model)])

    def forward(self, x, mask):
        if x.shape[-1] != self.d_in:
            raise ValueError(f"text feature width {x.shape[-1]} != configured D_text_in {self.d_in}")
        for lin, norm in zip(self.linears, self.norms):
            x = _zero_invalid(F.relu(norm(lin(x))), mask)
        return x


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = dropout

    def _heads(self, x):
        B, N, _ = x.shape
        return x.view(B, N, self.n_heads, self.head_dim).transpose(1, 2)

    def _merge(self, x):
        B, _, N, _ = x.shape
        return x.transpose(1, 2).reshape(B, N, self.n_heads * self.head_dim)

    def _softmax(self, scores, key_mask):
        scores = scores.masked_fill(~key_mask, torch.finfo(scores.dtype).min)
        attn = torch.softmax(scores, dim=-1)
        return F.dropout(attn, self.dropout, self.training)

    def attend(self, x, x_mask, kv, kv_mask):
        """Dense attention of ``x`` over the valid rows of ``kv``."""
        q = self._heads(self.q_proj(x)) / math.sqrt(self.head_dim)
        k, v = self._heads(self.k_proj(kv)), self._heads(self.v_proj(kv))
        attn = self._softmax(q @ k.transpose(-1, -2), kv_mask[:, None, None, :])
        return _zero_invalid(self.out_proj(self._merge(attn @ v)), x_mask)

    def local(self, x, mask, window: int):
        """Self-attention restricted to ``|i - j| <= (window - 1) / 2``.

        Keys are gathered with ``unfold`` so the cost is ``O(N * window)``.
        """
        N = x.shape[1]
        r = min((window - 1) // 2, N - 1)
        w = 2 * r + 1
        q = self._heads(self.q_proj(x)) / math.sqrt(self.head_dim)
        k = F.pad(self._heads(self.k_proj(x)), (0, 0, r, r)).unfold(2, w, 1)  # B,h,N,dh,w
        v = F.pad(self._heads(self.v_proj(x)), (0, 0, r, r)).unfold(2, w, 1)
        key_mask = F.pad(mask, (r, r), value=False).unfold(1, w, 1)  # B,N,w
        scores = (q.unsqueeze(-2) @ k).squeeze(-2)  # B,h,N,w
        attn = self._softmax(scores, key_mask[:, None])
        out = (v @ attn.unsqueeze(-1)).squeeze(-1)
        return _zero_invalid(self.out_proj(self._merge(out)), mask)


def local_self_attention(x, mask, window: int, attn: MultiHeadAttention):
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    return attn.local(x, mask, window)


def cross_attention(x, x_mask, kv, kv_mask, attn: MultiHeadAttention):
    if not bool(kv_mask.any(dim=1).all()):
        raise ValueError("cross-attention needs at least one valid key token per sequence")
    return attn.attend(x, x_mask, kv, kv_mask)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, expansion: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_model * expansion)
        self.fc2 = nn.Linear(d_model * expansion, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        return _zero_invalid(self.fc2(self.dropout(F.relu(self.fc1(x)))), mask)


class TextBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_ffn = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_expansion, cfg.dropout)

    def forward(self, x, mask):
        h = self.norm_attn(x)
        x = x + self.attn.attend(h, mask, h, mask)
        return x + self.ffn(self.norm_ffn(x), mask)


class VideoBlock(nn.Module):
    """Local self-attention, then cross-attention to the text, then FFN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.window = cfg.window
        self.norm_local = nn.LayerNorm(cfg.d_model)
        self.local_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_cross = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.norm_ffn = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_expansion, cfg.dropout)

    def forward(self, v, v_mask, t, t_mask):
        v = v + local_self_attention(self.norm_local(v), v_mask, self.window, self.local_attn)
        v = v + cross_attention(self.norm_cross(v), v_mask, t, t_mask, self.cross_attn)
        return v + self.ffn(self.norm_ffn(v), v_mask)


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList([TextBlock(cfg) for _ in range(cfg.n_text_blocks)])

    def forward(self, t, mask):
        for block in self.blocks:
            t = block(t, mask)
        return t


class VideoEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList([VideoBlock(cfg) for _ in range(cfg.n_video_blocks)])

    def forward(self, v, v_mask, t, t_mask):
        for block in self.blocks:
            v = block(v, v_mask, t, t_mask)
        return v


def text_encoder_forward(t, mask, encoder: TextEncoder):
    return encoder(t, mask)


def video_encoder_forward(v, v_mask, t, t_mask, encoder: VideoEncoder):
    return encoder(v, v_mask, t, t_mask)
