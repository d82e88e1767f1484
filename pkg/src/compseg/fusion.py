"""Hierarchical hybrid fusion of two branch pyramids.

Levels 1-3 use convolutional fusion of the concatenated branch features with
a stride-2 residual link from the previous fused level. Level 4 fuses through
a small self-attention stack over [fusion token, spatial tokens of both
branches, pooled previous-level context] with learned positional embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import AttentionPool, ConvBlock, _norm


@dataclass
class FusedPyramid:
    """Per-level fused maps plus the transformed fusion-token state."""

    levels: List[torch.Tensor]       # 4 maps, level i matches input level shapes
    token_out: torch.Tensor          # [B, d]


class ConvFusionBlock(nn.Module):
    """F_i = phi_i(concat(a_i, b_i)) + proj(F_{i-1}) (residual from level i-1)."""

    def __init__(self, channels: int, prev_channels: Optional[int]):
        super().__init__()
        self.fuse = nn.Sequential(ConvBlock(2 * channels, channels), ConvBlock(channels, channels))
        self.residual = (
            nn.Conv2d(prev_channels, channels, 3, stride=2, padding=1)
            if prev_channels is not None
            else None
        )

    def forward(self, a, b, f_prev=None):
        if a.shape != b.shape:
            raise ValueError(f"branch feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        out = self.fuse(torch.cat([a, b], dim=1))
        if self.residual is not None:
            if f_prev is None:
                raise ValueError("this fusion level requires the previous fused map")
            out = out + self.residual(f_prev)
        return out


class SelfAttentionLayer(nn.Module):
    """Pre-norm multi-head self-attention + MLP block."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))
        self.last_attn: Optional[torch.Tensor] = None

    def forward(self, x, store_attn: bool = False):
        h = self.norm1(x)
        attn_out, weights = self.attn(h, h, h, need_weights=store_attn, average_attn_weights=True)
        if store_attn:
            self.last_attn = weights
        x = x + attn_out
        return x + self.mlp(self.norm2(x))


class TokenFusion(nn.Module):
    """Transformer fusion at the deepest level.

    Sequence layout: [fusion token, a tokens (h*w), b tokens (h*w), context
    token from the pooled previous fused level]. Output spatial map merges
    the transformed a/b token streams per position; the transformed fusion
    token is returned as the level's compact representative.
    """

    def __init__(self, channels: int, prev_channels: int, spatial: int,
                 depth: int = 2, heads: int = 4):
        super().__init__()
        self.channels = channels
        self.spatial = spatial  # h*w token count per branch at level 4
        self.token = nn.Parameter(torch.randn(1, 1, channels) * 0.02)
        self.context_pool = AttentionPool(prev_channels)
        self.context_proj = nn.Linear(prev_channels, channels)
        seq_len = 1 + 2 * spatial + 1
        self.pos_embed = nn.Parameter(torch.randn(1, seq_len, channels) * 0.02)
        self.layers = nn.ModuleList(SelfAttentionLayer(channels, heads) for _ in range(depth))
        self.merge = nn.Linear(2 * channels, channels)

    def sequence_length(self) -> int:
        return self.pos_embed.shape[1]

    def forward(self, a, b, f_prev, use_pos_embed: bool = True,
                store_attn: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
        if a.shape != b.shape:
            raise ValueError("level-4 branch shapes differ")
        bsz, c, h, w = a.shape
        n = h * w
        if n != self.spatial:
            raise ValueError(f"expected {self.spatial} spatial tokens at level 4, got {n}")
        a_tok = a.flatten(2).transpose(1, 2)
        b_tok = b.flatten(2).transpose(1, 2)
        ctx = self.context_proj(self.context_pool(f_prev)).unsqueeze(1)
        seq = torch.cat([self.token.expand(bsz, -1, -1), a_tok, b_tok, ctx], dim=1)
        if use_pos_embed:
            seq = seq + self.pos_embed
        for layer in self.layers:
            seq = layer(seq, store_attn=store_attn)
        token_out = seq[:, 0]
        a_out = seq[:, 1 : 1 + n]
        b_out = seq[:, 1 + n : 1 + 2 * n]
        merged = self.merge(torch.cat([a_out, b_out], dim=-1))
        f_level = merged.transpose(1, 2).reshape(bsz, c, h, w)
        return f_level, token_out


class HybridFusion(nn.Module):
    """Scenario-agnostic fusion of two active-branch pyramids."""

    def __init__(self, widths: Sequence[int], patch_size: int, depth: int = 2, heads: int = 4):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("expected 4 pyramid levels")
        self.conv_levels = nn.ModuleList(
            ConvFusionBlock(widths[i], widths[i - 1] if i > 0 else None) for i in range(3)
        )
        spatial = (patch_size // 16) ** 2
        self.token_fusion = TokenFusion(widths[3], widths[2], spatial, depth=depth, heads=heads)

    def forward(self, a_pyr: Sequence[torch.Tensor], b_pyr: Sequence[torch.Tensor],
                use_pos_embed: bool = True, store_attn: bool = False) -> FusedPyramid:
        fused: List[torch.Tensor] = []
        for i, block in enumerate(self.conv_levels):
            f_prev = fused[-1] if i > 0 else None
            fused.append(block(a_pyr[i], b_pyr[i], f_prev))
        f4, token = self.token_fusion(
            a_pyr[3], b_pyr[3], fused[2], use_pos_embed=use_pos_embed, store_attn=store_attn
        )
        fused.append(f4)
        return FusedPyramid(levels=fused, token_out=token)
