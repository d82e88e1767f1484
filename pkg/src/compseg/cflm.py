"""Classwise feature learning: learnable class queries, per-class attention
over the deepest fused features, a per-class hierarchical decoder, penultimate
aggregation, auxiliary per-level heads, and the final 1x1 prediction head.

Also provides the plain (class-agnostic) decoder used when the classwise
module is ablated away.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ConvBlock, _norm


@dataclass
class SegOutput:
    """Everything a decoding head produces for one forward pass."""

    logits: torch.Tensor                     # [B, K, H, W]
    penultimate: torch.Tensor                # Z, [B, C, H, W]
    aux_logits: List[torch.Tensor]           # per level, each [B, K, H, W]
    alpha: Optional[torch.Tensor] = None     # [B, K, N] classwise attention
    attended: Optional[torch.Tensor] = None  # M, [B, K, C, h, w]
    decoder_levels: Optional[List[List[torch.Tensor]]] = None  # per class, per level


def classwise_attention(f_deep: torch.Tensor, queries: torch.Tensor
                        ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-class spatial softmax attention over the deepest fused map.

    alpha[k] = softmax_p(q_k . F[:, p] / sqrt(C)); the attended map gates F
    elementwise with alpha broadcast over channels, rescaled by the position
    count so that uniform attention is an identity gate.
    """
    b, c, h, w = f_deep.shape
    if queries.shape[1] != c:
        raise ValueError(f"query width {queries.shape[1]} != feature channels {c}")
    n = h * w
    flat = f_deep.reshape(b, c, n)
    scores = torch.einsum("kc,bcn->bkn", queries, flat) / math.sqrt(c)
    alpha = torch.softmax(scores, dim=2)
    attended = alpha.unsqueeze(2) * flat.unsqueeze(1) * n  # [B, K, C, N]
    return alpha, attended.reshape(b, queries.shape[0], c, h, w)


class SepConvBlock(nn.Module):
    """Depthwise 3x3 + pointwise 1x1 with norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        # Replicate padding keeps spatially constant inputs constant.
        self.depthwise = nn.Conv2d(in_ch, in_ch, 3, padding=1, groups=in_ch,
                                   padding_mode="replicate")
        self.pointwise = nn.Conv2d(in_ch, out_ch, 1)
        self.norm = _norm(out_ch)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.pointwise(self.depthwise(x))))


def decoder_widths(feature_widths: Sequence[int]) -> List[int]:
    # Narrow per-class widths: K-fold replication stays affordable.
    return [max(w // 4, 4) for w in feature_widths]


class ClassDecoder(nn.Module):
    """One class's lightweight hierarchical decoder.

    Level 4 consumes the attended map; levels 3..1 consume the matching fused
    level concatenated with the 2x-upsampled deeper state.
    """

    def __init__(self, feature_widths: Sequence[int]):
        super().__init__()
        d = decoder_widths(feature_widths)
        self.blocks = nn.ModuleList(
            [
                SepConvBlock(feature_widths[0] + d[1], d[0]),
                SepConvBlock(feature_widths[1] + d[2], d[1]),
                SepConvBlock(feature_widths[2] + d[3], d[2]),
                SepConvBlock(feature_widths[3], d[3]),
            ]
        )

    def forward(self, attended: torch.Tensor, fused_levels: Sequence[torch.Tensor]
                ) -> List[torch.Tensor]:
        states: List[Optional[torch.Tensor]] = [None] * 4
        states[3] = self.blocks[3](attended)
        for level in (2, 1, 0):
            up = F.interpolate(states[level + 1], scale_factor=2, mode="nearest")
            states[level] = self.blocks[level](torch.cat([fused_levels[level], up], dim=1))
        return states  # index l-1 -> D^l; states[0] is at H/2


class ClasswiseHead(nn.Module):
    """Full classwise module: queries, K decoders, aggregation, heads."""

    def __init__(self, num_classes: int, feature_widths: Sequence[int], out_channels: int):
        super().__init__()
        self.num_classes = num_classes
        self.queries = nn.Parameter(torch.randn(num_classes, feature_widths[3]) * 0.02)
        self.decoders = nn.ModuleList(ClassDecoder(feature_widths) for _ in range(num_classes))
        d = decoder_widths(feature_widths)
        self.aggregate = nn.Sequential(
            nn.Conv2d(num_classes * d[0], out_channels, 3, padding=1),
            _norm(out_channels),
            nn.ReLU(inplace=True),
        )
        self.predict = nn.Conv2d(out_channels, num_classes, 1)
        self.aux_heads = nn.ModuleList(
            nn.Conv2d(num_classes * d[i], num_classes, 1) for i in range(4)
        )

    def forward(self, fused_levels: Sequence[torch.Tensor], token_out: torch.Tensor,
                keep_decoder_levels: bool = False) -> SegOutput:
        alpha, attended = classwise_attention(fused_levels[3], self.queries)
        per_class = [dec(attended[:, k], fused_levels) for k, dec in enumerate(self.decoders)]
        out_h = fused_levels[0].shape[-2] * 2
        out_w = fused_levels[0].shape[-1] * 2
        cat_d1 = torch.cat([states[0] for states in per_class], dim=1)
        z_half = self.aggregate(cat_d1)
        z = F.interpolate(z_half, size=(out_h, out_w), mode="bilinear", align_corners=False)
        logits = self.predict(z)
        aux = []
        for level, head in enumerate(self.aux_heads):
            cat_l = torch.cat([states[level] for states in per_class], dim=1)
            aux.append(F.interpolate(head(cat_l), size=(out_h, out_w),
                                     mode="bilinear", align_corners=False))
        return SegOutput(
            logits=logits,
            penultimate=z,
            aux_logits=aux,
            alpha=alpha,
            attended=attended,
            decoder_levels=per_class if keep_decoder_levels else None,
        )


class PlainDecoder(nn.Module):
    """Class-agnostic UNet-style decoder used for the fusion-only ablation."""

    def __init__(self, num_classes: int, feature_widths: Sequence[int], out_channels: int):
        super().__init__()
        self.num_classes = num_classes
        d = decoder_widths(feature_widths)
        widths = [w * 2 for w in d]  # roughly match classwise capacity
        self.blocks = nn.ModuleList(
            [
                ConvBlock(feature_widths[0] + widths[1], widths[0]),
                ConvBlock(feature_widths[1] + widths[2], widths[1]),
                ConvBlock(feature_widths[2] + widths[3], widths[2]),
                ConvBlock(feature_widths[3], widths[3]),
            ]
        )
        self.aggregate = nn.Sequential(
            nn.Conv2d(widths[0], out_channels, 3, padding=1),
            _norm(out_channels),
            nn.ReLU(inplace=True),
        )
        self.predict = nn.Conv2d(out_channels, num_classes, 1)
        self.aux_heads = nn.ModuleList(nn.Conv2d(widths[i], num_classes, 1) for i in range(4))

    def forward(self, fused_levels: Sequence[torch.Tensor], token_out: torch.Tensor,
                keep_decoder_levels: bool = False) -> SegOutput:
        states: List[Optional[torch.Tensor]] = [None] * 4
        states[3] = self.blocks[3](fused_levels[3])
        for level in (2, 1, 0):
            up = F.interpolate(states[level + 1], scale_factor=2, mode="nearest")
            states[level] = self.blocks[level](torch.cat([fused_levels[level], up], dim=1))
        out_h = fused_levels[0].shape[-2] * 2
        out_w = fused_levels[0].shape[-1] * 2
        z = F.interpolate(self.aggregate(states[0]), size=(out_h, out_w),
                          mode="bilinear", align_corners=False)
        logits = self.predict(z)
        aux = [
            F.interpolate(head(states[level]), size=(out_h, out_w),
                          mode="bilinear", align_corners=False)
            for level, head in enumerate(self.aux_heads)
        ]
        return SegOutput(logits=logits, penultimate=z, aux_logits=aux)
