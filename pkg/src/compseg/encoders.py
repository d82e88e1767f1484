"""Per-modality Distinct/Supplement encoders and attention pooling.

Each branch is an independent UNet-style convolutional encoder producing a
4-level feature pyramid; level i lives at 1/2^i resolution with channel
width base * 2^(i-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MODALITY_CHANNELS, Modality

NUM_LEVELS = 4


class BranchKind(str, Enum):
    DIST = "dist"
    SUPP = "supp"


@dataclass(frozen=True)
class BranchId:
    modality: Modality
    kind: BranchKind

    @property
    def key(self) -> str:
        return f"{self.modality.value}_{self.kind.value}"


ALL_BRANCHES = tuple(
    BranchId(m, k) for m in (Modality.RGIR, Modality.NDSM) for k in (BranchKind.DIST, BranchKind.SUPP)
)


def level_widths(base_width: int, levels: int = NUM_LEVELS) -> List[int]:
    # Doubling schedule capped at 8x base so deeper variants stay manageable.
    return [base_width * 2 ** min(i, 3) for i in range(levels)]


def _norm(channels: int) -> nn.Module:
    groups = 4 if channels % 4 == 0 else 1
    return nn.GroupNorm(groups, channels)


class ConvBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm = _norm(out_ch)
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class EncoderStage(nn.Module):
    """Stride-2 downsample followed by two conv blocks."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.down = ConvBlock(in_ch, out_ch, stride=2)
        self.block1 = ConvBlock(out_ch, out_ch)
        self.block2 = ConvBlock(out_ch, out_ch)

    def forward(self, x):
        return self.block2(self.block1(self.down(x)))


class UNetEncoder(nn.Module):
    """Convolutional encoder returning a 4-level pyramid."""

    def __init__(self, in_channels: int, base_width: int):
        super().__init__()
        self.in_channels = in_channels
        widths = level_widths(base_width)
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(EncoderStage(prev, w))
            prev = w
        self.stages = nn.ModuleList(stages)
        self.widths = widths

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        if image.shape[1] != self.in_channels:
            raise ValueError(
                f"expected {self.in_channels} input channels, got {image.shape[1]}"
            )
        if image.shape[-1] % 2 ** NUM_LEVELS or image.shape[-2] % 2 ** NUM_LEVELS:
            raise ValueError("input spatial dims must be divisible by 16")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class BranchSet(nn.Module):
    """The four independent encoder branches keyed by BranchId."""

    def __init__(self, base_width: int, supp_on: bool = True):
        super().__init__()
        branches = ALL_BRANCHES if supp_on else tuple(
            b for b in ALL_BRANCHES if b.kind is BranchKind.DIST
        )
        self.encoders = nn.ModuleDict(
            {b.key: UNetEncoder(MODALITY_CHANNELS[b.modality], base_width) for b in branches}
        )
        self.widths = level_widths(base_width)

    def encode(self, branch: BranchId, image: torch.Tensor) -> List[torch.Tensor]:
        return self.encoders[branch.key](image)


class AttentionPool(nn.Module):
    """Softmax-weighted spatial average with a learnable scoring head.

    A 1x1 conv scores each position; softmax over positions gives convex
    weights, output is the weighted sum of position features ([B, C]).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.score = nn.Conv2d(channels, 1, 1)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        b, c, h, w = feature_map.shape
        logits = self.score(feature_map).reshape(b, h * w)
        weights = torch.softmax(logits, dim=1)
        flat = feature_map.reshape(b, c, h * w)
        return torch.einsum("bcn,bn->bc", flat, weights)
