"""The full segmentation network: four encoder branches, scenario routing,
shared hybrid fusion, a decoding head (classwise or plain), unimodal heads,
and the shared per-level attention pools used by the losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .cflm import ClasswiseHead, PlainDecoder, SegOutput
from .data import MISSING_NDSM, MISSING_RGIR, Modality, ScenarioMask
from .encoders import AttentionPool, BranchId, BranchKind, BranchSet, level_widths
from .fusion import FusedPyramid, HybridFusion


@dataclass(frozen=True)
class ScenarioRun:
    """A scenario mask resolved to its active encoder branch pair."""

    scenario: ScenarioMask
    active_branches: Tuple[BranchId, BranchId]


def route(mask: ScenarioMask, supp_on: bool = True) -> ScenarioRun:
    """Map a scenario mask to its (a, b) branch pair. The absent modality's
    branches are never selected, so its image is never read.

    Without Supplement branches (fusion-only baseline) a missing scenario
    duplicates the available Distinct pyramid into both fusion inputs."""
    if mask.rgir_present and mask.ndsm_present:
        pair = (
            BranchId(Modality.RGIR, BranchKind.DIST),
            BranchId(Modality.NDSM, BranchKind.DIST),
        )
    elif mask.rgir_present:
        dist = BranchId(Modality.RGIR, BranchKind.DIST)
        pair = (dist, BranchId(Modality.RGIR, BranchKind.SUPP) if supp_on else dist)
    else:
        dist = BranchId(Modality.NDSM, BranchKind.DIST)
        pair = (dist, BranchId(Modality.NDSM, BranchKind.SUPP) if supp_on else dist)
    return ScenarioRun(scenario=mask, active_branches=pair)


@dataclass
class ScenarioOutput:
    """Forward artifacts of one scenario pass."""

    run: ScenarioRun
    pyramids: Dict[str, List[torch.Tensor]]  # branch key -> 4-level pyramid
    fused: FusedPyramid
    seg: SegOutput


class UnimodalHead(nn.Module):
    """Light per-modality segmentation head on a Distinct pyramid: per-level
    1x1 projection, upsample to full resolution, sum."""

    def __init__(self, num_classes: int, widths: Sequence[int]):
        super().__init__()
        self.projections = nn.ModuleList(nn.Conv2d(w, num_classes, 1) for w in widths)

    def forward(self, pyramid: Sequence[torch.Tensor], out_hw: Tuple[int, int]) -> torch.Tensor:
        out = None
        for proj, feat in zip(self.projections, pyramid):
            up = F.interpolate(proj(feat), size=out_hw, mode="bilinear", align_corners=False)
            out = up if out is None else out + up
        return out


class SegModel(nn.Module):
    """Dual-branch missing-modality segmentation model."""

    def __init__(self, num_classes: int, base_width: int = 16, patch_size: int = 64,
                 cw_on: bool = True, supp_on: bool = True,
                 transformer_depth: int = 2, transformer_heads: int = 4):
        super().__init__()
        if patch_size % 16:
            raise ValueError("patch_size must be divisible by 16")
        self.num_classes = num_classes
        self.patch_size = patch_size
        self.cw_on = cw_on
        self.supp_on = supp_on
        widths = level_widths(base_width)
        self.widths = widths
        self.branches = BranchSet(base_width, supp_on=supp_on)
        self.fusion = HybridFusion(widths, patch_size, depth=transformer_depth,
                                   heads=transformer_heads)
        head_cls = ClasswiseHead if cw_on else PlainDecoder
        self.head = head_cls(num_classes, widths, out_channels=widths[3])
        self.uni_heads = nn.ModuleDict(
            {m.value: UnimodalHead(num_classes, widths) for m in Modality}
        )
        # Shared per-level pools feeding the orthogonality and feature
        # distillation losses.
        self.loss_pools = nn.ModuleList(AttentionPool(w) for w in widths)

    def _image_for(self, branch: BranchId, rgir: Optional[torch.Tensor],
                   ndsm: Optional[torch.Tensor]) -> torch.Tensor:
        img = rgir if branch.modality is Modality.RGIR else ndsm
        if img is None:
            raise ValueError(f"scenario requires modality {branch.modality.value}, got None")
        return img

    def forward_scenario(self, mask: ScenarioMask, rgir: Optional[torch.Tensor],
                         ndsm: Optional[torch.Tensor],
                         precomputed: Optional[Dict[str, List[torch.Tensor]]] = None,
                         keep_decoder_levels: bool = False) -> ScenarioOutput:
        run = route(mask, supp_on=self.supp_on)
        pyramids: Dict[str, List[torch.Tensor]] = {}
        for branch in run.active_branches:
            if precomputed and branch.key in precomputed:
                pyramids[branch.key] = precomputed[branch.key]
            else:
                pyramids[branch.key] = self.branches.encode(
                    branch, self._image_for(branch, rgir, ndsm)
                )
        a_key, b_key = (b.key for b in run.active_branches)
        fused = self.fusion(pyramids[a_key], pyramids[b_key])
        seg = self.head(fused.levels, fused.token_out, keep_decoder_levels=keep_decoder_levels)
        return ScenarioOutput(run=run, pyramids=pyramids, fused=fused, seg=seg)

    def unimodal_logits(self, modality: Modality, pyramid: Sequence[torch.Tensor],
                        out_hw: Tuple[int, int]) -> torch.Tensor:
        return self.uni_heads[modality.value](pyramid, out_hw)

    def pool_level(self, level: int, feature_map: torch.Tensor) -> torch.Tensor:
        """Attention-pool a level-(level+1) feature map with the shared head."""
        return self.loss_pools[level](feature_map)
