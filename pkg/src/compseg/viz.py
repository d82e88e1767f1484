"""Static diagnostic artifacts: classwise attention maps, per-branch
activation maps, and the query heatmap. Every image is a derived grayscale
view of a raw .npy dump written next to it."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from PIL import Image

from .data import SamplePatch, ScenarioMask
from .engine import batch_tensors
from .model import SegModel

# Fixed colormap: linear grayscale over the [0,1]-normalized dump. Regression
# checks should hash the .npy dumps, not the rendered pixels.


def _to_image(arr: np.ndarray) -> Image.Image:
    lo, hi = float(arr.min()), float(arr.max())
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    return Image.fromarray((norm * 255).round().astype(np.uint8), mode="L")


def _save(arr: np.ndarray, out_dir: Path, stem: str, upsample_to: Optional[int] = None) -> None:
    np.save(out_dir / f"{stem}.npy", arr)
    img = _to_image(arr)
    if upsample_to and img.size != (upsample_to, upsample_to):
        img = img.resize((upsample_to, upsample_to), resample=Image.NEAREST)
    img.save(out_dir / f"{stem}.png")


@torch.no_grad()
def emit_cwam(model: SegModel, patch: SamplePatch, scenario: ScenarioMask,
              out_dir: Path | str, class_filter: Optional[int] = None) -> List[Path]:
    """Per-class attention maps under one scenario: K grayscale images plus a
    raw [K, N] dump whose rows sum to 1."""
    if not model.cw_on:
        raise ValueError("classwise attention maps require a classwise-enabled model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    rgir, ndsm, _ = batch_tensors([patch])
    out = model.forward_scenario(
        scenario,
        rgir if scenario.rgir_present else None,
        ndsm if scenario.ndsm_present else None,
    )
    alpha = out.seg.alpha[0].numpy()  # [K, N]
    k_total = alpha.shape[0]
    if class_filter is not None and not (0 <= class_filter < k_total):
        raise ValueError(f"class index {class_filter} out of range (K={k_total})")
    side = int(round(alpha.shape[1] ** 0.5))
    np.save(out_dir / f"cwam_{scenario.name}_raw.npy", alpha)
    written = []
    classes = [class_filter] if class_filter is not None else range(k_total)
    for k in classes:
        stem = f"cwam_{scenario.name}_class{k}"
        _save(alpha[k].reshape(side, side), out_dir, stem, upsample_to=patch.label.shape[-1])
        written.append(out_dir / f"{stem}.png")
    return written


@torch.no_grad()
def emit_branch_activations(model: SegModel, patch: SamplePatch, scenario: ScenarioMask,
                            out_dir: Path | str) -> List[Path]:
    """Channel-mean absolute activation per pyramid level for each active
    branch (2 branches x 4 levels)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    rgir, ndsm, _ = batch_tensors([patch])
    out = model.forward_scenario(
        scenario,
        rgir if scenario.rgir_present else None,
        ndsm if scenario.ndsm_present else None,
    )
    written = []
    for branch in out.run.active_branches:
        for level, fm in enumerate(out.pyramids[branch.key], start=1):
            act = fm[0].abs().mean(dim=0).numpy()
            stem = f"activation_{scenario.name}_{branch.key}_level{level}"
            _save(act, out_dir, stem)
            written.append(out_dir / f"{stem}.png")
    return written


@torch.no_grad()
def emit_query_heatmap(model: SegModel, out_dir: Path | str) -> Path:
    """K x C class-query matrix, row-normalized image plus raw dump."""
    if not model.cw_on:
        raise ValueError("query heatmap requires a classwise-enabled model")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    queries = model.head.queries.detach().numpy()
    np.save(out_dir / "query_heatmap.npy", queries)
    lo = queries.min(axis=1, keepdims=True)
    hi = queries.max(axis=1, keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    norm = (queries - lo) / span
    Image.fromarray((norm * 255).round().astype(np.uint8), mode="L").save(
        out_dir / "query_heatmap.png"
    )
    return out_dir / "query_heatmap.png"
