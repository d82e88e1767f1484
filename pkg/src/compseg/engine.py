"""Training and evaluation engine: dual-pass training step with scenario
routing, metrics, the penultimate-distance diagnostic, and checkpointing."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .config import ExperimentConfig
from .data import (ALL_SCENARIOS, FULL, Modality, SamplePatch, ScenarioMask,
                   augment, generate_synthetic, load_isprs_tiles,
                   sample_training_mask)
from .encoders import BranchId, BranchKind, NUM_LEVELS
from .metrics import MetricsReport, confusion_matrix, report_from_confusion
from .model import ScenarioOutput, SegModel, route

CHECKPOINT_VERSION = 1


def load_dataset(config: ExperimentConfig, split: str = "train") -> List[SamplePatch]:
    if config.source == "synthetic":
        return generate_synthetic(config.synthetic)
    color_map = None
    if config.color_map:
        color_map = {tuple(int(v) for v in key.split(",")): idx
                     for key, idx in config.color_map.items()}
    return load_isprs_tiles(config.data_root, split, config.patch_size,
                            config.patch_size, color_map=color_map)


def batch_tensors(patches: Sequence[SamplePatch]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    rgir = torch.from_numpy(np.stack([p.rgir for p in patches]))
    ndsm = torch.from_numpy(np.stack([p.ndsm for p in patches]))
    label = torch.from_numpy(np.stack([p.label for p in patches]))
    return rgir, ndsm, label


def compute_class_weights(dataset: Sequence[SamplePatch], num_classes: int) -> torch.Tensor:
    counts = torch.zeros(num_classes, dtype=torch.int64)
    for p in dataset:
        counts += torch.bincount(torch.from_numpy(p.label.reshape(-1)), minlength=num_classes)
    return L.class_weights_from_counts(counts)


def build_model(config: ExperimentConfig) -> SegModel:
    torch.manual_seed(config.seed)
    return SegModel(
        num_classes=config.num_classes,
        base_width=config.base_width,
        patch_size=config.patch_size,
        cw_on=config.cw_on,
        supp_on=not config.hf_only,
        transformer_depth=config.transformer_depth,
        transformer_heads=config.transformer_heads,
    )


def pooled_pyramid(model: SegModel, pyramid: Sequence[torch.Tensor]) -> List[torch.Tensor]:
    return [model.pool_level(i, fm) for i, fm in enumerate(pyramid)]


def distill_pairs(model: SegModel, fused_miss, fused_full
                  ) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    """Per-level feature pairs: attention-pooled fused maps at levels 1..3,
    the fusion token at the deepest level.

    Embeddings are L2-normalized before pairing so the distillation term
    matches feature direction rather than magnitude; unnormalized MSE against
    a gradient-blocked teacher lets both sides inflate their scales without
    bound, which destabilizes long runs.
    """
    pairs = [
        (F.normalize(model.pool_level(i, fused_miss.levels[i]), dim=-1),
         F.normalize(model.pool_level(i, fused_full.levels[i]), dim=-1))
        for i in range(NUM_LEVELS - 1)
    ]
    pairs.append((F.normalize(fused_miss.token_out, dim=-1),
                  F.normalize(fused_full.token_out, dim=-1)))
    return pairs


def train_step(model: SegModel, batch: Tuple[torch.Tensor, torch.Tensor, torch.Tensor],
               mask: ScenarioMask, config: ExperimentConfig,
               class_weights: Optional[torch.Tensor],
               optimizer: Optional[torch.optim.Optimizer] = None) -> L.LossReport:
    """One dual-pass update: full-modality teacher pass, one missing-scenario
    student pass, unimodal passes, combined loss, optimizer step."""
    rgir, ndsm, label = batch
    out_hw = label.shape[-2:]

    full_out = model.forward_scenario(FULL, rgir, ndsm)
    seg_full = L.seg_loss(full_out.seg.logits, label, class_weights)
    if config.hf_only:
        # Fusion-only baseline: a conventional multimodal network trained on
        # the full-modality objective alone. The missing-scenario student
        # pass belongs to the compensation framework, so it is skipped.
        miss_out = None
        seg_miss = torch.zeros((), dtype=seg_full.dtype)
    else:
        # The student pass reuses the available modality's Distinct pyramid;
        # the branch and input are identical so recomputing would be waste.
        miss_out = model.forward_scenario(mask, rgir, ndsm, precomputed=full_out.pyramids)
        seg_miss = L.seg_loss(miss_out.seg.logits, label, class_weights)
    aux = sum(L.seg_loss(a, label, class_weights) for a in full_out.seg.aux_logits)

    rgir_dist = BranchId(Modality.RGIR, BranchKind.DIST).key
    ndsm_dist = BranchId(Modality.NDSM, BranchKind.DIST).key
    uni_rgir = L.seg_loss(
        model.unimodal_logits(Modality.RGIR, full_out.pyramids[rgir_dist], out_hw),
        label, class_weights)
    uni_ndsm = L.seg_loss(
        model.unimodal_logits(Modality.NDSM, full_out.pyramids[ndsm_dist], out_hw),
        label, class_weights)

    if config.dlkd_on:
        dist_key, supp_key = (b.key for b in miss_out.run.active_branches)
        orth = L.orth_loss(
            pooled_pyramid(model, miss_out.pyramids[dist_key]),
            pooled_pyramid(model, miss_out.pyramids[supp_key]),
        )
        distill_feat = L.feat_distill_loss(
            distill_pairs(model, miss_out.fused, full_out.fused),
            penultimate=(miss_out.seg.penultimate, full_out.seg.penultimate),
        )
        distill_logit = L.logit_distill_loss(
            full_out.seg.logits, miss_out.seg.logits, temperature=config.temperature)
    else:
        zero = torch.zeros((), dtype=seg_full.dtype)
        orth = distill_feat = distill_logit = zero

    report = L.total_loss(
        seg_full, seg_miss, orth, distill_feat, distill_logit, aux, uni_rgir, uni_ndsm,
        dlkd_on=config.dlkd_on, coefficients=config.loss_coefficients,
    )
    if optimizer is not None:
        optimizer.zero_grad()
        report.total.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
    return report


@dataclass
class TrainResult:
    model: SegModel
    loss_history: List[Dict[str, float]]
    class_weights: torch.Tensor


def fit(config: ExperimentConfig, dataset: Optional[Sequence[SamplePatch]] = None,
        log_every: int = 0) -> TrainResult:
    """Deterministic training loop: adaptive-moment optimizer with cosine
    decay, per-step scenario sampling, fixed seed."""
    if dataset is None:
        dataset = load_dataset(config, "train")
    if not dataset:
        raise ValueError("empty training dataset")
    torch.manual_seed(config.seed)
    model = SegModel(
        num_classes=config.num_classes, base_width=config.base_width,
        patch_size=config.patch_size, cw_on=config.cw_on,
        supp_on=not config.hf_only,
        transformer_depth=config.transformer_depth,
        transformer_heads=config.transformer_heads,
    )
    class_weights = compute_class_weights(dataset, config.num_classes)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=config.steps)
    rng = np.random.default_rng(config.seed)
    history: List[Dict[str, float]] = []
    model.train()
    for step in range(config.steps):
        idx = rng.choice(len(dataset), size=min(config.batch_size, len(dataset)), replace=False)
        patches = [dataset[i] for i in idx]
        if config.augment:
            patches = [augment(p, int(rng.integers(0, 2 ** 31))) for p in patches]
        batch = batch_tensors(patches)
        mask = sample_training_mask(rng)
        report = train_step(model, batch, mask, config, class_weights, optimizer)
        scheduler.step()
        row = {"step": step, "scenario": mask.name}
        row.update(report.to_dict())
        history.append(row)
        if log_every and step % log_every == 0:
            print(f"step {step}: total={row['total']:.4f} ({mask.name})")
    model.eval()
    return TrainResult(model=model, loss_history=history, class_weights=class_weights)


def write_loss_csv(history: Sequence[Dict], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(history[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(history)


@torch.no_grad()
def evaluate(model: SegModel, dataset: Sequence[SamplePatch], scenario: ScenarioMask,
             batch_size: int = 8) -> MetricsReport:
    """Global-confusion-matrix evaluation under one scenario."""
    if not dataset:
        raise ValueError("empty evaluation dataset")
    model.eval()
    k = model.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        rgir, ndsm, label = batch_tensors(chunk)
        out = model.forward_scenario(
            scenario,
            rgir if scenario.rgir_present else None,
            ndsm if scenario.ndsm_present else None,
        )
        pred = out.seg.logits.argmax(dim=1).numpy()
        confusion += confusion_matrix(pred, label.numpy(), k)
    return report_from_confusion(confusion)


@torch.no_grad()
def penultimate_distance(model: SegModel, dataset: Sequence[SamplePatch],
                         batch_size: int = 8) -> Dict[Tuple[str, str], float]:
    """Mean per-element-normalized L2 distance between penultimate maps of
    every scenario pair."""
    model.eval()
    sums = {tuple(sorted((a.name, b.name))): 0.0
            for a, b in combinations(ALL_SCENARIOS, 2)}
    count = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        rgir, ndsm, label = batch_tensors(chunk)
        z = {}
        for scen in ALL_SCENARIOS:
            out = model.forward_scenario(
                scen,
                rgir if scen.rgir_present else None,
                ndsm if scen.ndsm_present else None,
            )
            z[scen.name] = out.seg.penultimate
        for a, b in combinations(ALL_SCENARIOS, 2):
            diff = z[a.name] - z[b.name]
            per_patch = diff.flatten(1).norm(dim=1) / diff[0].numel() ** 0.5
            sums[tuple(sorted((a.name, b.name)))] += float(per_patch.sum())
        count += len(chunk)
    return {pair: total / count for pair, total in sums.items()}


@torch.no_grad()
def branch_cosine_by_level(model: SegModel, dataset: Sequence[SamplePatch],
                           scenario: ScenarioMask, batch_size: int = 8) -> List[float]:
    """Mean |cos| between pooled Distinct/Supplement embeddings per level,
    for the Supplement modality active under ``scenario``."""
    if scenario == FULL:
        raise ValueError("pick a missing scenario: it determines the active Supplement branch")
    model.eval()
    sums = [0.0] * NUM_LEVELS
    count = 0
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        rgir, ndsm, label = batch_tensors(chunk)
        out = model.forward_scenario(
            scenario,
            rgir if scenario.rgir_present else None,
            ndsm if scenario.ndsm_present else None,
        )
        dist_key, supp_key = (b.key for b in out.run.active_branches)
        for i in range(NUM_LEVELS):
            x = model.pool_level(i, out.pyramids[dist_key][i])
            y = model.pool_level(i, out.pyramids[supp_key][i])
            cos = torch.nn.functional.cosine_similarity(x, y, dim=1, eps=1e-8)
            sums[i] += float(cos.abs().sum())
        count += len(chunk)
    return [s / count for s in sums]


def save_checkpoint(model: SegModel, config: ExperimentConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": config.to_dict(),
            "config_hash": config.architecture_hash(),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path: Path | str, config: Optional[ExperimentConfig] = None
                    ) -> Tuple[SegModel, ExperimentConfig]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot parse checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload:
        raise ValueError(f"not a checkpoint file: {path}")
    stored = ExperimentConfig.from_dict(payload["config"])
    active = config if config is not None else stored
    if active.architecture_hash() != payload["config_hash"]:
        raise ValueError(
            "checkpoint architecture hash mismatch: refusing to load into a "
            "differently configured model"
        )
    model = SegModel(
        num_classes=active.num_classes, base_width=active.base_width,
        patch_size=active.patch_size, cw_on=active.cw_on,
        supp_on=not active.hf_only,
        transformer_depth=active.transformer_depth,
        transformer_heads=active.transformer_heads,
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, stored
