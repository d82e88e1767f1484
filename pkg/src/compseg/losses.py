"""Training objective: orthogonality between Distinct/Supplement embeddings,
feature- and logit-level distillation from the full-modality pass, weighted
cross-entropy + Dice segmentation loss, and the itemized total.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

EPS = 1e-8


def orth_loss(pooled_dist: Sequence[torch.Tensor], pooled_supp: Sequence[torch.Tensor]
              ) -> torch.Tensor:
    """Sum over levels of the batch-mean squared cosine similarity between the
    two pooled embedding sets. Zero-norm vectors are epsilon-guarded."""
    if len(pooled_dist) != len(pooled_supp):
        raise ValueError("level counts differ between the two embedding sets")
    total = None
    for x, y in zip(pooled_dist, pooled_supp):
        if x.shape != y.shape:
            raise ValueError("pooled embedding shapes differ")
        xn = x / x.norm(dim=1, keepdim=True).clamp_min(EPS)
        yn = y / y.norm(dim=1, keepdim=True).clamp_min(EPS)
        cos2 = (xn * yn).sum(dim=1) ** 2
        term = cos2.mean()
        total = term if total is None else total + term
    return total


def distill_mse(student: torch.Tensor, teacher: torch.Tensor,
                per_element: bool = False) -> torch.Tensor:
    """Squared L2 distance to the gradient-blocked teacher, averaged over the
    batch. ``per_element`` switches to a per-element mean (used for the large
    penultimate maps so the term does not swamp the objective)."""
    if student.shape != teacher.shape:
        raise ValueError(
            f"student/teacher shapes differ: {tuple(student.shape)} vs {tuple(teacher.shape)}"
        )
    diff = student - teacher.detach()
    sq = diff.pow(2).reshape(diff.shape[0], -1)
    per_sample = sq.mean(dim=1) if per_element else sq.sum(dim=1)
    return per_sample.mean()


def feat_distill_loss(level_pairs: Sequence[Tuple[torch.Tensor, torch.Tensor]],
                      penultimate: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
                      normalize_penultimate: bool = True) -> torch.Tensor:
    """Sum of distillation MSEs over per-level pairs plus the penultimate pair."""
    total = None
    for student, teacher in level_pairs:
        term = distill_mse(student, teacher)
        total = term if total is None else total + term
    if penultimate is not None:
        term = distill_mse(*penultimate, per_element=normalize_penultimate)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no distillation pairs given")
    return total


def logit_distill_loss(z_full: torch.Tensor, z_miss: torch.Tensor,
                       temperature: float = 2.0) -> torch.Tensor:
    """T^2-scaled KL(teacher || student) over the class dimension, averaged
    over pixels (and batch). Teacher logits are gradient-blocked."""
    if z_full.shape != z_miss.shape:
        raise ValueError("logit shapes differ")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    teacher = torch.softmax(z_full.detach() / temperature, dim=1)
    student = torch.log_softmax(z_miss / temperature, dim=1)
    kl = F.kl_div(student, teacher, reduction="none").sum(dim=1)
    return temperature ** 2 * kl.mean()


def weighted_ce(logits: torch.Tensor, label: torch.Tensor,
                class_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    k = logits.shape[1]
    if int(label.max()) >= k:
        raise ValueError(f"label value {int(label.max())} >= num classes {k}")
    return F.cross_entropy(logits, label, weight=class_weights)


def dice_loss(logits: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean soft-Dice loss over classes."""
    k = logits.shape[1]
    if int(label.max()) >= k:
        raise ValueError(f"label value {int(label.max())} >= num classes {k}")
    probs = torch.softmax(logits, dim=1)
    onehot = F.one_hot(label, k).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    dice = (2 * inter + EPS) / (denom + EPS)
    return (1 - dice).mean()


def seg_loss(logits: torch.Tensor, label: torch.Tensor,
             class_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Weighted cross-entropy plus mean soft-Dice, unit weights."""
    return weighted_ce(logits, label, class_weights) + dice_loss(logits, label)


def class_weights_from_counts(counts: torch.Tensor, clamp: Tuple[float, float] = (0.1, 10.0)
                              ) -> torch.Tensor:
    """Inverse-frequency class weights, clamped and renormalized to mean 1."""
    freq = counts.to(torch.float64) / counts.sum().clamp_min(1)
    w = 1.0 / freq.clamp_min(EPS)
    w = w.clamp(*clamp)
    return (w / w.mean()).to(torch.float32)


@dataclass
class LossReport:
    """Every term of the objective, itemized; ``total`` follows the term sum
    with the configured coefficients (unit by default)."""

    seg_full: torch.Tensor
    seg_miss: torch.Tensor
    orth: torch.Tensor
    distill_feat: torch.Tensor
    distill_logit: torch.Tensor
    aux: torch.Tensor
    uni_rgir: torch.Tensor
    uni_ndsm: torch.Tensor
    total: torch.Tensor

    TERM_NAMES = ("seg_full", "seg_miss", "orth", "distill_feat", "distill_logit",
                  "aux", "uni_rgir", "uni_ndsm")

    def to_dict(self) -> Dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def total_loss(seg_full, seg_miss, orth, distill_feat, distill_logit, aux,
               uni_rgir, uni_ndsm, dlkd_on: bool = True,
               coefficients: Optional[Mapping[str, float]] = None) -> LossReport:
    """Combine all terms into a LossReport. With ``dlkd_on`` false the
    orthogonality and distillation terms are zeroed and excluded."""
    terms = {
        "seg_full": seg_full, "seg_miss": seg_miss, "orth": orth,
        "distill_feat": distill_feat, "distill_logit": distill_logit,
        "aux": aux, "uni_rgir": uni_rgir, "uni_ndsm": uni_ndsm,
    }
    terms = {k: torch.as_tensor(v, dtype=torch.float32) if not torch.is_tensor(v) else v
             for k, v in terms.items()}
    if not dlkd_on:
        zero = torch.zeros((), dtype=terms["seg_full"].dtype)
        terms["orth"] = zero
        terms["distill_feat"] = zero
        terms["distill_logit"] = zero
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise FloatingPointError(f"non-finite loss term: {name}")
    coeff = dict.fromkeys(LossReport.TERM_NAMES, 1.0)
    if coefficients:
        coeff.update(coefficients)
    total = sum(coeff[name] * terms[name] for name in LossReport.TERM_NAMES)
    return LossReport(total=total, **terms)
