"""Experiment configuration: dataset source, model size, ablation toggles,
loss coefficients, and optimizer settings. Serialized as YAML."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import yaml

from .data import SyntheticSpec


@dataclass
class ExperimentConfig:
    # Data
    source: str = "synthetic"              # "synthetic" | "isprs"
    data_root: Optional[str] = None        # required for isprs
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    num_classes: int = 6
    patch_size: int = 64
    color_map: Optional[Dict[str, int]] = None  # "r,g,b" -> class index

    # Model
    base_width: int = 16
    transformer_depth: int = 2
    transformer_heads: int = 4

    # Ablation toggles. hf_only is the fusion-only baseline: no Supplement
    # branches (missing scenarios duplicate the available Distinct pyramid),
    # and cw_on/dlkd_on are forced off.
    hf_only: bool = False
    cw_on: bool = True
    dlkd_on: bool = True

    # Losses
    loss_coefficients: Dict[str, float] = field(default_factory=dict)
    temperature: float = 2.0

    # Optimization
    learning_rate: float = 1e-3
    grad_clip: float = 10.0  # max global grad norm; <=0 disables clipping
    steps: int = 500
    batch_size: int = 8
    augment: bool = True
    seed: int = 0

    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec.from_dict(self.synthetic)
        if self.source == "synthetic":
            self.num_classes = self.synthetic.num_classes
            self.patch_size = self.synthetic.patch_size
        if self.source not in ("synthetic", "isprs"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "isprs" and not self.data_root:
            raise ValueError("isprs source requires data_root")
        if self.patch_size % 16:
            raise ValueError("patch_size must be divisible by 16")
        if self.hf_only:
            self.cw_on = False
            self.dlkd_on = False

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["synthetic"] = self.synthetic.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        return ExperimentConfig(**d)

    @staticmethod
    def from_file(path: Path | str) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_dict(yaml.safe_load(fh) or {})

    def save(self, path: Path | str) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def architecture_hash(self) -> str:
        """Hash of every field that changes parameter shapes or wiring;
        checkpoints refuse to load across a mismatch."""
        arch = {
            "num_classes": self.num_classes,
            "patch_size": self.patch_size,
            "base_width": self.base_width,
            "transformer_depth": self.transformer_depth,
            "transformer_heads": self.transformer_heads,
            "cw_on": self.cw_on,
            "hf_only": self.hf_only,
        }
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()
