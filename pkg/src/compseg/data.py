"""Paired two-modality patch pipeline: directory loader, synthetic generator,
augmentation, and scenario-mask sampling.

Patches carry a 3-channel spectral image (rgir), a 1-channel height image
(ndsm), and a dense integer label map. Everything downstream consumes
``SamplePatch`` regardless of where the pixels came from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image


class Modality(str, Enum):
    RGIR = "rgir"
    NDSM = "ndsm"


MODALITY_CHANNELS: Dict[Modality, int] = {Modality.RGIR: 3, Modality.NDSM: 1}


@dataclass(frozen=True)
class ScenarioMask:
    """Which modalities are present. At least one flag must be true."""

    rgir_present: bool
    ndsm_present: bool

    def __post_init__(self):
        if not (self.rgir_present or self.ndsm_present):
            raise ValueError("illegal scenario mask: both modalities absent")

    @property
    def name(self) -> str:
        if self.rgir_present and self.ndsm_present:
            return "full"
        return "missing_ndsm" if self.rgir_present else "missing_rgir"

    @staticmethod
    def from_name(name: str) -> "ScenarioMask":
        table = {
            "full": ScenarioMask(True, True),
            "missing_rgir": ScenarioMask(False, True),
            "missing_ndsm": ScenarioMask(True, False),
        }
        if name not in table:
            raise ValueError(f"unknown scenario name: {name!r}")
        return table[name]


FULL = ScenarioMask(True, True)
MISSING_RGIR = ScenarioMask(False, True)
MISSING_NDSM = ScenarioMask(True, False)
ALL_SCENARIOS = (FULL, MISSING_RGIR, MISSING_NDSM)


@dataclass
class SamplePatch:
    """One training/evaluation patch with both modalities and dense labels."""

    rgir: np.ndarray   # float32 [3, H, W] in [0, 1]
    ndsm: np.ndarray   # float32 [1, H, W] in [0, 1]
    label: np.ndarray  # int64 [H, W]
    patch_id: str

    def validate(self, num_classes: Optional[int] = None) -> None:
        if self.rgir.shape[0] != 3 or self.ndsm.shape[0] != 1:
            raise ValueError("bad channel counts for rgir/ndsm")
        if self.rgir.shape[1:] != self.ndsm.shape[1:] or self.rgir.shape[1:] != self.label.shape:
            raise ValueError(f"patch {self.patch_id}: modality/label size mismatch")
        if num_classes is not None and self.label.max(initial=0) >= num_classes:
            raise ValueError(f"patch {self.patch_id}: label value >= {num_classes}")


class Signal(str, Enum):
    """Where a synthetic class is distinguishable from background."""

    SPECTRAL_ONLY = "spectral_only"
    HEIGHT_ONLY = "height_only"
    BOTH = "both"


@dataclass
class SyntheticSpec:
    """Deterministic synthetic dataset description.

    ``class_frequency`` maps every class index (0 = background) to a target
    pixel fraction; ``signal_assignment`` maps every non-background class to
    the modality carrying its signal.
    """

    num_classes: int = 6
    patch_size: int = 64
    num_patches: int = 16
    seed: int = 0
    class_frequency: Dict[int, float] = field(default_factory=dict)
    signal_assignment: Dict[int, Signal] = field(default_factory=dict)
    noise_std: float = 0.03   # per-pixel Gaussian noise on both modalities
    contrast: float = 1.0     # scales class signal deviation from background
    paired_layout: bool = False  # place spectral/height partner rects side by side

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not 0 < self.contrast <= 1.0:
            raise ValueError("contrast must lie in (0, 1]")
        if not self.class_frequency:
            self.class_frequency = default_class_frequency(self.num_classes)
        if not self.signal_assignment:
            self.signal_assignment = default_signal_assignment(self.num_classes)
        self.signal_assignment = {int(k): Signal(v) for k, v in self.signal_assignment.items()}
        self.class_frequency = {int(k): float(v) for k, v in self.class_frequency.items()}
        total = sum(self.class_frequency.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"class frequencies sum to {total}, expected 1")
        assigned = set(self.signal_assignment.values())
        if Signal.SPECTRAL_ONLY not in assigned or Signal.HEIGHT_ONLY not in assigned:
            raise ValueError("need at least one SPECTRAL_ONLY and one HEIGHT_ONLY class")
        if self.paired_layout:
            spectral, height = self.paired_classes()
            if len(spectral) != len(height):
                raise ValueError("paired_layout needs equal numbers of "
                                 "SPECTRAL_ONLY and HEIGHT_ONLY classes")
            for s, h in zip(spectral, height):
                if abs(self.class_frequency[s] - self.class_frequency[h]) > 1e-6:
                    raise ValueError(f"paired classes {s} and {h} need equal frequencies")

    def paired_classes(self) -> Tuple[List[int], List[int]]:
        """Sorted SPECTRAL_ONLY and HEIGHT_ONLY class ids, paired by rank."""
        spectral = sorted(k for k, s in self.signal_assignment.items()
                          if s is Signal.SPECTRAL_ONLY)
        height = sorted(k for k, s in self.signal_assignment.items()
                        if s is Signal.HEIGHT_ONLY)
        return spectral, height

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "patch_size": self.patch_size,
            "num_patches": self.num_patches,
            "seed": self.seed,
            "class_frequency": {str(k): v for k, v in self.class_frequency.items()},
            "signal_assignment": {str(k): v.value for k, v in self.signal_assignment.items()},
            "noise_std": self.noise_std,
            "contrast": self.contrast,
            "paired_layout": self.paired_layout,
        }

    @staticmethod
    def from_dict(d: Mapping) -> "SyntheticSpec":
        return SyntheticSpec(
            num_classes=int(d.get("num_classes", 6)),
            patch_size=int(d.get("patch_size", 64)),
            num_patches=int(d.get("num_patches", 16)),
            seed=int(d.get("seed", 0)),
            class_frequency={int(k): float(v) for k, v in d.get("class_frequency", {}).items()},
            signal_assignment={int(k): Signal(v) for k, v in d.get("signal_assignment", {}).items()},
            noise_std=float(d.get("noise_std", 0.03)),
            contrast=float(d.get("contrast", 1.0)),
            paired_layout=bool(d.get("paired_layout", False)),
        )


def default_class_frequency(num_classes: int) -> Dict[int, float]:
    # Imbalanced split mirroring land-cover statistics: one dominant surface
    # class plus progressively rarer object classes.
    if num_classes < 3:
        raise ValueError("synthetic spec needs at least 3 classes")
    rare = [0.16, 0.12, 0.08, 0.05, 0.03, 0.02, 0.01][: num_classes - 1]
    freq = {k + 1: rare[k] for k in range(num_classes - 1)}
    freq[0] = 1.0 - sum(freq.values())
    return freq


def default_signal_assignment(num_classes: int) -> Dict[int, Signal]:
    cycle = [Signal.BOTH, Signal.SPECTRAL_ONLY, Signal.HEIGHT_ONLY]
    return {k: cycle[(k - 1) % 3] for k in range(1, num_classes)}


# Mean-preserving spectral palette: each color averages ~0.35 across channels
# so colored regions do not shift the global rgir mean.
_PALETTE = np.array(
    [
        [0.80, 0.15, 0.10],
        [0.10, 0.80, 0.15],
        [0.15, 0.10, 0.80],
        [0.60, 0.40, 0.05],
        [0.05, 0.40, 0.60],
        [0.45, 0.05, 0.55],
        [0.55, 0.45, 0.05],
    ],
    dtype=np.float32,
)

_BG_RGIR = 0.35
_BG_NDSM = 0.20
# Distinct height plateaus for height-carrying classes.
_HEIGHTS = [0.55, 0.70, 0.85, 0.45, 0.62, 0.78, 0.92]


def _rect_pieces(target_px: int, size: int) -> List[int]:
    """Split a class's pixel budget into rectangle areas of at most
    (size/8)^2 px each, so placement never deadlocks on one huge rect."""
    max_piece = max((size // 8) ** 2, 16)
    pieces = []
    remaining = target_px
    while remaining > 0:
        piece = min(remaining, max_piece)
        if 0 < remaining - piece < 4:  # avoid sub-4px slivers
            piece = remaining
        pieces.append(piece)
        remaining -= piece
    return pieces


def _rect_dims(target_px: int, max_side: int) -> Tuple[int, int]:
    h = max(1, min(int(round(math.sqrt(target_px))), max_side))
    w = max(1, min(int(round(target_px / h)), max_side))
    return h, w


def generate_synthetic(spec: SyntheticSpec) -> List[SamplePatch]:
    """Generate ``spec.num_patches`` deterministic patches.

    Non-background classes get rectangular regions whose area matches the
    target pixel fraction; SPECTRAL_ONLY classes only recolor rgir,
    HEIGHT_ONLY classes only raise ndsm, BOTH touch both.
    """
    return [generate_patch(spec, i) for i in range(spec.num_patches)]


def _paint_rect(spec: SyntheticSpec, rng: np.random.Generator,
                rgir: np.ndarray, ndsm: np.ndarray, label: np.ndarray,
                k: int, y: int, x: int, h: int, w: int) -> None:
    region = (slice(y, y + h), slice(x, x + w))
    label[region] = k
    sig = spec.signal_assignment[k]
    noise = spec.noise_std
    if sig in (Signal.SPECTRAL_ONLY, Signal.BOTH):
        color = _BG_RGIR + spec.contrast * (_PALETTE[(k - 1) % len(_PALETTE)] - _BG_RGIR)
        rgir[:, region[0], region[1]] = color[:, None, None] + rng.normal(
            0.0, noise, size=(3, h, w)
        ).astype(np.float32)
    if sig in (Signal.HEIGHT_ONLY, Signal.BOTH):
        height = _BG_NDSM + spec.contrast * (_HEIGHTS[(k - 1) % len(_HEIGHTS)] - _BG_NDSM)
        ndsm[0, region[0], region[1]] = height + rng.normal(
            0.0, noise, size=(h, w)
        ).astype(np.float32)


def generate_patch(spec: SyntheticSpec, index: int) -> SamplePatch:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.patch_size
    noise = spec.noise_std
    rgir = np.full((3, size, size), _BG_RGIR, dtype=np.float32)
    rgir += rng.normal(0.0, noise, size=rgir.shape).astype(np.float32)
    ndsm = np.full((1, size, size), _BG_NDSM, dtype=np.float32)
    ndsm += rng.normal(0.0, noise, size=ndsm.shape).astype(np.float32)
    label = np.zeros((size, size), dtype=np.int64)

    paired: set = set()
    if spec.paired_layout:
        # Spectral/height partner classes share placements: each spectral
        # rectangle sits immediately left of an equal-sized rectangle of its
        # height partner, so either region's extent is inferable from the
        # other modality's visible half.
        spectral, height_cls = spec.paired_classes()
        paired = set(spectral) | set(height_cls)
        for s_cls, h_cls in zip(spectral, height_cls):
            target = int(round(spec.class_frequency[s_cls] * size * size))
            if target <= 0:
                continue
            for piece in _rect_pieces(target, size):
                h, w = _rect_dims(piece, size // 2)
                placed = False
                for _ in range(400):
                    y = int(rng.integers(0, size - h + 1))
                    x = int(rng.integers(0, size - 2 * w + 1))
                    if np.any(label[y : y + h, x : x + 2 * w] != 0):
                        continue
                    _paint_rect(spec, rng, rgir, ndsm, label, s_cls, y, x, h, w)
                    _paint_rect(spec, rng, rgir, ndsm, label, h_cls, y, x + w, h, w)
                    placed = True
                    break
                if not placed:
                    raise RuntimeError(
                        f"cannot place paired classes {s_cls}/{h_cls} ({target} px) "
                        f"in a {size}x{size} patch; frequency packing infeasible"
                    )

    for k in range(1, spec.num_classes):
        if k in paired:
            continue
        target = int(round(spec.class_frequency[k] * size * size))
        if target <= 0:
            continue
        for piece in _rect_pieces(target, size):
            h, w = _rect_dims(piece, size)
            placed = False
            for _ in range(400):
                y = int(rng.integers(0, size - h + 1))
                x = int(rng.integers(0, size - w + 1))
                if np.any(label[y : y + h, x : x + w] != 0):
                    continue
                _paint_rect(spec, rng, rgir, ndsm, label, k, y, x, h, w)
                placed = True
                break
            if not placed:
                raise RuntimeError(
                    f"cannot place class {k} ({target} px) in a {size}x{size} patch; "
                    "frequency packing infeasible"
                )

    np.clip(rgir, 0.0, 1.0, out=rgir)
    np.clip(ndsm, 0.0, 1.0, out=ndsm)
    patch = SamplePatch(rgir=rgir, ndsm=ndsm, label=label, patch_id=f"synth_{spec.seed}_{index:05d}")
    patch.validate(spec.num_classes)
    return patch


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentParams:
    """One concrete augmentation draw: dihedral transform + rgir jitter."""

    flip_h: bool = False
    flip_v: bool = False
    rot90: int = 0             # number of 90-degree CCW rotations, 0..3
    brightness: float = 1.0    # multiplicative, rgir only
    contrast: float = 1.0     # around per-channel mean, rgir only

    @property
    def is_identity(self) -> bool:
        return (
            not self.flip_h
            and not self.flip_v
            and self.rot90 == 0
            and self.brightness == 1.0
            and self.contrast == 1.0
        )


def draw_augment_params(rng: np.random.Generator) -> AugmentParams:
    jitter = rng.random() < 0.5
    return AugmentParams(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        rot90=int(rng.integers(0, 4)),
        brightness=float(rng.uniform(0.9, 1.1)) if jitter else 1.0,
        contrast=float(rng.uniform(0.9, 1.1)) if jitter else 1.0,
    )


def _geom(arr: np.ndarray, params: AugmentParams) -> np.ndarray:
    # Spatial axes are the last two regardless of array rank.
    if params.flip_h:
        arr = arr[..., ::-1]
    if params.flip_v:
        arr = arr[..., ::-1, :]
    if params.rot90:
        arr = np.rot90(arr, k=params.rot90, axes=(-2, -1))
    return arr


def apply_augment(patch: SamplePatch, params: AugmentParams) -> SamplePatch:
    rgir = _geom(patch.rgir, params).copy()
    ndsm = _geom(patch.ndsm, params).copy()
    label = _geom(patch.label, params).copy()
    if params.brightness != 1.0 or params.contrast != 1.0:
        mean = rgir.mean(axis=(1, 2), keepdims=True)
        rgir = (rgir - mean) * params.contrast + mean
        rgir = np.clip(rgir * params.brightness, 0.0, 1.0).astype(np.float32)
    return SamplePatch(rgir=rgir.astype(np.float32), ndsm=ndsm.astype(np.float32),
                       label=label, patch_id=patch.patch_id)


def augment(patch: SamplePatch, seed: int) -> SamplePatch:
    """Seed-deterministic augmentation: same geometric transform on all three
    arrays, photometric jitter on rgir only."""
    return apply_augment(patch, draw_augment_params(np.random.default_rng(seed)))


def sample_training_mask(rng: np.random.Generator) -> ScenarioMask:
    """Draw the per-step missing scenario: missing-NDSM or missing-RGIR, 0.5 each."""
    return MISSING_NDSM if rng.random() < 0.5 else MISSING_RGIR


# ---------------------------------------------------------------------------
# Directory loader


def window_origins(extent: int, patch: int, stride: int) -> List[int]:
    """Clamped, de-duplicated window origins covering [0, extent)."""
    if patch > extent:
        raise ValueError(f"patch size {patch} exceeds tile extent {extent}")
    origins = []
    for o in range(0, extent, stride):
        origins.append(min(o, extent - patch))
        if o >= extent - patch:
            break
    return sorted(set(origins))


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im)


def _minmax(arr: np.ndarray) -> np.ndarray:
    arr = arr.astype(np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    if hi > lo:
        arr = (arr - lo) / (hi - lo)
    else:
        arr = np.zeros_like(arr)
    return arr


def _remap_label(raw: np.ndarray, color_map: Optional[Mapping[Tuple[int, ...], int]]) -> np.ndarray:
    if raw.ndim == 2:
        return raw.astype(np.int64)
    if color_map is None:
        raise ValueError("RGB label image requires a color->index map")
    out = np.full(raw.shape[:2], -1, dtype=np.int64)
    for color, idx in color_map.items():
        mask = np.all(raw[..., : len(color)] == np.asarray(color), axis=-1)
        out[mask] = idx
    if (out < 0).any():
        raise ValueError("label image contains colors outside the color map")
    return out


def load_isprs_tiles(
    root_dir: Path | str,
    split: str,
    patch_size: int,
    stride: int,
    color_map: Optional[Mapping[Tuple[int, ...], int]] = None,
) -> List[SamplePatch]:
    """Tile every <root>/<split>/{rgir,ndsm,label}/<tile>.<ext> triple into
    patches. Window origins are clamped at tile edges and de-duplicated, so
    every pixel is covered when stride <= patch_size."""
    if split not in ("train", "val", "test"):
        raise ValueError(f"unknown split {split!r}")
    root = Path(root_dir) / split
    dirs = {name: root / name for name in ("rgir", "ndsm", "label")}
    for name, d in dirs.items():
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory: {d}")
    stems = {name: {p.stem: p for p in d.iterdir() if p.is_file()} for name, d in dirs.items()}
    tile_ids = sorted(stems["rgir"])
    patches: List[SamplePatch] = []
    for tile_id in sorted(set().union(*[set(s) for s in stems.values()])):
        for name in ("rgir", "ndsm", "label"):
            if tile_id not in stems[name]:
                raise FileNotFoundError(f"tile {tile_id!r}: missing {name} file")
    for tile_id in tile_ids:
        rgir_raw = _read_image(stems["rgir"][tile_id])
        ndsm_raw = _read_image(stems["ndsm"][tile_id])
        label_raw = _read_image(stems["label"][tile_id])
        if rgir_raw.shape[:2] != ndsm_raw.shape[:2] or rgir_raw.shape[:2] != label_raw.shape[:2]:
            raise ValueError(f"tile {tile_id!r}: modality/label spatial size mismatch")
        if rgir_raw.ndim != 3 or rgir_raw.shape[2] < 3:
            raise ValueError(f"tile {tile_id!r}: rgir must have 3 channels")
        rgir = _minmax(rgir_raw[..., :3]).transpose(2, 0, 1)
        ndsm = _minmax(ndsm_raw if ndsm_raw.ndim == 2 else ndsm_raw[..., 0])[None]
        label = _remap_label(label_raw, color_map)
        hh, ww = label.shape
        for y in window_origins(hh, patch_size, stride):
            for x in window_origins(ww, patch_size, stride):
                patches.append(
                    SamplePatch(
                        rgir=rgir[:, y : y + patch_size, x : x + patch_size].copy(),
                        ndsm=ndsm[:, y : y + patch_size, x : x + patch_size].copy(),
                        label=label[y : y + patch_size, x : x + patch_size].copy(),
                        patch_id=f"{tile_id}_y{y}_x{x}",
                    )
                )
    return patches
