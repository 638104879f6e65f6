"""Deterministic synthetic CT studies for desk-scale testing.

Generates per-patient volumes with ellipsoidal lesions whose per-slice
cross-section areas are known analytically, exact binary masks, a
class-dependent texture inside each lesion (so a classifier has signal
to learn), and a study table carrying the mutation flags.  Everything is
a pure function of the config seed; per-patient RNG streams make
parallel generation safe.

The texture rules are documented pure functions of (class, position);
they are test scaffolding, not a claim about real lesion morphology.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import CLASSES_5, CropRecord, MutationLabels
from .volume_io import AnnotationMask, Volume, write_nifti

__all__ = [
    "SynthConfig", "StudyRecord", "SynthDataset", "SynthPlacementError",
    "synth_generate", "save_dataset", "load_studies", "write_studies",
    "manifest_from_class_counts", "write_nifti",
]


class SynthPlacementError(Exception):
    """Could not place a lesion after the bounded number of retries."""


@dataclass(frozen=True)
class SynthConfig:
    """Generator knobs; all sizes in mm unless stated otherwise."""

    n_patients: int = 20
    lesions_per_patient: tuple[int, int] = (1, 3)
    semi_axes_mm: tuple[float, float] = (4.0, 12.0)
    background_hu: tuple[float, float] = (20.0, 10.0)  # mean, std
    lesion_hu: float = 90.0
    texture_amp: float = 40.0
    texture_rule: str = "freq"  # "freq" | "level"
    dims: tuple[int, int, int] = (64, 64, 40)  # (nx, ny, nz) voxels
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    class_weights: tuple[float, ...] = (0.05, 0.38, 0.03, 0.19, 0.35)
    second_mutation_p: float = 0.1
    biopsy_days: tuple[int, int] = (5, 80)
    max_placement_retries: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("need at least one patient")
        if self.semi_axes_mm[0] <= 0:
            raise ValueError("semi-axes must be positive")
        if self.texture_rule not in ("freq", "level"):
            raise ValueError(f"unknown texture rule {self.texture_rule!r}")


@dataclass(frozen=True)
class StudyRecord:
    """Per-lesion study metadata emitted alongside the volumes."""

    patient_id: str
    lesion_id: int
    labels: MutationLabels
    days_ct_to_biopsy: int
    slice_spacing_mm: float
    center_vox: tuple[float, float, float]   # (cx, cy, cz) in voxel units
    semi_axes_mm: tuple[float, float, float]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = self.labels.to_dict()
        d["center_vox"] = list(self.center_vox)
        d["semi_axes_mm"] = list(self.semi_axes_mm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyRecord":
        return cls(
            patient_id=str(d["patient_id"]),
            lesion_id=int(d["lesion_id"]),
            labels=MutationLabels.from_dict(d["labels"]),
            days_ct_to_biopsy=int(d["days_ct_to_biopsy"]),
            slice_spacing_mm=float(d["slice_spacing_mm"]),
            center_vox=tuple(float(v) for v in d["center_vox"]),
            semi_axes_mm=tuple(float(v) for v in d["semi_axes_mm"]),
        )

    def analytic_slice_area_px(self, z: int, spacing: tuple[float, float, float]) -> float:
        """Exact ellipse cross-section area, in pixels, at slice z."""
        sx, sy, sz = spacing
        a, b, c = self.semi_axes_mm
        t = 1.0 - (((z - self.center_vox[2]) * sz) / c) ** 2
        if t <= 0:
            return 0.0
        return math.pi * (a * math.sqrt(t) / sx) * (b * math.sqrt(t) / sy)


@dataclass(frozen=True)
class SynthDataset:
    volumes: dict[str, Volume]
    masks: dict[str, AnnotationMask]
    studies: list[StudyRecord]


def _ellipsoid_mask(dims, spacing, center, semi_axes) -> np.ndarray:
    """Voxelize an ellipsoid at voxel centers; True inside."""
    nx, ny, nz = dims
    sx, sy, sz = spacing
    cx, cy, cz = center
    a, b, c = semi_axes
    x = (np.arange(nx) - cx) * sx / a
    y = (np.arange(ny) - cy) * sy / b
    z = (np.arange(nz) - cz) * sz / c
    return (z[:, None, None] ** 2 + y[None, :, None] ** 2 + x[None, None, :] ** 2) <= 1.0


def _texture(rule: str, class_idx: int, inside: np.ndarray, spacing, base: float,
             amp: float) -> np.ndarray:
    """Class-dependent HU values at the ``inside`` voxels of a lesion."""
    zz, yy, xx = np.nonzero(inside)
    if rule == "level":
        return np.full(len(xx), base + (class_idx - 2) * amp / 2.0)
    # "freq": per-class spatial frequency modulation in the xy plane
    f = 0.05 + 0.03 * class_idx  # cycles per mm
    sx, sy = spacing[0], spacing[1]
    return base + amp * np.sin(2 * np.pi * f * xx * sx) * np.sin(2 * np.pi * f * yy * sy)


def _sample_labels(rng: np.random.Generator, cfg: SynthConfig) -> tuple[MutationLabels, int]:
    """Pick a primary class (drives texture) and optional second mutation."""
    weights = np.asarray(cfg.class_weights, dtype=float)
    primary = int(rng.choice(5, p=weights / weights.sum()))
    flags = [0, 0, 0, 0, 0]
    flags[primary] = 1
    if primary != 4 and rng.random() < cfg.second_mutation_p:
        others = [k for k in range(4) if k != primary]
        flags[int(rng.choice(others))] = 1
    return MutationLabels(*flags), primary


def synth_generate(cfg: SynthConfig) -> SynthDataset:
    """Generate volumes, masks and study records for the whole cohort.

    Lesions within a patient are kept at Chebyshev distance >= 2 voxels
    from each other so 26-connected labeling recovers them exactly;
    lesion ids follow first-encounter scan order (x fastest, then y,
    then z), matching the component labeler.
    """
    nx, ny, nz = cfg.dims
    volumes: dict[str, Volume] = {}
    masks: dict[str, AnnotationMask] = {}
    studies: list[StudyRecord] = []

    for p in range(cfg.n_patients):
        pid = f"p{p:04d}"
        rng = np.random.default_rng([cfg.seed, p])
        vol = rng.normal(cfg.background_hu[0], cfg.background_hu[1],
                         size=(nz, ny, nx)).astype(np.float32)
        mask = np.zeros((nz, ny, nx), dtype=np.uint8)
        forbidden = np.zeros_like(mask, dtype=bool)

        n_lesions = int(rng.integers(cfg.lesions_per_patient[0],
                                     cfg.lesions_per_patient[1] + 1))
        days = int(rng.integers(cfg.biopsy_days[0], cfg.biopsy_days[1] + 1))

        lesions = []
        for _ in range(n_lesions):
            placed = False
            for _attempt in range(cfg.max_placement_retries):
                a, b, c = rng.uniform(*cfg.semi_axes_mm, size=3)
                rx, ry, rz = a / cfg.spacing[0], b / cfg.spacing[1], c / cfg.spacing[2]
                lo = np.array([rx, ry, rz]) + 1
                hi = np.array([nx, ny, nz]) - lo - 1
                if np.any(hi <= lo):
                    continue
                cx = rng.uniform(lo[0], hi[0])
                cy = rng.uniform(lo[1], hi[1])
                cz = rng.uniform(lo[2], hi[2])
                inside = _ellipsoid_mask(cfg.dims, cfg.spacing, (cx, cy, cz), (a, b, c))
                if not inside.any() or (inside & forbidden).any():
                    continue
                labels, primary = _sample_labels(rng, cfg)
                vol[inside] = _texture(cfg.texture_rule, primary, inside,
                                       cfg.spacing, cfg.lesion_hu, cfg.texture_amp)
                mask[inside] = 1
                forbidden |= ndimage.binary_dilation(inside, np.ones((3, 3, 3), bool))
                lesions.append(((cx, cy, cz), (a, b, c), labels, inside))
                placed = True
                break
            if not placed:
                raise SynthPlacementError(
                    f"could not place lesion for {pid} after "
                    f"{cfg.max_placement_retries} retries"
                )

        # First-encounter rank = min flat index in x-fastest scan order.
        def first_flat(inside: np.ndarray) -> int:
            return int(np.flatnonzero(inside.ravel())[0])

        lesions.sort(key=lambda item: first_flat(item[3]))
        for lesion_id, (center, axes, labels, _inside) in enumerate(lesions, start=1):
            studies.append(StudyRecord(
                patient_id=pid,
                lesion_id=lesion_id,
                labels=labels,
                days_ct_to_biopsy=days,
                slice_spacing_mm=cfg.spacing[2],
                center_vox=tuple(float(v) for v in center),
                semi_axes_mm=tuple(float(v) for v in axes),
            ))

        volumes[pid] = Volume.from_array(vol, cfg.spacing, source_id=pid)
        masks[pid] = AnnotationMask.from_array(mask, cfg.spacing, source_id=pid)

    return SynthDataset(volumes=volumes, masks=masks, studies=studies)


def write_studies(studies, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in studies:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_studies(path) -> list[StudyRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(StudyRecord.from_dict(json.loads(line)))
    return out


def save_dataset(ds: SynthDataset, outdir) -> None:
    """Write {pid}_ct.nii, {pid}_mask.nii and studies.jsonl under outdir."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for pid in sorted(ds.volumes):
        (outdir / f"{pid}_ct.nii").write_bytes(write_nifti(ds.volumes[pid]))
        (outdir / f"{pid}_mask.nii").write_bytes(write_nifti(ds.masks[pid]))
    write_studies(ds.studies, outdir / "studies.jsonl")


def manifest_from_class_counts(image_counts: dict[str, int], *,
                               resolution: int = 128,
                               images_per_lesion: int = 4) -> list[CropRecord]:
    """A manifest with exactly the requested single-label image counts.

    Useful for pinning a target class distribution: with N total images,
    class percentages come out exactly ``100*count/N``.  Each synthetic
    patient holds one lesion with at most ``images_per_lesion`` crops.
    """
    records = []
    patient_no = 0
    for cls in CLASSES_5:
        remaining = int(image_counts.get(cls, 0))
        flags = {c: int(c == cls) for c in CLASSES_5}
        while remaining > 0:
            pid = f"f{patient_no:04d}"
            patient_no += 1
            take = min(images_per_lesion, remaining)
            for s in range(take):
                records.append(CropRecord(
                    patient_id=pid,
                    lesion_id=1,
                    slice_index=s,
                    image_path=f"crops/{pid}_001_{s:04d}_{resolution}.png",
                    resolution=resolution,
                    labels=MutationLabels(**flags),
                    slice_spacing_mm=2.0,
                    days_ct_to_biopsy=30,
                ))
            remaining -= take
    return records
