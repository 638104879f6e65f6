"""Readers for the crop-pipeline file formats.

The upstream pipeline publishes JSONL manifests (one crop record per
line), JSON split plans ({seed, train, test, stats}), 8-bit grayscale
PNG crops, and expects predictions back as JSONL
({patient_id, lesion_id, slice_index, scores, class_space, seed,
model_tag}).  This module speaks those formats directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

CLASSES_5 = ("nras", "kras", "braf", "pik3ca", "other")
CLASSES_3 = ("ras", "pik3ca_braf", "other")


@dataclass(frozen=True)
class Crop:
    patient_id: str
    lesion_id: int
    slice_index: int
    image_path: str
    resolution: int
    flags: tuple[int, int, int, int, int]  # class order as CLASSES_5

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.patient_id, self.lesion_id, self.slice_index)

    def target(self, grouping: int) -> tuple[int, ...]:
        if grouping == 5:
            return self.flags
        nras, kras, braf, pik3ca, other = self.flags
        return (int(nras or kras), int(pik3ca or braf), int(other))


def read_manifest(path) -> list[Crop]:
    crops = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            crops.append(Crop(
                patient_id=str(d["patient_id"]),
                lesion_id=int(d["lesion_id"]),
                slice_index=int(d["slice_index"]),
                image_path=str(d["image_path"]),
                resolution=int(d["resolution"]),
                flags=tuple(int(d["labels"][c]) for c in CLASSES_5),
            ))
    return crops


@dataclass(frozen=True)
class Split:
    seed: int
    train: frozenset[str]
    test: frozenset[str]


def read_split(path) -> Split:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return Split(seed=int(d["seed"]), train=frozenset(d["train"]),
                 test=frozenset(d["test"]))


def load_images(crops: list[Crop], root) -> torch.Tensor:
    """Stack crop PNGs into a float tensor (N, 1, H, W) in [0, 1]."""
    root = Path(root)
    arrays = []
    for crop in crops:
        img = Image.open(root / crop.image_path)
        arrays.append(np.asarray(img, dtype=np.float32) / 255.0)
    data = np.stack(arrays)[:, None, :, :]
    return torch.from_numpy(data)


def write_predictions(path, crops: list[Crop], scores: torch.Tensor,
                      class_space: int, seed: int, model_tag: str) -> None:
    scores = scores.detach().cpu().numpy()
    with open(path, "w", encoding="utf-8") as fh:
        for crop, row in sorted(zip(crops, scores), key=lambda x: x[0].key):
            fh.write(json.dumps({
                "patient_id": crop.patient_id,
                "lesion_id": crop.lesion_id,
                "slice_index": crop.slice_index,
                "scores": [float(v) for v in row],
                "class_space": class_space,
                "seed": seed,
                "model_tag": model_tag,
            }, sort_keys=True) + "\n")
