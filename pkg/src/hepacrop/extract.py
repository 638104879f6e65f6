"""Per-lesion crop extraction from annotated CT volumes.

The pipeline, per patient:

1. label 26-connected lesion components in the 3D annotation mask;
2. clean each 2D slice of a component by morphological opening (3x3
   square, one erosion then one dilation);
3. keep a slice only if its cleaned area strictly exceeds ``epsilon``
   times the lesion's mean per-slice area;
4. expand the slice bounding box by a physical border (mm -> pixels,
   rounded up per axis), window the HU slice to 8-bit grayscale, and
   emit a square crop resampled to a fixed resolution.

Everything here is deterministic and pure per patient; patients can be
processed in parallel.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import AnnotationMask, Volume, check_congruent

Rect = tuple[int, int, int, int]  # (x0, y0, x1, y1), half-open


class ComponentVanishedWarning(UserWarning):
    """A lesion component has no surviving slice after opening."""


@dataclass(frozen=True)
class PreprocessConfig:
    """Knobs for the crop extraction pipeline.

    ``epsilon`` is the slice-inclusion threshold (area must strictly
    exceed epsilon * mean area), ``border_mm`` the physical context
    border added around each lesion, ``resolution`` the square output
    side in pixels, and the window maps
    ``[center - width/2, center + width/2]`` HU onto [0, 255].
    ``mean_pre_opening`` switches the mean-area reference to the raw
    (pre-opening) per-slice areas.
    """

    epsilon: float = 0.4
    border_mm: float = 10.0
    resolution: int = 128
    window_center: float = 40.0
    window_width: float = 400.0
    mean_pre_opening: bool = False

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.border_mm < 0:
            raise ValueError(f"border_mm must be >= 0, got {self.border_mm}")
        if self.resolution < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")
        if self.window_width <= 0:
            raise ValueError(f"window_width must be > 0, got {self.window_width}")


@dataclass(frozen=True)
class LesionComponent:
    """One maximal 26-connected set of positive mask voxels.

    ``voxels`` is an (N, 3) int array of (x, y, z) coordinates ordered by
    scan order; ``per_slice_area`` maps slice index -> pixel count and
    ``mean_area`` is the mean over slices with nonzero area.
    """

    label_id: int
    voxels: np.ndarray
    per_slice_area: dict[int, int]
    mean_area: float

    @property
    def size(self) -> int:
        return len(self.voxels)


@dataclass(frozen=True)
class LesionCrop:
    """A square 8-bit grayscale crop of one lesion slice."""

    patient_id: str
    lesion_id: int
    slice_index: int
    pixels: np.ndarray  # uint8, (r, r)
    bbox_source: Rect   # expanded bbox clamped to the slice, original coords
    pad_fraction: float

    def __post_init__(self):
        if self.pixels.dtype != np.uint8:
            raise ValueError("crop pixels must be uint8")
        if not 0 <= self.pad_fraction < 1:
            raise ValueError(f"pad_fraction must be in [0, 1), got {self.pad_fraction}")
        self.pixels.setflags(write=False)


def window_hu(hu, center: float, width: float):
    """Map HU to 8-bit grayscale over the window [center-w/2, center+w/2].

    g = round(255 * clamp((hu - (center - width/2)) / width, 0, 1)),
    rounding half away from zero.  Accepts scalars or arrays; returns an
    int for scalar input, a uint8 array otherwise.
    """
    if width <= 0:
        raise ValueError(f"window width must be > 0, got {width}")
    arr = np.asarray(hu, dtype=np.float64)
    u = np.clip((arr - (center - width / 2.0)) / width, 0.0, 1.0)
    g = np.floor(255.0 * u + 0.5)  # values are nonnegative
    if np.isscalar(hu) or arr.ndim == 0:
        return int(g)
    return g.astype(np.uint8)


def connected_components_26(mask: AnnotationMask) -> list[LesionComponent]:
    """Label 26-connected components of a binary mask.

    Label ids follow first-encounter scan order: x fastest, then y,
    then z.  The returned per-slice areas are the raw (pre-opening)
    pixel counts.
    """
    labeled, n = ndimage.label(mask.data, structure=np.ones((3, 3, 3), dtype=np.uint8))
    if n == 0:
        return []

    flat = labeled.ravel()  # C order over [z, y, x] -> x-fastest scan
    nonzero = np.flatnonzero(flat)
    labels_at = flat[nonzero]

    # Normalize label ids to first-encounter order regardless of how the
    # underlying labeler numbered them.
    uniq, first_idx = np.unique(labels_at, return_index=True)
    encounter_order = uniq[np.argsort(first_idx, kind="stable")]

    order = np.argsort(labels_at, kind="stable")  # groups labels, keeps scan order
    sorted_labels = labels_at[order]
    sorted_flat = nonzero[order]
    boundaries = np.searchsorted(sorted_labels, uniq)
    spans = dict(zip(uniq.tolist(), zip(boundaries.tolist(),
                                        np.append(boundaries[1:], len(sorted_labels)).tolist())))

    nz, ny, nx = mask.data.shape
    components = []
    for new_id, old in enumerate(encounter_order.tolist(), start=1):
        lo, hi = spans[old]
        flat_idx = sorted_flat[lo:hi]
        z, y, x = np.unravel_index(flat_idx, (nz, ny, nx))
        voxels = np.stack([x, y, z], axis=1).astype(np.int32)
        zs, counts = np.unique(z, return_counts=True)
        per_slice = {int(k): int(c) for k, c in zip(zs, counts)}
        components.append(
            LesionComponent(
                label_id=new_id,
                voxels=voxels,
                per_slice_area=per_slice,
                mean_area=float(np.mean(counts)),
            )
        )
    return components


_OPEN_SE = np.ones((3, 3), dtype=np.uint8)


def open_slice(slice_mask: np.ndarray) -> np.ndarray:
    """Morphological opening with a 3x3 square structuring element.

    One erosion (out-of-bounds counts as background) followed by one
    dilation.  Idempotent and anti-extensive.
    """
    m = np.asarray(slice_mask) != 0
    eroded = ndimage.binary_erosion(m, structure=_OPEN_SE, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=_OPEN_SE, border_value=0)
    return opened.astype(np.uint8)


def slice_included(area: float, mean_area: float, epsilon: float) -> bool:
    """Keep a slice iff its area strictly exceeds epsilon * mean area."""
    return area > epsilon * mean_area


def bbox_of(slice_mask: np.ndarray) -> Rect:
    """Half-open bounding box (x0, y0, x1, y1) of a nonempty 2D mask."""
    ys, xs = np.nonzero(slice_mask)
    if xs.size == 0:
        raise ValueError("cannot take the bbox of an empty mask")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def expand_bbox(bbox: Rect, border_mm: float, spacing: tuple[float, float],
                bounds: tuple[int, int]) -> tuple[Rect, Rect]:
    """Grow a bbox by a physical border, clamped to the slice bounds.

    The border converts to pixels per axis as ceil(border_mm / spacing)
    (never shrinking the prescribed border; the quotient is rounded to 9
    decimals first to absorb float division noise).  Returns
    ``(clamped, unclamped)`` so callers can account for out-of-bounds
    padding.
    """
    x0, y0, x1, y1 = bbox
    sx, sy = spacing
    dx = math.ceil(round(border_mm / sx, 9))
    dy = math.ceil(round(border_mm / sy, 9))
    unclamped = (x0 - dx, y0 - dy, x1 + dx, y1 + dy)
    nx, ny = bounds
    clamped = (
        max(unclamped[0], 0),
        max(unclamped[1], 0),
        min(unclamped[2], nx),
        min(unclamped[3], ny),
    )
    return clamped, unclamped


def _bilinear_resize_u8(src: np.ndarray, out_side: int) -> np.ndarray:
    """Resample a square u8 grid to out_side x out_side.

    Output pixel i samples source coordinate i*(s-1)/(n-1), so an
    equal-size resample is the identity.  Rounding is half away from
    zero.
    """
    s = src.shape[0]
    if out_side == 1:
        coords = np.array([(s - 1) / 2.0])
    else:
        # multiply before dividing: i*(s-1) is exact, so equal sizes map to
        # exact integer coordinates (identity resample)
        coords = np.arange(out_side) * (s - 1) / (out_side - 1)
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, s - 1)
    f = coords - i0

    vals = src.astype(np.float64)
    top = vals[np.ix_(i0, i0)] * (1 - f)[None, :] + vals[np.ix_(i0, i1)] * f[None, :]
    bot = vals[np.ix_(i1, i0)] * (1 - f)[None, :] + vals[np.ix_(i1, i1)] * f[None, :]
    out = top * (1 - f)[:, None] + bot * f[:, None]
    return np.floor(out + 0.5).astype(np.uint8)


def square_crop_resample(slice_gray: np.ndarray, bbox: Rect, resolution: int
                         ) -> tuple[np.ndarray, float]:
    """Cut a square region around ``bbox`` and resample it to r x r.

    The shorter bbox axis is extended symmetrically to a square (an odd
    deficit puts the extra pixel on the high side).  Pixels outside the
    slice are padded with 0 and accounted in the returned pad fraction.
    ``bbox`` may extend beyond the slice.
    """
    x0, y0, x1, y1 = bbox
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise ValueError(f"empty bbox {bbox}")
    if w < h:
        d = h - w
        x0 -= d // 2
        x1 += d - d // 2
    elif h < w:
        d = w - h
        y0 -= d // 2
        y1 += d - d // 2
    side = x1 - x0

    ny, nx = slice_gray.shape
    src = np.zeros((side, side), dtype=np.uint8)
    ox0, oy0 = max(x0, 0), max(y0, 0)
    ox1, oy1 = min(x1, nx), min(y1, ny)
    overlap = max(ox1 - ox0, 0) * max(oy1 - oy0, 0)
    if overlap:
        src[oy0 - y0 : oy1 - y0, ox0 - x0 : ox1 - x0] = slice_gray[oy0:oy1, ox0:ox1]
    pad_fraction = 1.0 - overlap / (side * side)

    return _bilinear_resize_u8(src, resolution), pad_fraction


def _component_slices(comp: LesionComponent, shape: tuple[int, int]
                      ) -> dict[int, np.ndarray]:
    """Per-slice 2D masks of a component, keyed by slice index."""
    out: dict[int, np.ndarray] = {}
    xs, ys, zs = comp.voxels[:, 0], comp.voxels[:, 1], comp.voxels[:, 2]
    for z in sorted(comp.per_slice_area):
        sel = zs == z
        m = np.zeros(shape, dtype=np.uint8)
        m[ys[sel], xs[sel]] = 1
        out[int(z)] = m
    return out


def opened_components(mask: AnnotationMask) -> list[LesionComponent]:
    """Connected components with per-slice areas recomputed after opening.

    Components whose every slice vanishes under opening are dropped.
    """
    ny, nx = mask.data.shape[1:]
    out = []
    for comp in connected_components_26(mask):
        areas = {}
        voxels = []
        for z, m in _component_slices(comp, (ny, nx)).items():
            o = open_slice(m)
            a = int(o.sum())
            if a:
                areas[z] = a
                yy, xx = np.nonzero(o)
                voxels.append(np.stack([xx, yy, np.full_like(xx, z)], axis=1))
        if not areas:
            continue
        out.append(
            LesionComponent(
                label_id=comp.label_id,
                voxels=np.concatenate(voxels).astype(np.int32),
                per_slice_area=areas,
                mean_area=float(np.mean(list(areas.values()))),
            )
        )
    return out


def preprocess_patient(vol: Volume, mask: AnnotationMask, cfg: PreprocessConfig,
                       patient_id: str | None = None) -> list[LesionCrop]:
    """Run the full crop-extraction pipeline for one patient.

    Output order is deterministic: lesion label ascending, then slice
    index ascending.  A component that vanishes entirely under opening
    is skipped with a :class:`ComponentVanishedWarning`.
    """
    check_congruent(vol, mask)
    if patient_id is None:
        patient_id = vol.source_id
    nz, ny, nx = mask.data.shape
    sx, sy = vol.spacing[0], vol.spacing[1]

    crops: list[LesionCrop] = []
    windowed: dict[int, np.ndarray] = {}
    for comp in connected_components_26(mask):
        slices = _component_slices(comp, (ny, nx))
        opened = {z: open_slice(m) for z, m in slices.items()}
        post_areas = {z: int(o.sum()) for z, o in opened.items()}

        alive = [a for a in post_areas.values() if a > 0]
        if not alive:
            warnings.warn(
                f"lesion {comp.label_id} of patient {patient_id!r} vanished after opening",
                ComponentVanishedWarning,
                stacklevel=2,
            )
            continue
        if cfg.mean_pre_opening:
            mean_area = comp.mean_area
        else:
            mean_area = float(np.mean(alive))

        for z in sorted(opened):
            area = post_areas[z]
            if not slice_included(area, mean_area, cfg.epsilon):
                continue
            clamped, unclamped = expand_bbox(
                bbox_of(opened[z]), cfg.border_mm, (sx, sy), (nx, ny)
            )
            if z not in windowed:
                windowed[z] = window_hu(vol.data[z], cfg.window_center, cfg.window_width)
            pixels, pad = square_crop_resample(windowed[z], unclamped, cfg.resolution)
            crops.append(
                LesionCrop(
                    patient_id=patient_id,
                    lesion_id=comp.label_id,
                    slice_index=z,
                    pixels=pixels,
                    bbox_source=clamped,
                    pad_fraction=pad,
                )
            )
    return crops
