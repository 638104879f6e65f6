"""Independent brute-force reference implementations used by the tests.

Everything here is written for clarity, not speed, and deliberately
avoids the library code paths it is used to check.
"""

from __future__ import annotations

import numpy as np


def flood_fill_components_26(mask: np.ndarray) -> list[set[tuple[int, int, int]]]:
    """BFS flood fill over positive voxels with 26-connectivity.

    ``mask`` is a [z, y, x] array; returns voxel sets of (x, y, z)
    tuples, ordered by first encounter in x-fastest scan order.
    """
    nz, ny, nx = mask.shape
    positive = {(int(x), int(y), int(z))
                for z in range(nz) for y in range(ny) for x in range(nx)
                if mask[z, y, x]}
    seen: set[tuple[int, int, int]] = set()
    components = []
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                start = (x, y, z)
                if start not in positive or start in seen:
                    continue
                comp = set()
                queue = [start]
                seen.add(start)
                while queue:
                    cx, cy, cz = queue.pop()
                    comp.add((cx, cy, cz))
                    for dx in (-1, 0, 1):
                        for dy in (-1, 0, 1):
                            for dz in (-1, 0, 1):
                                if dx == dy == dz == 0:
                                    continue
                                nb = (cx + dx, cy + dy, cz + dz)
                                if nb in positive and nb not in seen:
                                    seen.add(nb)
                                    queue.append(nb)
                components.append(comp)
    return components


def erode_3x3(mask: np.ndarray) -> np.ndarray:
    """Set-algebra erosion with a 3x3 square; out of bounds is background."""
    ny, nx = mask.shape
    out = np.zeros_like(mask)
    for y in range(ny):
        for x in range(nx):
            ok = True
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < ny and 0 <= xx < nx and mask[yy, xx]):
                        ok = False
            out[y, x] = 1 if ok else 0
    return out


def dilate_3x3(mask: np.ndarray) -> np.ndarray:
    """Set-algebra dilation with a 3x3 square, clipped to the grid."""
    ny, nx = mask.shape
    out = np.zeros_like(mask)
    for y in range(ny):
        for x in range(nx):
            if not mask[y, x]:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < ny and 0 <= xx < nx:
                        out[yy, xx] = 1
    return out


def open_3x3(mask: np.ndarray) -> np.ndarray:
    return dilate_3x3(erode_3x3(mask))


def bilinear_u8(src: np.ndarray, out_side: int) -> np.ndarray:
    """Per-pixel bilinear resample with the align-corners mapping."""
    s = src.shape[0]
    out = np.zeros((out_side, out_side), dtype=np.uint8)
    for j in range(out_side):
        for i in range(out_side):
            if out_side == 1:
                yc = xc = (s - 1) / 2.0
            else:
                yc = j * (s - 1) / (out_side - 1)
                xc = i * (s - 1) / (out_side - 1)
            y0, x0 = int(np.floor(yc)), int(np.floor(xc))
            y1, x1 = min(y0 + 1, s - 1), min(x0 + 1, s - 1)
            fy, fx = yc - y0, xc - x0
            v = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
                 + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
            out[j, i] = int(np.floor(v + 0.5))
    return out


def f1_brute(truth: np.ndarray, pred: np.ndarray, c: int) -> float:
    tp = fp = fn = 0
    for i in range(truth.shape[0]):
        if truth[i, c] == 1 and pred[i, c] == 1:
            tp += 1
        elif truth[i, c] == 0 and pred[i, c] == 1:
            fp += 1
        elif truth[i, c] == 1 and pred[i, c] == 0:
            fn += 1
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def auc_brute(scores, labels) -> float | None:
    """Pairwise AUC: correct orderings plus half the ties."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def hamming_brute(truth: np.ndarray, pred: np.ndarray) -> float:
    mism = 0
    n, c = truth.shape
    for i in range(n):
        for j in range(c):
            if truth[i, j] != pred[i, j]:
                mism += 1
    return mism / (n * c)


def spec_sens_brute(truth, pred):
    tp = sum(1 for t, p in zip(truth, pred) if t == 1 and p == 1)
    tn = sum(1 for t, p in zip(truth, pred) if t == 0 and p == 0)
    fp = sum(1 for t, p in zip(truth, pred) if t == 0 and p == 1)
    fn = sum(1 for t, p in zip(truth, pred) if t == 1 and p == 0)
    spec = tn / (tn + fp) if tn + fp else None
    sens = tp / (tp + fn) if tp + fn else None
    return spec, sens
