"""Landmark-driven ROI crops and the N x N patch splitter.

Boxes live in continuous pixel coordinates where pixel ``i`` covers
``[i - 0.5, i + 0.5]``. Every crop is resampled bilinearly on an S x S grid of
cell centres and then z-scored on its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .datagen import Image2D, LandmarkSet

MODALITY_NAMES = (
    "whole",
    "clav_L_0", "clav_L_1", "clav_R_0", "clav_R_1",
    "rib_L_0", "rib_L_1", "rib_L_2", "rib_L_3",
    "rib_R_0", "rib_R_1", "rib_R_2", "rib_R_3",
    "cervical", "lumbar",
)


class GeometryError(ValueError):
    """A crop box collapsed below the minimum extent."""


@dataclass(frozen=True)
class RoiGeometry:
    clavicle_margin: float = 0.25  # fraction of the clavicle bounding-box diagonal
    rib_side: float = 0.18  # fraction of image height
    spine_side: float = 0.15  # fraction of image height
    eps: float = 1e-6


@dataclass(frozen=True)
class RoiSpec:
    name: str
    landmarks: tuple[str, ...]
    box: tuple[float, float, float, float]  # x, y, w, h


@dataclass
class ModalityBatch:
    names: tuple[str, ...]
    data: np.ndarray  # (M, S, S) float32

    def __len__(self) -> int:
        return len(self.names)


def _clamp(name, x0, y0, x1, y1, width, height):
    x0, y0 = max(x0, -0.5), max(y0, -0.5)
    x1, y1 = min(x1, width - 0.5), min(y1, height - 0.5)
    if x1 - x0 < 2 or y1 - y0 < 2:
        raise GeometryError(f"ROI {name} degenerate after clamping: {x1 - x0:.2f}x{y1 - y0:.2f} px")
    return x0, y0, x1 - x0, y1 - y0


def roi_specs(lm: LandmarkSet, width: int, height: int,
              geometry: RoiGeometry = RoiGeometry()) -> list[RoiSpec]:
    """The 14 anatomical boxes in modality order (whole image excluded)."""
    specs = []
    for side, pts in (("L", lm.clavicle_left), ("R", lm.clavicle_right)):
        (x0, y0), (x1, y1) = pts.min(axis=0), pts.max(axis=0)
        m = geometry.clavicle_margin * float(np.hypot(x1 - x0, y1 - y0))
        bx, by, bw, bh = _clamp(f"clavicle_{side}", x0 - m, y0 - m, x1 + m, y1 + m, width, height)
        names = tuple(f"clavicle_{'left' if side == 'L' else 'right'}_{i}" for i in range(3))
        for k in range(2):
            specs.append(RoiSpec(f"clav_{side}_{k}", names, (bx + k * bw / 2, by, bw / 2, bh)))
    half = geometry.rib_side * height / 2
    for side, pts in (("L", lm.ribcage_left), ("R", lm.ribcage_right)):
        for k, (x, y) in enumerate(pts):
            name = f"rib_{side}_{k}"
            specs.append(RoiSpec(
                name, (f"ribcage_{'left' if side == 'L' else 'right'}_{k}",),
                _clamp(name, x - half, y - half, x + half, y + half, width, height)))
    half = geometry.spine_side * height / 2
    for name, lname, (x, y) in (("cervical", "c7", lm.c7), ("lumbar", "t12", lm.t12)):
        specs.append(RoiSpec(name, (lname,),
                             _clamp(name, x - half, y - half, x + half, y + half, width, height)))
    return specs


def resample(pixels: np.ndarray, boxes, size: int) -> np.ndarray:
    """Bilinear samples of each box on a ``size`` x ``size`` grid of cell centres."""
    rows, cols = [], []
    for x, y, w, h in boxes:
        c = (np.arange(size) + 0.5) / size
        ys = y + c * h
        xs = x + c * w
        rows.append(np.broadcast_to(ys[:, None], (size, size)))
        cols.append(np.broadcast_to(xs[None, :], (size, size)))
    coords = np.stack([np.stack(rows), np.stack(cols)])
    out = map_coordinates(pixels.astype(np.float64), coords, order=1, mode="nearest")
    return out.reshape(len(boxes), size, size)


def standardize(crops: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Per-crop z-score over the last two axes; constant crops map to zeros."""
    mu = crops.mean(axis=(-2, -1), keepdims=True)
    sd = crops.std(axis=(-2, -1), keepdims=True)
    # interpolation round-off on a flat crop is not texture
    flat = sd <= 1e-9 * np.maximum(1.0, np.abs(mu))
    return np.where(flat, 0.0, (crops - mu) / (sd + eps))


def _whole_box(img: Image2D):
    return (-0.5, -0.5, float(img.width), float(img.height))


def crop_rois(img: Image2D, lm: LandmarkSet, size: int = 64,
              geometry: RoiGeometry = RoiGeometry()) -> ModalityBatch:
    """Whole image plus the 14 anatomical crops, each resized and z-scored."""
    boxes = [_whole_box(img)] + [s.box for s in roi_specs(lm, img.width, img.height, geometry)]
    crops = standardize(resample(img.pixels, boxes, size), geometry.eps)
    return ModalityBatch(MODALITY_NAMES, crops.astype(np.float32))


def patch_edges(extent: int, n: int) -> list[int]:
    """Tile boundaries; the remainder of a non-divisible extent goes to the last tile."""
    base = extent // n
    return [i * base for i in range(n)] + [extent]


def split_patches(img: Image2D, n: int = 3, size: int = 64, eps: float = 1e-6) -> ModalityBatch:
    """``n * n`` non-overlapping tiles in row-major order, resized and z-scored."""
    if n < 1:
        raise GeometryError("patch dimension must be >= 1")
    xe, ye = patch_edges(img.width, n), patch_edges(img.height, n)
    if min(np.diff(xe)) < 2 or min(np.diff(ye)) < 2:
        raise GeometryError(f"{n}x{n} tiles of a {img.width}x{img.height} image are smaller than 2x2")
    boxes, names = [], []
    for r in range(n):
        for c in range(n):
            boxes.append((xe[c] - 0.5, ye[r] - 0.5, xe[c + 1] - xe[c], ye[r + 1] - ye[r]))
            names.append(f"patch_{r}_{c}")
    crops = standardize(resample(img.pixels, boxes, size), eps)
    return ModalityBatch(tuple(names), crops.astype(np.float32))


def whole_image(img: Image2D, size: int = 64, eps: float = 1e-6) -> ModalityBatch:
    crops = standardize(resample(img.pixels, [_whole_box(img)], size), eps)
    return ModalityBatch(("whole",), crops.astype(np.float32))


def make_modalities(img: Image2D, lm: LandmarkSet, layout: str, size: int = 64,
                    geometry: RoiGeometry = RoiGeometry(), patch_n: int = 3) -> ModalityBatch:
    """Inputs for a model layout: ``"whole"``, ``"roi"`` or ``"patch"``."""
    if layout == "roi":
        return crop_rois(img, lm, size, geometry)
    if layout == "patch":
        return split_patches(img, patch_n, size, geometry.eps)
    if layout == "whole":
        return whole_image(img, size, geometry.eps)
    raise ValueError(f"unknown modality layout {layout!r}")
