"""Pseudo physical-layout masks from raw page images.

grayscale -> global threshold -> erosion -> inversion, then connected
components of the result give one region mask per layout object.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import NoComponents, PipelineIOError, ShapeError, Vanished

log = logging.getLogger(__name__)

LUMA = np.array([0.2126, 0.7152, 0.0722])
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskGenParams:
    threshold: int = 239
    kernel: tuple[int, int] = (5, 5)
    min_component_area_px: int = 16

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        if not 0 < self.threshold < 255:
            raise ValueError(f"threshold must be in (0, 255), got {self.threshold}")
        kh, kw = self.kernel
        if kh < 1 or kw < 1 or kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel dims must be odd and >= 1, got {self.kernel}")
        if self.min_component_area_px < 0:
            raise ValueError("min_component_area_px must be >= 0")


@dataclass
class ObjectMaskSet:
    """Per-object binary masks, stacked as an ``n x H x W`` bool array."""

    masks: np.ndarray
    filtered_area: int = 0

    def __len__(self):
        return len(self.masks)

    @property
    def areas(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).sum(axis=1)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Rec.709 luma of an 8-bit RGB image, rounded half up."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected H x W x 3 RGB image, got shape {img.shape}")
    gray = np.floor(img.astype(np.float64) @ LUMA + 0.5)
    return np.clip(gray, 0, 255).astype(np.uint8)


def binarize(gray: np.ndarray, threshold: int = 239) -> np.ndarray:
    """0 where ``gray <= threshold`` (ink), 1 elsewhere (paper)."""
    if not 0 < threshold < 255:
        raise ValueError(f"threshold must be in (0, 255), got {threshold}")
    return (np.asarray(gray) > threshold).astype(np.uint8)


def erode(binary: np.ndarray, kernel=(5, 5)) -> np.ndarray:
    """Min filter over a centered rectangle; outside the page counts as paper."""
    kh, kw = kernel
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel dims must be odd, got {kernel}")
    return ndimage.minimum_filter(np.asarray(binary, dtype=np.uint8), size=(kh, kw),
                                  mode="constant", cval=1)


def invert(binary: np.ndarray) -> np.ndarray:
    return (1 - np.asarray(binary, dtype=np.uint8)).astype(np.uint8)


def generate_layout_mask(img: np.ndarray, params: MaskGenParams = MaskGenParams()) -> np.ndarray:
    """Binary ``H x W`` uint8 mask, 1 on layout-object regions."""
    return invert(erode(binarize(to_grayscale(img), params.threshold), params.kernel))


def extract_object_masks(m: np.ndarray, min_area: int = 16) -> ObjectMaskSet:
    """Split a layout mask into 8-connected components of at least ``min_area`` px.

    Components come back ordered by their first pixel in row-major order.
    Raises NoComponents when nothing survives the area filter.
    """
    m = np.asarray(m).astype(bool)
    labels, n = ndimage.label(m, structure=EIGHT_CONNECTED)
    if n == 0:
        raise NoComponents("layout mask is empty")
    flat = labels.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    # first occurrence of each label in raster order
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable") + 1
    keep = [lab for lab in order if areas[lab - 1] >= min_area]
    filtered = int(sum(areas[lab - 1] for lab in order if areas[lab - 1] < min_area))
    if not keep:
        raise NoComponents(f"all {n} components are smaller than {min_area} px")
    masks = np.stack([labels == lab for lab in keep])
    return ObjectMaskSet(masks=masks, filtered_area=filtered)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Any-overlap reduction of an ``H x W`` mask onto an ``h x w`` grid.

    A target cell is set when any source pixel inside it is set. Raises
    Vanished if the result is empty.
    """
    mask = np.asarray(mask).astype(bool)
    H, W = mask.shape
    h, w = target
    if h > H or w > W or H % h or W % w:
        raise ShapeError(f"cannot reduce {H}x{W} onto {h}x{w}; pad the image first")
    out = mask.reshape(h, H // h, w, W // w).any(axis=(1, 3))
    if not out.any():
        raise Vanished("mask is empty at the target resolution")
    return out


def downsample_object_masks(objects: ObjectMaskSet, target) -> tuple[np.ndarray, list[int], int]:
    """Reduce every object mask to ``target``.

    Returns ``(masks, kept_indices, n_vanished)``; vanished components are dropped.
    """
    kept, out = [], []
    for k, mk in enumerate(objects.masks):
        try:
            out.append(downsample_mask(mk, target))
            kept.append(k)
        except Vanished:
            log.info("component %d vanished at %s", k, target)
    if out:
        stacked = np.stack(out)
    else:
        stacked = np.zeros((0, *target), dtype=bool)
    return stacked, kept, len(objects) - len(kept)


def _write_mask(args):
    from .docgen import load_image, save_png

    path, output_dir, params, config_hash = args
    m = generate_layout_mask(load_image(path), params)
    out = output_dir / f"{path.stem}_mask.png"
    save_png(out, (m * 255).astype(np.uint8), config_hash)
    return out


def make_masks(inputs, output_dir, params: MaskGenParams = MaskGenParams(), config_hash=None,
               workers: int = 1):
    """Write a {0,255} PNG layout mask for every input image. Returns output paths in input order."""
    output_dir = Path(output_dir)
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PipelineIOError("cannot create mask directory", output_dir) from exc
    jobs = [(Path(p), output_dir, params, config_hash) for p in inputs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_write_mask, jobs, chunksize=8))
    return [_write_mask(job) for job in jobs]
