"""Synthetic document pages with exact layout ground truth.

Pages are white rasters carrying a handful of axis-aligned, non-overlapping
rectangular objects. Text and titles are rows of dark dashes, figures are
framed hatch or noise patches, tables are ruled grids with a dash per cell.
The glyph spacing is chosen so that a 5x5 erosion merges each object into a
single blob while the 8 px inter-object margin keeps objects apart.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin

from . import CLASS_NAMES
from .errors import PipelineIOError, RegionPackingFailed
from .seeding import stream

log = logging.getLogger(__name__)

INK_MAX = 96
OBJECT_MARGIN = 8
PAGE_MARGIN = 4
SPLITS = ("train", "val", "test")


@dataclass
class PageSpec:
    width_px: int = 256
    height_px: int = 256
    n_objects_range: tuple[int, int] = (2, 5)
    object_classes: tuple[str, ...] = CLASS_NAMES
    background_gray: int = 255
    seed: int = 0

    def __post_init__(self):
        self.n_objects_range = tuple(int(v) for v in self.n_objects_range)
        self.object_classes = tuple(self.object_classes)
        self.validate()

    def validate(self):
        if self.width_px < 64 or self.height_px < 64:
            raise ValueError("page must be at least 64x64 pixels")
        lo, hi = self.n_objects_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid n_objects_range {self.n_objects_range}")
        if not self.object_classes:
            raise ValueError("object_classes must not be empty")
        unknown = set(self.object_classes) - set(CLASS_NAMES)
        if unknown:
            raise ValueError(f"unknown object classes {sorted(unknown)}")
        if not INK_MAX < self.background_gray <= 255:
            raise ValueError(f"background_gray must be in ({INK_MAX}, 255]")


@dataclass
class LayoutObject:
    mask: np.ndarray  # bool H x W
    label: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 with x1/y1 exclusive

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.label]


@dataclass
class GroundTruth:
    objects: list[LayoutObject]

    def __len__(self):
        return len(self.objects)

    def label_map(self, shape=None) -> np.ndarray:
        """Per-pixel class map: 0 for background, ``label + 1`` inside objects."""
        if shape is None:
            shape = self.objects[0].mask.shape
        out = np.zeros(shape, dtype=np.int64)
        for obj in self.objects:
            out[obj.mask] = obj.label + 1
        return out


@dataclass
class ManifestRecord:
    image_path: Path
    split: str = "train"
    mask_path: Path | None = None
    annotation: GroundTruth | None = None


@dataclass
class CorpusManifest:
    records: list[ManifestRecord]
    root: Path
    config_hash: str | None = None
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]


def tight_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


# ---------------------------------------------------------------------------
# rendering

def _ink_color(rng) -> np.ndarray:
    if rng.random() < 0.5:
        return np.full(3, rng.integers(0, INK_MAX + 1), dtype=np.uint8)
    return rng.integers(0, INK_MAX + 1, size=3).astype(np.uint8)


def _dash_row(canvas, y0, y1, x0, x1, color, rng, dash=(2, 7), gap=(1, 2)):
    """Fill one text row with dashes separated by gaps of at most ``gap[1]`` px."""
    x = x0
    while x < x1:
        end = min(x + int(rng.integers(dash[0], dash[1] + 1)), x1)
        canvas[y0:y1, x:end] = color
        x = end + int(rng.integers(gap[0], gap[1] + 1))


def _row_layout(h, line, spacing):
    n_rows = max(1, (h + spacing) // (line + spacing))
    return [(r * (line + spacing), r * (line + spacing) + line) for r in range(n_rows)]


def _render_text(canvas, x0, y0, x1, y1, rng, line=3, spacing=2, dash=(2, 7)):
    color = _ink_color(rng)
    rows = _row_layout(y1 - y0, line, spacing)
    width = x1 - x0
    for i, (r0, r1) in enumerate(rows):
        end = x1
        if i == len(rows) - 1 and i > 0:
            end = x0 + max(dash[0], int(width * rng.uniform(0.4, 1.0)))
        _dash_row(canvas, y0 + r0, y0 + r1, x0, end, color, rng, dash=dash)
    return y0 + rows[-1][1]


def _render_title(canvas, x0, y0, x1, y1, rng):
    line = int(rng.integers(5, 8))
    return _render_text(canvas, x0, y0, x1, y1, rng, line=line, spacing=2, dash=(4, 11))


def _render_figure(canvas, x0, y0, x1, y1, rng):
    color = _ink_color(rng)
    canvas[y0, x0:x1] = color
    canvas[y1 - 1, x0:x1] = color
    canvas[y0:y1, x0] = color
    canvas[y0:y1, x1 - 1] = color
    h, w = y1 - y0 - 2, x1 - x0 - 2
    if h <= 0 or w <= 0:
        return y1
    inner = canvas[y0 + 1:y1 - 1, x0 + 1:x1 - 1]
    if rng.random() < 0.5:
        period = int(rng.integers(3, 5))
        yy, xx = np.mgrid[0:h, 0:w]
        direction = 1 if rng.random() < 0.5 else -1
        hatch = ((xx + direction * yy) % period) == 0
        inner[hatch] = color
    else:
        density = rng.uniform(0.35, 0.65)
        noise = rng.random((h, w)) < density
        shades = rng.integers(0, INK_MAX + 1, size=(h, w, 3)).astype(np.uint8)
        inner[noise] = shades[noise]
    return y1


def _render_table(canvas, x0, y0, x1, y1, rng):
    color = _ink_color(rng)
    h, w = y1 - y0, x1 - x0
    cell_h = int(rng.integers(8, 11))
    cell_w = int(rng.integers(14, 25))
    ys = list(range(0, h - 1, cell_h)) + [h - 1]
    xs = list(range(0, w - 1, cell_w)) + [w - 1]
    # drop grid lines that would leave a cell too thin to hold a dash
    ys = [v for v in ys[:-1] if ys[-1] - v >= 5] + [ys[-1]]
    xs = [v for v in xs[:-1] if xs[-1] - v >= 6] + [xs[-1]]
    for yy in ys:
        canvas[y0 + yy, x0:x1] = color
    for xx in xs:
        canvas[y0:y1, x0 + xx] = color
    for r0, r1 in zip(ys[:-1], ys[1:]):
        mid = (r0 + r1) // 2
        for c0, c1 in zip(xs[:-1], xs[1:]):
            if c1 - c0 < 6:
                continue
            canvas[y0 + mid - 1:y0 + mid + 1, x0 + c0 + 3:x0 + c1 - 2] = color
    return y1


_RENDERERS = {
    "TEXT_BLOCK": _render_text,
    "TITLE": _render_title,
    "FIGURE": _render_figure,
    "TABLE": _render_table,
}


def _sample_size(label, spec, rng):
    W, H = spec.width_px, spec.height_px
    if label == "TITLE":
        w = rng.integers(max(24, W // 4), max(25, int(W * 0.7)) + 1)
        h = rng.integers(7, 18)
    elif label == "TEXT_BLOCK":
        w = rng.integers(max(20, W // 5), max(21, int(W * 0.6)) + 1)
        h = rng.integers(13, max(14, int(H * 0.4)) + 1)
    elif label == "FIGURE":
        w = rng.integers(max(16, W // 6), max(17, int(W * 0.5)) + 1)
        h = rng.integers(max(16, H // 6), max(17, int(H * 0.45)) + 1)
    else:
        w = rng.integers(max(30, W // 4), max(31, int(W * 0.6)) + 1)
        h = rng.integers(max(20, H // 6), max(21, int(H * 0.45)) + 1)
    return int(min(w, W - 2 * PAGE_MARGIN)), int(min(h, H - 2 * PAGE_MARGIN))


def _overlaps(box, placed):
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in placed:
        if (x0 < a1 + OBJECT_MARGIN and a0 < x1 + OBJECT_MARGIN
                and y0 < b1 + OBJECT_MARGIN and b0 < y1 + OBJECT_MARGIN):
            return True
    return False


def _place(spec, labels, rng, attempts=200):
    placed = []
    for label in labels:
        for _ in range(attempts):
            w, h = _sample_size(label, spec, rng)
            x0 = int(rng.integers(PAGE_MARGIN, spec.width_px - PAGE_MARGIN - w + 1))
            y0 = int(rng.integers(PAGE_MARGIN, spec.height_px - PAGE_MARGIN - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if not _overlaps(box, placed):
                placed.append(box)
                break
        else:
            return None
    return placed


def generate_document(spec: PageSpec, rng: np.random.Generator,
                      max_restarts: int = 20) -> tuple[np.ndarray, GroundTruth]:
    """Render one page. Returns an ``H x W x 3`` uint8 image and its ground truth."""
    spec.validate()
    lo, hi = spec.n_objects_range
    n = int(rng.integers(lo, hi + 1))
    for _ in range(max_restarts):
        labels = [spec.object_classes[i] for i in rng.integers(0, len(spec.object_classes), size=n)]
        boxes = _place(spec, labels, rng)
        if boxes is not None:
            break
    else:
        raise RegionPackingFailed(
            f"could not place {n} objects on a {spec.width_px}x{spec.height_px} page")

    canvas = np.full((spec.height_px, spec.width_px, 3), spec.background_gray, dtype=np.uint8)
    objects = []
    for label, (x0, y0, x1, y1) in zip(labels, boxes):
        _RENDERERS[label](canvas, x0, y0, x1, y1, rng)
        ink = (canvas[y0:y1, x0:x1] < 128).any(axis=2)
        mask = np.zeros((spec.height_px, spec.width_px), dtype=bool)
        # the object region is the tight box around what was actually drawn
        rows = np.flatnonzero(ink.any(axis=1))
        cols = np.flatnonzero(ink.any(axis=0))
        mask[y0 + rows[0]:y0 + rows[-1] + 1, x0 + cols[0]:x0 + cols[-1] + 1] = True
        objects.append(LayoutObject(mask=mask, label=CLASS_NAMES.index(label),
                                    bbox=tight_bbox(mask)))
    return canvas, GroundTruth(objects)


# ---------------------------------------------------------------------------
# corpus IO

def _png_info(config_hash):
    info = PngImagePlugin.PngInfo()
    if config_hash:
        info.add_text("config_hash", config_hash)
    return info


def save_png(path, array, config_hash=None):
    try:
        Image.fromarray(array).save(path, pnginfo=_png_info(config_hash))
    except OSError as exc:
        raise PipelineIOError(f"cannot write image ({exc.strerror or exc})", path) from exc


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise PipelineIOError("cannot read image", path) from exc


def load_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L")) > 127
    except OSError as exc:
        raise PipelineIOError("cannot read mask", path) from exc


def split_for_index(i, count, fractions=(0.8, 0.1, 0.1)):
    n_train = int(round(fractions[0] * count))
    n_val = int(round(fractions[1] * count))
    if count == 1 or i < max(1, n_train):
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def _write_page(args):
    spec, i, out_dir, config_hash = args
    image, gt = generate_document(spec, stream(spec.seed, f"docgen:{i}"))
    image_path = out_dir / "images" / f"doc_{i:06}.png"
    save_png(image_path, image, config_hash)
    for k, obj in enumerate(gt.objects):
        save_png(out_dir / "objects" / f"doc_{i:06}_obj{k:02}.png",
                 obj.mask.astype(np.uint8) * 255, config_hash)
    return image_path, gt


def generate_corpus(spec: PageSpec, count: int, out_dir, config_hash=None,
                    split_fractions=(0.8, 0.1, 0.1), workers: int = 1) -> CorpusManifest:
    """Write ``count`` pages plus annotations into ``out_dir``.

    Page ``i`` is drawn from the stream ``docgen:i`` of ``spec.seed`` so pages are
    independent of each other and of generation order; ``workers > 1`` renders
    pages in a process pool without changing any output byte.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "objects").mkdir(exist_ok=True)
    except OSError as exc:
        raise PipelineIOError("cannot create corpus directory", out_dir) from exc

    jobs = [(spec, i, out_dir, config_hash) for i in range(count)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pages = list(pool.map(_write_page, jobs, chunksize=8))
    else:
        pages = [_write_page(job) for job in jobs]
    records = [ManifestRecord(image_path=path, split=split_for_index(i, count, split_fractions),
                              annotation=gt) for i, (path, gt) in enumerate(pages)]
    manifest = CorpusManifest(records=records, root=out_dir, config_hash=config_hash,
                              meta={"page_spec": _spec_dict(spec), "count": count,
                                    "split_fractions": list(split_fractions)})
    write_manifest(manifest, out_dir)
    return manifest


def _spec_dict(spec):
    return {
        "width_px": spec.width_px, "height_px": spec.height_px,
        "n_objects_range": list(spec.n_objects_range),
        "object_classes": list(spec.object_classes),
        "background_gray": spec.background_gray, "seed": spec.seed,
    }


def _rel(path, root):
    return Path(os.path.relpath(Path(path), root)).as_posix()


def write_manifest(manifest: CorpusManifest, out_dir) -> Path:
    """Write ``manifest.json`` and the ``annotations.json`` sidecar into ``out_dir``.

    Paths are stored relative to ``out_dir`` so a corpus can be moved as a unit.
    """
    out_dir = Path(out_dir)
    rows, ann_rows = [], []
    for i, rec in enumerate(manifest.records):
        row = {"image_path": _rel(rec.image_path, out_dir), "split": rec.split}
        if rec.mask_path is not None:
            row["mask_path"] = _rel(rec.mask_path, out_dir)
        if rec.annotation is not None:
            stem = Path(rec.image_path).stem
            objs = []
            for k, obj in enumerate(rec.annotation.objects):
                mask_file = Path(manifest.root) / "objects" / f"{stem}_obj{k:02}.png"
                objs.append({"bbox": list(obj.bbox), "label": obj.label_name,
                             "mask_path": _rel(mask_file, out_dir)})
            ann_rows.append({"image_path": row["image_path"], "objects": objs})
            row["annotated"] = True
        rows.append(row)
    payload = {"config_hash": manifest.config_hash, "meta": manifest.meta, "records": rows}
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        _dump_json(out_dir / "manifest.json", payload)
        if ann_rows:
            _dump_json(out_dir / "annotations.json",
                       {"config_hash": manifest.config_hash, "records": ann_rows})
    except OSError as exc:
        raise PipelineIOError("cannot write manifest", out_dir) from exc
    return out_dir / "manifest.json"


def _dump_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path, load_annotations=True) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise PipelineIOError("cannot read manifest", path) from exc
    root = path.parent

    annotations = {}
    ann_file = root / "annotations.json"
    if load_annotations and ann_file.exists():
        with open(ann_file) as fh:
            for row in json.load(fh)["records"]:
                annotations[row["image_path"]] = row["objects"]

    records = []
    for row in payload["records"]:
        image_path = root / row["image_path"]
        if not image_path.exists():
            raise PipelineIOError("manifest image missing", image_path)
        mask_path = root / row["mask_path"] if row.get("mask_path") else None
        if mask_path is not None and not mask_path.exists():
            raise PipelineIOError("manifest mask missing", mask_path)
        gt = None
        if row["image_path"] in annotations:
            objs = []
            for obj in annotations[row["image_path"]]:
                mask = load_mask(root / obj["mask_path"])
                objs.append(LayoutObject(mask=mask, label=CLASS_NAMES.index(obj["label"]),
                                         bbox=tuple(obj["bbox"])))
            gt = GroundTruth(objs)
        records.append(ManifestRecord(image_path=image_path, split=row.get("split", "train"),
                                      mask_path=mask_path, annotation=gt))
    return CorpusManifest(records=records, root=root, config_hash=payload.get("config_hash"),
                          meta=payload.get("meta", {}))
