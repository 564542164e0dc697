"""Frozen-encoder probes, segmentation metrics and ablation harnesses.

The downstream task is dense layout segmentation: a 1x1 convolution on top
of frozen encoder features predicts a foreground logit and class logits per
feature cell. Predictions are upsampled to pixels (nearest cell) and split
into instances by connected components so that AP can be computed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from scipy import ndimage

from . import CLASS_NAMES
from .docgen import CorpusManifest, GroundTruth, ManifestRecord, load_image
from .errors import EmptySplit, MissingCheckpoint, PipelineIOError, ShapeError
from .maskgen import EIGHT_CONNECTED
from .model import SelfDocSegModel, image_to_tensor, load_checkpoint, load_model, save_checkpoint
from .seeding import derive_seed, stream

log = logging.getLogger(__name__)

N_CLASSES = len(CLASS_NAMES)


@dataclass
class EvalConfig:
    prob_threshold: float = 0.5
    min_area: int = 16
    iou_thresh: float = 0.5
    fractions: tuple[float, ...] = (0.1, 0.5, 1.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    probe_steps: int = 300
    probe_lr: float = 0.05

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not 0 < self.prob_threshold < 1:
            raise ValueError("prob_threshold must be in (0, 1)")
        if not 0 < self.iou_thresh <= 1:
            raise ValueError("iou_thresh must be in (0, 1]")
        if any(not 0 < f <= 1 for f in self.fractions):
            raise ValueError("fractions must lie in (0, 1]")
        if not self.seeds:
            raise ValueError("need at least one seed")


@dataclass
class Detection:
    mask: np.ndarray
    score: float
    label: int
    det_id: int = 0

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("a detection needs a non-empty mask")

    def bbox(self):
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


@dataclass
class EvalReport:
    pixel_iou: float
    pixel_f1: float
    ap_at_50: float
    per_class: dict
    config: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# metrics

def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def _match_image(dets, gt_masks, iou_thresh):
    """Greedy matching of score-ordered detections to ground truth masks.

    Each detection takes the unmatched ground truth with the highest IoU at or
    above ``iou_thresh``; exact ties go to the lower ground-truth index.
    Returns a list of booleans (true positive) aligned with ``dets``.
    """
    matched = [False] * len(gt_masks)
    flags = []
    for det in dets:
        best, best_j = -1.0, -1
        for j, g in enumerate(gt_masks):
            if matched[j]:
                continue
            v = iou(det.mask, g)
            if v >= iou_thresh and v > best:
                best, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
        flags.append(best_j >= 0)
    return flags


def _ap_from_flags(scored_flags, n_gt) -> Fraction:
    """All-point interpolated AP from ``(score, det_id, is_tp)`` triples.

    Precision and recall are rationals; exact arithmetic keeps the result
    independent of summation order.
    """
    scored_flags = sorted(scored_flags, key=lambda t: (-t[0], t[1]))
    tp = fp = 0
    precisions, is_tp = [], []
    for _, _, flag in scored_flags:
        if flag:
            tp += 1
        else:
            fp += 1
        precisions.append(Fraction(tp, tp + fp))
        is_tp.append(flag)
    # running max from the right gives the interpolated precision envelope
    envelope = precisions[:]
    for i in range(len(envelope) - 2, -1, -1):
        envelope[i] = max(envelope[i], envelope[i + 1])
    return sum((prec for prec, flag in zip(envelope, is_tp) if flag), Fraction(0)) / n_gt


def class_ap(images, label, iou_thresh=0.5):
    """AP for one class over ``[(detections, ground_truth), ...]`` as a Fraction.

    Returns None when the class has neither detections nor ground truth.
    """
    scored, n_gt = [], 0
    for img_idx, (dets, gt) in enumerate(images):
        cls_dets = sorted((d for d in dets if d.label == label), key=lambda d: (-d.score, d.det_id))
        gt_masks = [o.mask for o in gt.objects if o.label == label]
        n_gt += len(gt_masks)
        flags = _match_image(cls_dets, gt_masks, iou_thresh)
        scored += [(d.score, (img_idx, d.det_id), f) for d, f in zip(cls_dets, flags)]
    if n_gt == 0:
        if not scored:
            return None
        log.info("class %s: detections without ground truth, AP = 0", CLASS_NAMES[label])
        return Fraction(0)
    if not scored:
        return Fraction(0)
    return _ap_from_flags(scored, n_gt)


def mean_ap(images, iou_thresh=0.5) -> tuple[float, dict]:
    """mAP over classes present in detections or ground truth, plus per-class AP."""
    exact = {}
    for label in range(N_CLASSES):
        ap = class_ap(images, label, iou_thresh)
        if ap is not None:
            exact[CLASS_NAMES[label]] = ap
    if not exact:
        log.info("no ground truth and no detections: AP defined as 1.0")
        return 1.0, {}
    per_class = {name: float(v) for name, v in exact.items()}
    return float(sum(exact.values()) / len(exact)), per_class


def compute_ap(dets: list[Detection], gts: GroundTruth, iou_thresh: float = 0.5) -> float:
    """Single-image mAP."""
    if not 0 < iou_thresh <= 1:
        raise ValueError("iou_thresh must be in (0, 1]")
    return mean_ap([(dets, gts)], iou_thresh)[0]


# ---------------------------------------------------------------------------
# probe

class ProbeHead(torch.nn.Module):
    """Per-channel feature standardization followed by a 1x1 convolution.

    Output channel 0 is the foreground logit, channels 1.. are class logits.
    """

    def __init__(self, in_channels, n_classes=N_CLASSES):
        super().__init__()
        self.register_buffer("feat_mean", torch.zeros(in_channels))
        self.register_buffer("feat_std", torch.ones(in_channels))
        self.conv = torch.nn.Conv2d(in_channels, 1 + n_classes, 1)
        self.log: list[float] = []

    def forward(self, f):
        f = (f - self.feat_mean[:, None, None]) / self.feat_std[:, None, None]
        return self.conv(f)

    def probabilities(self, f):
        out = self(f)
        return torch.sigmoid(out[:, 0]), torch.softmax(out[:, 1:], dim=1)


@torch.no_grad()
def encode_images(model: SelfDocSegModel, images, batch_size=16) -> torch.Tensor:
    feats = []
    for i in range(0, len(images), batch_size):
        feats.append(model.encode(image_to_tensor(images[i:i + batch_size])))
    return torch.cat(feats)


def cell_targets(gt: GroundTruth, hw) -> tuple[np.ndarray, np.ndarray]:
    """Foreground target (majority coverage) and majority class per feature cell."""
    labels = gt.label_map()
    H, W = labels.shape
    h, w = hw
    cells = labels.reshape(h, H // h, w, W // w).transpose(0, 2, 1, 3).reshape(h, w, -1)
    counts = np.stack([(cells == c).sum(axis=-1) for c in range(N_CLASSES + 1)], axis=-1)
    fg = counts[..., 1:].sum(axis=-1) * 2 >= cells.shape[-1]
    cls = counts[..., 1:].argmax(axis=-1)
    return fg, cls


def _labeled_records(manifest_or_records, split="train"):
    if isinstance(manifest_or_records, CorpusManifest):
        records = manifest_or_records.split(split)
    else:
        records = list(manifest_or_records)
    return [r for r in records if r.annotation is not None]


def train_probe(model: SelfDocSegModel, labeled, fraction: float = 1.0, seed: int = 0,
                steps: int = 300, lr: float = 0.05) -> ProbeHead:
    """Fit a probe on frozen features of the first ``ceil(fraction * N)`` shuffled records."""
    records = _labeled_records(labeled)
    if not records:
        raise EmptySplit("no labeled training records")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    order = stream(seed, "probe:subset").permutation(len(records))
    chosen = [records[i] for i in order[:math.ceil(fraction * len(records))]]

    images = [load_image(r.image_path) for r in chosen]
    feats = encode_images(model, images).to(torch.float32)
    hw = tuple(feats.shape[-2:])
    fg_t, cls_t = zip(*(cell_targets(r.annotation, hw) for r in chosen))
    fg_t = torch.from_numpy(np.stack(fg_t)).float()
    cls_t = torch.from_numpy(np.stack(cls_t)).long()

    torch.manual_seed(derive_seed(seed, "probe:init") % 2 ** 63)
    head = ProbeHead(feats.shape[1])
    head.feat_mean.copy_(feats.mean(dim=(0, 2, 3)))
    head.feat_std.copy_(feats.std(dim=(0, 2, 3), unbiased=False).clamp_min(1e-6))
    opt = torch.optim.Adam(head.conv.parameters(), lr=lr)
    fg_cells = fg_t.bool()
    for _ in range(steps):
        out = head(feats)
        loss = F.binary_cross_entropy_with_logits(out[:, 0], fg_t)
        if fg_cells.any():
            cls_logits = out[:, 1:].permute(0, 2, 3, 1)[fg_cells]
            loss = loss + F.cross_entropy(cls_logits, cls_t[fg_cells])
        opt.zero_grad()
        loss.backward()
        opt.step()
        head.log.append(loss.item())
    head.n_records = len(chosen)
    head.fraction = fraction
    return head


def save_probe(path, head: ProbeHead, meta=None):
    meta = dict(meta or {})
    meta.update(kind="probe", in_channels=head.conv.in_channels,
                n_classes=head.conv.out_channels - 1, train_log=head.log)
    return save_checkpoint(path, {f"probe/{k}": v for k, v in head.state_dict().items()}, meta)


def load_probe(path) -> ProbeHead:
    tensors, manifest = load_checkpoint(path)
    if manifest.get("kind") != "probe":
        raise MissingCheckpoint(f"{path} is not a probe checkpoint")
    head = ProbeHead(manifest["in_channels"], manifest["n_classes"])
    head.load_state_dict({k[len("probe/"):]: v for k, v in tensors.items()})
    head.log = manifest.get("train_log", [])
    return head


# ---------------------------------------------------------------------------
# inference

def _upsample(cell_map, shape):
    H, W = shape
    h, w = cell_map.shape[:2]
    return np.repeat(np.repeat(cell_map, H // h, axis=0), W // w, axis=1)


def instances_from_probability(fg_prob, class_prob, prob_threshold=0.5, min_area=16):
    """Turn pixel-level probability maps into scored instance detections.

    ``fg_prob`` is ``H x W``, ``class_prob`` is ``C x H x W`` (may be None).
    """
    fg_prob = np.asarray(fg_prob, dtype=np.float64)
    labels, n = ndimage.label(fg_prob > prob_threshold, structure=EIGHT_CONNECTED)
    dets = []
    for lab in range(1, n + 1):
        comp = labels == lab
        if comp.sum() < min_area:
            continue
        label = 0
        if class_prob is not None:
            label = int(np.asarray(class_prob)[:, comp].mean(axis=1).argmax())
        dets.append(Detection(mask=comp, score=float(fg_prob[comp].mean()), label=label,
                              det_id=len(dets)))
    return dets


@torch.no_grad()
def predict_maps(image, model: SelfDocSegModel, head: ProbeHead):
    """Pixel-resolution foreground probability and class probabilities."""
    f = model.encode(image_to_tensor(image))
    fg, cls = head.probabilities(f.to(torch.float32))
    shape = np.asarray(image).shape[:2]
    fg = _upsample(fg[0].numpy().astype(np.float64), shape)
    cls = np.stack([_upsample(c, shape) for c in cls[0].numpy().astype(np.float64)])
    return fg, cls


def segment(image, model: SelfDocSegModel, head: ProbeHead, prob_threshold=0.5, min_area=16):
    fg, cls = predict_maps(image, model, head)
    return instances_from_probability(fg, cls, prob_threshold, min_area)


def evaluate(model: SelfDocSegModel, head: ProbeHead, records, cfg: EvalConfig = None,
             config_echo=None) -> EvalReport:
    """Pixel IoU (mean over classes), foreground F1 and AP@iou_thresh on ``records``."""
    cfg = cfg or EvalConfig()
    records = _labeled_records(records, split="test")
    if not records:
        raise EmptySplit("no labeled evaluation records")
    inter = np.zeros(N_CLASSES)
    union = np.zeros(N_CLASSES)
    tp = fp = fn = 0
    pairs = []
    for rec in records:
        image = load_image(rec.image_path)
        fg, cls = predict_maps(image, model, head)
        truth = rec.annotation.label_map(fg.shape)
        pred = np.where(fg > cfg.prob_threshold, cls.argmax(axis=0) + 1, 0)
        for c in range(N_CLASSES):
            inter[c] += np.logical_and(pred == c + 1, truth == c + 1).sum()
            union[c] += np.logical_or(pred == c + 1, truth == c + 1).sum()
        tp += np.logical_and(pred > 0, truth > 0).sum()
        fp += np.logical_and(pred > 0, truth == 0).sum()
        fn += np.logical_and(pred == 0, truth > 0).sum()
        pairs.append((instances_from_probability(fg, cls, cfg.prob_threshold, cfg.min_area),
                      rec.annotation))
    present = union > 0
    class_iou = np.where(present, inter / np.maximum(union, 1), 0.0)
    pixel_iou = float(class_iou[present].mean()) if present.any() else 0.0
    f1 = float(2 * tp / (2 * tp + fp + fn)) if tp + fp + fn else 1.0
    ap, per_class_ap = mean_ap(pairs, cfg.iou_thresh)
    per_class = {name: {"iou": float(class_iou[c]), "ap": per_class_ap.get(name)}
                 for c, name in enumerate(CLASS_NAMES) if present[c] or name in per_class_ap}
    return EvalReport(pixel_iou=pixel_iou, pixel_f1=f1, ap_at_50=ap, per_class=per_class,
                      config=config_echo or asdict(cfg), seeds=[])


# ---------------------------------------------------------------------------
# ablations

METRICS = ("pixel_iou", "pixel_f1", "ap_at_50")


@dataclass
class ArmResult:
    name: str
    reports: list[EvalReport]
    seeds: list[int]

    def mean(self, metric):
        return float(np.mean([getattr(r, metric) for r in self.reports]))

    def sd(self, metric):
        return float(np.std([getattr(r, metric) for r in self.reports]))

    def summary(self):
        return EvalReport(pixel_iou=self.mean("pixel_iou"), pixel_f1=self.mean("pixel_f1"),
                          ap_at_50=self.mean("ap_at_50"),
                          per_class={m: {"mean": self.mean(m), "sd": self.sd(m)} for m in METRICS},
                          config=self.reports[0].config if self.reports else {},
                          seeds=list(self.seeds))


@dataclass
class AblationReport:
    mode: str
    arms: list[ArmResult]
    config: dict = field(default_factory=dict)

    def arm(self, name) -> ArmResult:
        return next(a for a in self.arms if a.name == name)

    def to_dict(self):
        return {
            "mode": self.mode,
            "config": self.config,
            "rows": [{"arm": a.name, "seeds": a.seeds,
                      **{f"{m}_mean": a.mean(m) for m in METRICS},
                      **{f"{m}_sd": a.sd(m) for m in METRICS},
                      "per_seed": [r.to_dict() for r in a.reports]} for a in self.arms],
        }

    def to_text(self):
        header = f"{'arm':<16}" + "".join(f"{m:>22}" for m in METRICS)
        lines = [f"ablation: {self.mode}", header, "-" * len(header)]
        for a in self.arms:
            cells = "".join(f"{a.mean(m):>14.4f} ± {a.sd(m):<5.3f}" for m in METRICS)
            lines.append(f"{a.name:<16}{cells}")
        return "\n".join(lines) + "\n"


def ablation_harness(mode: str, checkpoints: dict, labeled: CorpusManifest,
                     cfg: EvalConfig = None) -> AblationReport:
    """Probe every arm over all seeds and collect mean/sd metrics.

    ``checkpoints`` maps arm name to one checkpoint path per seed (a single
    path is reused for every seed). For ``semi_supervised`` the first arm's
    checkpoints are probed at each fraction in ``cfg.fractions``; for
    ``loss_ablation`` every arm is probed with all labels.
    """
    cfg = cfg or EvalConfig()
    if mode not in ("semi_supervised", "loss_ablation"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    resolved = {}
    for arm, paths in checkpoints.items():
        if isinstance(paths, (str, Path)):
            paths = [paths] * len(cfg.seeds)
        for p in paths:
            if not (Path(p) / "manifest.json").exists():
                raise MissingCheckpoint(f"arm {arm!r}: no checkpoint at {p}")
        resolved[arm] = list(paths)
    if not resolved:
        raise MissingCheckpoint("no checkpoints given")

    train_records = manifest_split(labeled, "train")
    test_records = manifest_split(labeled, "test")
    runs = []
    if mode == "semi_supervised":
        base = next(iter(resolved))
        runs = [(f"{int(round(frac * 100))}%", resolved[base], frac) for frac in cfg.fractions]
    else:
        runs = [(arm, paths, 1.0) for arm, paths in resolved.items()]

    arms = []
    for name, paths, frac in runs:
        reports = []
        for seed, path in zip(cfg.seeds, paths):
            model, _, _ = load_model(path)
            head = train_probe(model, train_records, frac, seed, cfg.probe_steps, cfg.probe_lr)
            rep = evaluate(model, head, test_records, cfg)
            rep.seeds = [seed]
            reports.append(rep)
        arms.append(ArmResult(name=name, reports=reports, seeds=list(cfg.seeds)))
    return AblationReport(mode=mode, arms=arms, config=asdict(cfg))


def manifest_split(manifest: CorpusManifest, name) -> list[ManifestRecord]:
    records = [r for r in manifest.split(name) if r.annotation is not None]
    if not records:
        raise EmptySplit(f"split {name!r} has no labeled records")
    return records


def write_report(report, out_dir, stem="report"):
    """Write JSON and plain-text renderings of an EvalReport or AblationReport."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.json", "w") as fh:
            json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        with open(out_dir / f"{stem}.txt", "w") as fh:
            fh.write(report.to_text() if hasattr(report, "to_text") else eval_report_text(report))
    except OSError as exc:
        raise PipelineIOError("cannot write report", out_dir) from exc
    return out_dir / f"{stem}.json"


def eval_report_text(rep: EvalReport) -> str:
    lines = [f"pixel_iou  {rep.pixel_iou:.4f}", f"pixel_f1   {rep.pixel_f1:.4f}",
             f"ap@50      {rep.ap_at_50:.4f}", "", f"{'class':<12}{'iou':>8}{'ap':>8}"]
    for name, row in rep.per_class.items():
        ap = "-" if row.get("ap") is None else f"{row['ap']:.4f}"
        lines.append(f"{name:<12}{row['iou']:>8.4f}{ap:>8}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# visualization

PALETTE = np.array([
    [31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14],
    [148, 103, 189], [140, 86, 75], [227, 119, 194], [23, 190, 207],
], dtype=np.float64)


def class_color(label: int) -> np.ndarray:
    return PALETTE[int(label) % len(PALETTE)]


def render_overlay(image, items, alpha=0.4, labels=True) -> np.ndarray:
    """Tint each mask with its class colour, outline its box, and print the label inside it.

    ``items`` holds Detections or ``(mask, label)`` pairs. Nothing is drawn
    outside the union of the masks' bounding boxes.
    """
    out = np.asarray(image).astype(np.float64).copy()
    for item in items:
        mask, label = (item.mask, item.label) if isinstance(item, Detection) else item
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            continue
        color = class_color(label)
        out[mask] = (1 - alpha) * out[mask] + alpha * color
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        y0, y1, x0, x1 = rows[0], rows[-1], cols[0], cols[-1]
        out[y0, x0:x1 + 1] = color
        out[y1, x0:x1 + 1] = color
        out[y0:y1 + 1, x0] = color
        out[y0:y1 + 1, x1] = color
        if labels and y1 - y0 > 12 and x1 - x0 > 12:
            text = Image.new("L", (int(x1 - x0 - 1), int(y1 - y0 - 1)), 0)
            ImageDraw.Draw(text).text((1, 0), CLASS_NAMES[label % N_CLASSES], fill=255)
            glyph = np.asarray(text) > 0
            region = out[y0 + 1:y1, x0 + 1:x1]
            region[glyph] = color * 0.5
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


def visualize(image, items, out_path, **kwargs) -> Path:
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(render_overlay(image, items, **kwargs)).save(out_path)
    except OSError as exc:
        raise PipelineIOError("cannot write visualization", out_path) from exc
    return out_path
