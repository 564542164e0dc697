"""Pre-training: similarity and focal objectives, LARS, cosine schedule, EMA.

The total objective is the plain sum of a BYOL-style cosine loss over
mask-pooled object embeddings and a focal loss on the layout head's
prediction of the pseudo layout mask.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch.optim import Optimizer

from .augment import AugmentConfig, make_view_pair
from .docgen import CorpusManifest, load_image, load_mask
from .errors import BatchMismatch, ConfigError, EmptyMaskNormalizer, NoComponents
from .maskgen import (MaskGenParams, ObjectMaskSet, downsample_mask,
                      downsample_object_masks, extract_object_masks, generate_layout_mask)
from .model import ModelConfig, SelfDocSegModel, image_to_tensor, load_model, mask_pool, save_model
from .seeding import derive_seed, rng_from_state, rng_state, stream

log = logging.getLogger(__name__)

COS_EPS = 1e-12
METRIC_FIELDS = ("step", "epoch", "lr", "l_sim", "l_det", "l_total", "n_vanished")
OBJECTIVES = ("sim", "det")


@dataclass
class TrainConfig:
    lr_init: float = 0.2
    weight_decay: float = 0.0005
    epochs: int = 50
    max_steps: int | None = None
    tau: float = 0.99
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    focal_variant: str = "paper"
    optimizer: str = "lars"
    lars_trust_coeff: float = 0.001
    momentum: float = 0.9
    batch_size: int = 8
    objectives: tuple[str, ...] = OBJECTIVES
    checkpoint_every: int = 10
    seed: int = 0

    def __post_init__(self):
        self.objectives = tuple(self.objectives)
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}", "train.tau")
        if self.focal_alpha <= 0:
            raise ConfigError("must be > 0", "train.focal_alpha")
        if self.focal_gamma < 0:
            raise ConfigError("must be >= 0", "train.focal_gamma")
        if self.lr_init <= 0:
            raise ConfigError("must be > 0", "train.lr_init")
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "train.batch_size")
        if self.optimizer not in ("lars", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", "train.optimizer")
        if self.focal_variant not in ("paper", "standard"):
            raise ConfigError(f"unknown variant {self.focal_variant!r}", "train.focal_variant")
        if not self.objectives or set(self.objectives) - set(OBJECTIVES):
            raise ConfigError(f"objectives must be a non-empty subset of {OBJECTIVES}",
                              "train.objectives")


@dataclass
class LossBreakdown:
    l_sim: float
    l_det: float
    l_total: float
    n_objects_pooled: int
    n_vanished: int


# ---------------------------------------------------------------------------
# objectives

def _cos(a, b):
    denom = torch.clamp(a.norm(dim=-1) * b.norm(dim=-1), min=COS_EPS)
    return (a * b).sum(dim=-1) / denom


def similarity_loss(q1, q2, z1_m, z2_m, ids=None):
    """Mean over objects of ``4 - 2 (cos(q1, z2_m) + cos(q2, z1_m))``.

    ``z1_m``/``z2_m`` are momentum-branch projections. They are detached here
    so no gradient can reach the momentum parameters. ``ids`` optionally
    holds the object ids of each of the four batches, which must agree.
    """
    shapes = {tuple(t.shape) for t in (q1, q2, z1_m, z2_m)}
    if len(shapes) != 1 or q1.ndim != 2:
        raise BatchMismatch(f"embedding batches disagree in shape: {sorted(shapes)}")
    if ids is not None and any(list(i) != list(ids[0]) for i in ids[1:]):
        raise BatchMismatch("object ids differ between branches")
    per_object = 4 - 2 * (_cos(q1, z2_m.detach()) + _cos(q2, z1_m.detach()))
    return per_object.mean()


def similarity_loss_grads(q1, q2, z1_m, z2_m):
    """Closed-form gradients of ``similarity_loss`` w.r.t. ``q1`` and ``q2`` (numpy)."""
    q1, q2, z1_m, z2_m = (np.asarray(a, dtype=np.float64) for a in (q1, q2, z1_m, z2_m))
    n = q1.shape[0]

    def dcos(q, z):
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        zn = np.linalg.norm(z, axis=1, keepdims=True)
        c = (q * z).sum(axis=1, keepdims=True) / (qn * zn)
        return z / (qn * zn) - c * q / qn ** 2

    return -2.0 / n * dcos(q1, z2_m), -2.0 / n * dcos(q2, z1_m)


def focal_loss(p, m, alpha=0.25, gamma=2.0, variant="paper"):
    """Focal loss of probabilities ``p`` against binary ``m``, normalized by ``sum(m)``.

    ``variant="paper"`` weights both terms by ``alpha``; ``"standard"`` weights
    negatives by ``1 - alpha``. ``p`` is clamped to ``[1e-6, 1 - 1e-6]``.
    """
    p = torch.as_tensor(p)
    m = torch.as_tensor(m, dtype=p.dtype)
    if p.shape != m.shape:
        raise BatchMismatch(f"prediction {tuple(p.shape)} vs mask {tuple(m.shape)}")
    norm = m.sum()
    if norm <= 0:
        raise EmptyMaskNormalizer("layout mask has no positive cells")
    p = p.clamp(1e-6, 1 - 1e-6)
    pos = m * (1 - p) ** gamma * torch.log(p)
    neg = (1 - m) * p ** gamma * torch.log(1 - p)
    if variant == "paper":
        return -alpha / norm * (pos + neg).sum()
    return -(alpha * pos + (1 - alpha) * neg).sum() / norm


def focal_loss_grad_logits(logits, m, alpha=0.25, gamma=2.0):
    """Closed-form gradient of the default (``variant="paper"``) focal loss w.r.t. pre-sigmoid logits.

    Valid away from the probability clamp.
    """
    s = np.asarray(logits, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-s))
    d_pos = -gamma * p * (1 - p) ** gamma * np.log(p) + (1 - p) ** (gamma + 1)
    d_neg = gamma * p ** gamma * (1 - p) * np.log(1 - p) - p ** (gamma + 1)
    return -alpha / m.sum() * (m * d_pos + (1 - m) * d_neg)


def total_loss(l_sim, l_det):
    return l_sim + l_det


def lr_schedule(epoch, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr_init`` at epoch 0 towards 0 at ``cfg.epochs``."""
    return max(0.0, 0.5 * cfg.lr_init * (1 + math.cos(math.pi * epoch / cfg.epochs)))


# ---------------------------------------------------------------------------
# optimizer and EMA

class LARS(Optimizer):
    """SGD with momentum and a layer-wise trust ratio.

    Per tensor: ``local = trust * |w| / (|g| + wd * |w| + eps)`` (1 when either
    norm is zero), ``v <- momentum * v + (g + wd * w) * local``, ``w <- w - lr * v``.
    """

    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0,
                 trust_coefficient=0.001, eps=1e-12):
        defaults = dict(lr=lr, momentum=momentum, weight_decay=weight_decay,
                        trust_coefficient=trust_coefficient, eps=eps)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            wd, trust = group["weight_decay"], group["trust_coefficient"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                w_norm = torch.linalg.vector_norm(p)
                g_norm = torch.linalg.vector_norm(g)
                if w_norm > 0 and g_norm > 0:
                    local = trust * w_norm / (g_norm + wd * w_norm + group["eps"])
                else:
                    local = 1.0
                update = (g + wd * p) * local
                state = self.state[p]
                if "momentum_buffer" not in state:
                    state["momentum_buffer"] = torch.zeros_like(p)
                buf = state["momentum_buffer"]
                buf.mul_(group["momentum"]).add_(update)
                p.sub_(group["lr"] * buf)
        return loss


def build_optimizer(params, cfg: TrainConfig) -> Optimizer:
    params = list(params)
    if cfg.optimizer == "lars":
        return LARS(params, lr=cfg.lr_init, momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay, trust_coefficient=cfg.lars_trust_coeff)
    return torch.optim.SGD(params, lr=cfg.lr_init, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr


@torch.no_grad()
def ema_update(momentum_params, online_params, tau):
    """``xi <- tau * xi + (1 - tau) * theta`` for each tensor pair, in place."""
    for xi, theta in zip(momentum_params, online_params, strict=True):
        if xi.shape != theta.shape:
            raise BatchMismatch(f"EMA shape mismatch {tuple(xi.shape)} vs {tuple(theta.shape)}")
        xi.mul_(tau).add_(theta, alpha=1 - tau)


# ---------------------------------------------------------------------------
# training

@dataclass
class PretrainExample:
    """A page with its pseudo layout mask and object masks at feature resolution."""

    image: np.ndarray
    layout_mask: np.ndarray
    objects: ObjectMaskSet
    feature_masks: np.ndarray = None
    feature_layout: np.ndarray = None
    n_vanished: int = 0

    def at_resolution(self, hw):
        if self.feature_masks is None or self.feature_masks.shape[1:] != tuple(hw):
            self.feature_masks, _, self.n_vanished = downsample_object_masks(self.objects, hw)
            self.feature_layout = downsample_mask(self.layout_mask, hw)
        return self.feature_masks, self.feature_layout


@dataclass
class ViewBatchItem:
    v1: np.ndarray
    v2: np.ndarray
    example: PretrainExample


@dataclass
class TrainState:
    model: SelfDocSegModel
    optimizer: Optimizer
    cfg: TrainConfig
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    n_skipped: int = 0


def init_state(cfg: TrainConfig, model_cfg: ModelConfig = None, dtype=torch.float32) -> TrainState:
    torch.manual_seed(derive_seed(cfg.seed, "model:init") % 2 ** 63)
    model = SelfDocSegModel(model_cfg or ModelConfig()).to(dtype)
    # the momentum branch starts as an exact copy of the online branch
    model.momentum_encoder.load_state_dict(model.encoder.state_dict())
    model.momentum_projector.load_state_dict(model.projector.state_dict())
    optimizer = build_optimizer(model.online_parameters(), cfg)
    return TrainState(model=model, optimizer=optimizer, cfg=cfg,
                      rng=stream(cfg.seed, "augment:epoch:0"))


def train_step(state: TrainState, batch: list[ViewBatchItem], lr: float = None):
    """One optimizer step plus EMA update. Returns ``(state, LossBreakdown)``."""
    model, cfg = state.model, state.cfg
    dtype = next(model.parameters()).dtype
    x = image_to_tensor([b.v1 for b in batch] + [b.v2 for b in batch]).to(dtype)
    B = len(batch)
    f = model.encode(x)
    hw = tuple(f.shape[-2:])
    f1, f2 = f[:B], f[B:]

    masks = [b.example.at_resolution(hw) for b in batch]
    n_vanished = sum(b.example.n_vanished for b in batch)
    zero = f.new_zeros(())

    l_sim, n_pooled = zero, 0
    if "sim" in cfg.objectives:
        fm = model.encode_momentum(x)
        fm1, fm2 = fm[:B], fm[B:]
        ys = {"y1": [], "y2": [], "ym1": [], "ym2": []}
        for i, (obj_masks, _) in enumerate(masks):
            if len(obj_masks) == 0:
                continue
            mk = torch.from_numpy(obj_masks)
            ys["y1"].append(mask_pool(f1[i], mk))
            ys["y2"].append(mask_pool(f2[i], mk))
            ys["ym1"].append(mask_pool(fm1[i], mk))
            ys["ym2"].append(mask_pool(fm2[i], mk))
        y1, y2, ym1, ym2 = (torch.cat(ys[k]) for k in ("y1", "y2", "ym1", "ym2"))
        n_pooled = y1.shape[0]
        q1, q2 = model.predict(model.project(y1)), model.predict(model.project(y2))
        z1_m, z2_m = model.project_momentum(ym1), model.project_momentum(ym2)
        l_sim = similarity_loss(q1, q2, z1_m, z2_m)

    l_det = zero
    if "det" in cfg.objectives:
        probs = model.predict_layout(f)
        targets = torch.from_numpy(np.stack([lay for _, lay in masks])).to(dtype)
        targets = torch.cat([targets, targets])
        terms = [focal_loss(probs[i], targets[i], cfg.focal_alpha, cfg.focal_gamma, cfg.focal_variant)
                 for i in range(2 * B)]
        l_det = torch.stack(terms).mean()

    loss = total_loss(l_sim, l_det)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if lr is not None:
        set_lr(state.optimizer, lr)
    state.optimizer.step()
    ema_update((xi for xi, _ in model.ema_pairs()), (th for _, th in model.ema_pairs()), cfg.tau)
    state.step += 1
    return state, LossBreakdown(l_sim=l_sim.item(), l_det=l_det.item(), l_total=loss.item(),
                                n_objects_pooled=n_pooled, n_vanished=n_vanished)


def load_examples(manifest: CorpusManifest, params: MaskGenParams = MaskGenParams(),
                  split: str | None = "train") -> tuple[list[PretrainExample], int]:
    """Build pre-training examples; annotations are never read. Returns ``(examples, n_skipped)``."""
    records = manifest.records if split is None else manifest.split(split)
    examples, skipped = [], 0
    for rec in records:
        image = load_image(rec.image_path)
        if rec.mask_path is not None:
            layout = load_mask(rec.mask_path).astype(np.uint8)
        else:
            layout = generate_layout_mask(image, params)
        try:
            objects = extract_object_masks(layout, params.min_component_area_px)
        except NoComponents:
            skipped += 1
            log.warning("skipping %s: no layout components", rec.image_path)
            continue
        examples.append(PretrainExample(image=image, layout_mask=layout, objects=objects))
    return examples, skipped


# ---------------------------------------------------------------------------
# checkpoint round trip for the full training state

def save_state(path, state: TrainState, meta: dict = None) -> Path:
    extra = {}
    for name, p in state.model.named_parameters():
        if not p.requires_grad:
            continue
        buf = state.optimizer.state.get(p, {}).get("momentum_buffer")
        if buf is not None:
            extra[f"optim/{name}"] = buf
    meta = dict(meta or {})
    meta.update(step=state.step, epoch=state.epoch, rng_state=rng_state(state.rng),
                train_config=asdict(state.cfg), n_skipped=state.n_skipped)
    return save_model(path, state.model, meta, extra)


def load_state(path, cfg: TrainConfig = None) -> TrainState:
    model, manifest, extra = load_model(path)
    cfg = cfg or TrainConfig(**manifest["train_config"])
    optimizer = build_optimizer(model.online_parameters(), cfg)
    params = dict(model.named_parameters())
    for key, buf in extra.items():
        if key.startswith("optim/"):
            optimizer.state[params[key[len("optim/"):]]]["momentum_buffer"] = buf.clone()
    return TrainState(model=model, optimizer=optimizer, cfg=cfg,
                      rng=rng_from_state(manifest["rng_state"]), step=manifest["step"],
                      epoch=manifest["epoch"], n_skipped=manifest.get("n_skipped", 0))


def _batches(order, size):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def pretrain(cfg: TrainConfig, manifest: CorpusManifest, out_dir, *,
             model_cfg: ModelConfig = None, augment_cfg: AugmentConfig = None,
             mask_params: MaskGenParams = MaskGenParams(), resume=None,
             meta: dict = None, examples: list[PretrainExample] = None) -> Path:
    """Run pre-training and return the path of the final checkpoint.

    Writes ``metrics.csv`` (one row per step), checkpoints every
    ``cfg.checkpoint_every`` epochs under ``checkpoints/`` and a final one
    under ``final/``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    augment_cfg = augment_cfg or AugmentConfig()
    meta = dict(meta or {})
    if examples is None:
        examples, skipped = load_examples(manifest, mask_params)
    else:
        skipped = 0
    if not examples:
        raise NoComponents("no usable pre-training images")

    if resume is not None:
        state = load_state(resume, cfg)
        mode = "a"
    else:
        state = init_state(cfg, model_cfg)
        state.n_skipped = skipped
        mode = "w"

    metrics_path = out_dir / "metrics.csv"
    t0 = time.time()
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRIC_FIELDS)
        done = cfg.max_steps is not None and state.step >= cfg.max_steps
        while state.epoch < cfg.epochs and not done:
            epoch = state.epoch
            lr = lr_schedule(epoch, cfg)
            rng = state.rng
            order = rng.permutation(len(examples))
            for idx in _batches(order, cfg.batch_size):
                batch = []
                for i in idx:
                    v1, v2 = make_view_pair(examples[i].image, augment_cfg, rng)
                    batch.append(ViewBatchItem(v1, v2, examples[i]))
                state, losses = train_step(state, batch, lr)
                writer.writerow([state.step, epoch, f"{lr:.9g}", f"{losses.l_sim:.9g}",
                                 f"{losses.l_det:.9g}", f"{losses.l_total:.9g}",
                                 losses.n_vanished])
                if cfg.max_steps is not None and state.step >= cfg.max_steps:
                    done = True
                    break
            state.epoch = epoch + 1
            state.rng = stream(cfg.seed, f"augment:epoch:{state.epoch}")
            if cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
                save_state(out_dir / "checkpoints" / f"epoch_{state.epoch:04}", state, meta)
            log.info("epoch %d done (step %d, %.1fs)", epoch, state.step, time.time() - t0)
    final = save_state(out_dir / "final", state, meta)
    return final


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append({k: (int(v) if k in ("step", "epoch", "n_vanished") else float(v))
                    for k, v in row.items()})
    return out
