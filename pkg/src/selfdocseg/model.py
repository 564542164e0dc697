"""Encoder, mask pooling, projection heads and the layout head.

The online branch owns encoder, projector, predictor and layout head; the
momentum branch holds EMA copies of encoder and projector only and never
receives gradients.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyMask, MissingCheckpoint, PipelineIOError, ShapeError

log = logging.getLogger(__name__)

PROB_EPS = 1e-6

# dimensions of a ResNet50-scale run, for anyone scaling up
REFERENCE_SCALE = {"feature_dim": 2048, "mlp_hidden": 4096, "mlp_out": 256}


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256)
    mlp_hidden: int = 512
    mlp_out: int = 256
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive ints")
        if self.mlp_hidden < 1 or self.mlp_out < 1:
            raise ValueError("mlp dims must be positive")

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


def image_to_tensor(images) -> torch.Tensor:
    """Stack ``H x W x 3`` uint8 arrays into a ``B x 3 x H x W`` float tensor in [0, 1]."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = np.stack([np.asarray(im) for im in images]).astype(np.float32) / 255.0
    return torch.from_numpy(batch).permute(0, 3, 1, 2).contiguous()


class Encoder(nn.Module):
    """Stack of stride-2 3x3 convolutions, each followed by per-channel norm and ReLU."""

    def __init__(self, channels=(32, 64, 128, 256), in_channels=3, eps=1e-5):
        super().__init__()
        layers = []
        c_in = in_channels
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 3, stride=2, padding=1),
                       nn.GroupNorm(c, c, eps=eps),
                       nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.stride = 2 ** len(channels)
        self.out_channels = c_in

    def forward(self, x):
        H, W = x.shape[-2:]
        if H % self.stride or W % self.stride:
            raise ShapeError(f"input {H}x{W} is not divisible by encoder stride {self.stride}")
        return self.body(x)


def mask_pool(f: torch.Tensor, masks) -> torch.Tensor:
    """Average ``f`` (``c x h x w``) over each mask (``n x h x w``); returns ``n x c``."""
    masks = torch.as_tensor(masks).to(dtype=f.dtype, device=f.device)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.shape[-2:] != f.shape[-2:]:
        raise ShapeError(f"mask shape {tuple(masks.shape[-2:])} != feature shape {tuple(f.shape[-2:])}")
    flat = masks.reshape(masks.shape[0], -1)
    area = flat.sum(dim=1, keepdim=True)
    if (area <= 0).any():
        raise EmptyMask("mask pooling over an empty mask")
    return flat @ f.reshape(f.shape[0], -1).T / area


class BatchStandardize(nn.Module):
    """Per-feature standardization across the object batch, with a learned affine.

    A batch of one object has no spread to normalize by, so it passes through
    unnormalized (the affine is still applied).
    """

    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        if x.shape[0] >= 2:
            mean = x.mean(dim=0, keepdim=True)
            var = x.var(dim=0, unbiased=False, keepdim=True)
            x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight + self.bias


class MLPHead(nn.Module):
    """linear -> batch standardization -> ReLU -> linear."""

    def __init__(self, in_dim, hidden, out_dim, eps=1e-5):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.norm = BatchStandardize(hidden, eps)
        self.fc2 = nn.Linear(hidden, out_dim)

    def forward(self, x):
        return self.fc2(F.relu(self.norm(self.fc1(x))))


class LayoutHead(nn.Module):
    """1x1 convolution producing one layout logit per feature cell."""

    def __init__(self, in_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1)

    def logits(self, f):
        return self.conv(f).squeeze(-3)

    def forward(self, f):
        return torch.sigmoid(self.logits(f)).clamp(PROB_EPS, 1 - PROB_EPS)


class SelfDocSegModel(nn.Module):
    def __init__(self, cfg: ModelConfig = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        d = cfg.feature_dim
        self.encoder = Encoder(cfg.channels, eps=cfg.norm_eps)
        self.projector = MLPHead(d, cfg.mlp_hidden, cfg.mlp_out, cfg.norm_eps)
        self.predictor = MLPHead(cfg.mlp_out, cfg.mlp_hidden, cfg.mlp_out, cfg.norm_eps)
        self.layout_head = LayoutHead(d)
        self.momentum_encoder = copy.deepcopy(self.encoder)
        self.momentum_projector = copy.deepcopy(self.projector)
        for p in self.momentum_parameters():
            p.requires_grad_(False)

    def online_parameters(self):
        for module in (self.encoder, self.projector, self.predictor, self.layout_head):
            yield from module.parameters()

    def momentum_parameters(self):
        yield from self.momentum_encoder.parameters()
        yield from self.momentum_projector.parameters()

    def ema_pairs(self):
        """(momentum, online) parameter pairs covered by the EMA update."""
        yield from zip(self.momentum_encoder.parameters(), self.encoder.parameters())
        yield from zip(self.momentum_projector.parameters(), self.projector.parameters())

    def encode(self, x):
        return self.encoder(x)

    def encode_momentum(self, x):
        with torch.no_grad():
            return self.momentum_encoder(x)

    def project(self, y):
        return self.projector(y)

    def project_momentum(self, y):
        with torch.no_grad():
            return self.momentum_projector(y)

    def predict(self, z):
        return self.predictor(z)

    def predict_layout(self, f):
        return self.layout_head(f)


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one raw little-endian float32 blob per tensor

def _safe_name(name):
    return name.replace("/", "__")


def save_checkpoint(path, tensors: dict, meta: dict) -> Path:
    path = Path(path)
    try:
        (path / "tensors").mkdir(parents=True, exist_ok=True)
        entries = []
        for name, t in tensors.items():
            arr = t.detach().cpu().to(torch.float32).numpy()
            fname = f"tensors/{_safe_name(name)}.f32"
            arr.astype("<f4").tofile(path / fname)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32-le",
                            "file": fname})
        manifest = dict(meta)
        manifest["tensors"] = entries
        with open(path / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise PipelineIOError("cannot write checkpoint", path) from exc
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    tensors = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "float32-le":
            raise PipelineIOError(f"unsupported dtype {entry['dtype']}", path)
        arr = np.fromfile(path / entry["file"], dtype="<f4").reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    return tensors, manifest


def save_model(path, model: SelfDocSegModel, meta: dict = None, extra_tensors: dict = None):
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra_tensors or {})
    meta = dict(meta or {})
    meta["model_config"] = asdict(model.cfg)
    return save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[SelfDocSegModel, dict, dict]:
    """Returns ``(model, manifest, extra_tensors)``."""
    tensors, manifest = load_checkpoint(path)
    mc = manifest["model_config"]
    model = SelfDocSegModel(ModelConfig(**mc))
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model, manifest, extra


def tensor_checksum(module: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
