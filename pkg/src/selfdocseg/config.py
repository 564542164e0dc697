"""Strict JSON run configuration with one global seed and a canonical hash.

Each section maps onto the dataclass of the module that owns it, so defaults
live in exactly one place. Unknown keys and wrongly typed values raise
``ConfigError`` naming the offending key path.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

from .augment import AugmentConfig, JitterStrengths
from .docgen import PageSpec
from .errors import ConfigError
from .evalkit import EvalConfig
from .maskgen import MaskGenParams
from .model import ModelConfig
from .seeding import derive_seed
from .ssl import TrainConfig

OUT_ENV = "SELFDOCSEG_OUT"

# section -> (dataclass, keys taken from the global config instead of the section)
SECTIONS = {
    "docgen": (PageSpec, {"seed"}),
    "maskgen": (MaskGenParams, set()),
    "augment": (AugmentConfig, set()),
    "model": (ModelConfig, set()),
    "train": (TrainConfig, {"seed"}),
    "eval": (EvalConfig, set()),
}
DOCGEN_EXTRA = {"count": 64, "split_fractions": [0.8, 0.1, 0.1]}
NESTED = {("augment", "jitter_strengths"): JitterStrengths}


def _default(f):
    if f.default is not MISSING:
        return f.default
    return f.default_factory()


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if hasattr(value, "__dataclass_fields__"):
        return _jsonable(asdict(value))
    return value


def default_config() -> dict:
    cfg = {"seed": 0, "output_root": "runs"}
    for name, (cls, skip) in SECTIONS.items():
        cfg[name] = {f.name: _jsonable(_default(f)) for f in fields(cls) if f.name not in skip}
    cfg["docgen"].update(copy.deepcopy(DOCGEN_EXTRA))
    return cfg


def _check_type(value, default, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:  # optional fields default to None
        ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
    if not ok:
        raise ConfigError(f"expected {type(default).__name__ if default is not None else 'int or null'}, "
                          f"got {type(value).__name__}", path)


def _merge(base: dict, update: dict, path: str):
    for key, value in update.items():
        sub = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError("unknown key", sub)
        _check_type(value, base[key], sub)
        if isinstance(base[key], dict):
            _merge(base[key], value, sub)
        else:
            base[key] = value


@dataclass
class RunConfig:
    """Resolved configuration; ``data`` is the canonical JSON-able dict."""

    data: dict

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("top level must be a JSON object", "<root>")
        data = default_config()
        _merge(data, raw, "")
        cfg = cls(data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict = None) -> "RunConfig":
        raw = {}
        if path is not None:
            try:
                with open(path) as fh:
                    raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from exc
            except OSError as exc:
                raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
        cfg = cls.from_dict(raw)
        for dotted, value in (overrides or {}).items():
            if value is None:
                continue
            node = cfg.data
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        cfg.validate()
        return cfg

    def validate(self):
        for name in SECTIONS:
            self.section(name)
        count = self.data["docgen"]["count"]
        if count < 1:
            raise ConfigError("must be >= 1", "docgen.count")
        fr = self.data["docgen"]["split_fractions"]
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise ConfigError("must be three non-negative fractions summing to 1",
                              "docgen.split_fractions")

    def section(self, name):
        cls, skip = SECTIONS[name]
        kwargs = {k: v for k, v in self.data[name].items() if k in {f.name for f in fields(cls)}}
        if "seed" in skip:
            kwargs["seed"] = self.seed
        for (sec, key), sub in NESTED.items():
            if sec == name:
                kwargs[key] = sub(**kwargs[key])
        try:
            return cls(**kwargs)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), name) from exc

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.data["output_root"])

    def page_spec(self) -> PageSpec:
        return self.section("docgen")

    def replicate_seed(self, k: int) -> int:
        """Seed of replicate ``k`` (probe or pre-training run) fanned out from the global seed."""
        return derive_seed(self.seed, f"replicate:{k}") % 2 ** 31

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def echo(self) -> dict:
        return {"config": copy.deepcopy(self.data), "config_hash": self.hash}
