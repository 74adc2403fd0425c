"""Training configuration and the JSON run-config file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import BACKBONES
from .data import SyntheticSpec
from .errors import ConfigError
from .objectives import STRATEGIES
from .slidegraph import CONV_VARIANTS


@dataclass
class TrainConfig:
    """Hyper-parameters of one training run.

    Defaults are the full-scale settings (buffer of 3072 slides, 12 neighbours);
    :meth:`reference` gives the small synthetic configuration used in tests.
    """

    buffer_size: int = 3072
    num_classes: int = 2
    k: int = 12
    batch_size: int = 8
    embed_dim: int | None = None  # None: same as the patch embedding width
    proj_dim: int = 128
    identity_projection: bool = False
    kd_temperature: float = 1.5
    beta: float = 1.75
    tau: float = 0.5
    warmup_epochs: int = 5
    total_epochs: int = 30
    lr_warmup: float = 2e-4
    lr_formal: float = 1e-4
    lr_min: float = 0.0
    leaky_slope: float = 0.01
    strategy: str = "distill-js"
    conv: str = "hyper"
    backbone: str = "abmil"
    attn_dim: int = 64
    attn_rank: int | None = None
    seed: int = 0

    @classmethod
    def reference(cls, **overrides) -> "TrainConfig":
        base = dict(buffer_size=64, num_classes=2, k=5, batch_size=8, embed_dim=32,
                    kd_temperature=1.5, beta=1.75, tau=0.5, total_epochs=30)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> "TrainConfig":
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.buffer_size < self.num_classes or self.buffer_size % self.num_classes:
            raise ConfigError(f"buffer_size {self.buffer_size} must be a positive multiple of "
                              f"num_classes {self.num_classes}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 1 <= self.k <= self.buffer_size:
            # inference graphs hold buffer_size + 1 nodes
            raise ConfigError(f"k must lie in [1, buffer_size], got {self.k}")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")
        if self.total_epochs <= self.warmup_epochs:
            raise ConfigError("total_epochs must exceed warmup_epochs")
        for name in ("kd_temperature", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if not self.lr_warmup >= 0 or not self.lr_formal >= self.lr_min >= 0:
            raise ConfigError("need lr_warmup >= 0 and lr_formal >= lr_min >= 0")
        if self.embed_dim is not None and self.embed_dim < 1:
            raise ConfigError("embed_dim must be >= 1")
        if self.proj_dim < 1 or self.attn_dim < 1:
            raise ConfigError("proj_dim and attn_dim must be >= 1")
        if self.attn_rank is not None and self.attn_rank < 1:
            raise ConfigError("attn_rank must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.conv not in CONV_VARIANTS:
            raise ConfigError(f"conv must be one of {CONV_VARIANTS}, got {self.conv!r}")
        if self.backbone not in BACKBONES:
            raise ConfigError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        return cls(**_typed(cls, d, "train config"))


@dataclass
class RunConfig:
    """Everything a CLI command needs: training settings plus data and output locations."""

    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"
    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    synthetic: SyntheticSpec | None = None

    def validate(self) -> "RunConfig":
        self.train.validate()
        if self.synthetic is None and self.train_manifest is None:
            raise ConfigError("config needs either a 'synthetic' block or a 'train_manifest'")
        if self.synthetic is not None:
            if self.train_manifest is not None:
                raise ConfigError("give either 'synthetic' or manifests, not both")
            try:
                self.synthetic.validate()
            except ConfigError as exc:
                raise ConfigError(f"synthetic: {exc}") from None
            if self.synthetic.num_classes != self.train.num_classes:
                raise ConfigError("synthetic.num_classes must equal num_classes")
        return self

    def to_dict(self) -> dict[str, Any]:
        d = self.train.to_dict()
        d.update(out_dir=self.out_dir, train_manifest=self.train_manifest,
                 val_manifest=self.val_manifest, test_manifest=self.test_manifest,
                 synthetic=None if self.synthetic is None else dataclasses.asdict(self.synthetic))
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        run_keys = {"out_dir", "train_manifest", "val_manifest", "test_manifest", "synthetic"}
        train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = sorted(set(d) - run_keys - train_keys)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        synth = d.pop("synthetic", None)
        run = {k: d.pop(k) for k in list(d) if k in run_keys}
        for key in ("train_manifest", "val_manifest", "test_manifest"):
            val = run.get(key)
            if val is not None and base_dir is not None and not Path(val).is_absolute():
                run[key] = str(base_dir / val)
        train = TrainConfig.from_dict(d)
        spec = None
        if synth is not None:
            if not isinstance(synth, dict):
                raise ConfigError("'synthetic' must be an object")
            spec = SyntheticSpec(**_typed(SyntheticSpec, synth, "synthetic"))
            if "num_classes" not in synth:
                spec.num_classes = train.num_classes
        for key in ("out_dir", "train_manifest", "val_manifest", "test_manifest"):
            if key in run and run[key] is not None and not isinstance(run[key], str):
                raise ConfigError(f"{key} must be a string")
        return cls(train=train, synthetic=spec, **run)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(raw, base_dir=path.parent)


_KINDS = {int: (int,), float: (int, float), str: (str,), bool: (bool,)}


def _typed(cls, d: dict[str, Any], where: str) -> dict[str, Any]:
    """Reject unknown keys and values of the wrong JSON type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    out = {}
    hints = _annotations(cls)
    for key, value in d.items():
        base, optional = hints[key]
        if value is None:
            if not optional:
                raise ConfigError(f"{where}.{key} may not be null")
        else:
            allowed = _KINDS[base]
            ok = isinstance(value, allowed) and not (base is not bool and isinstance(value, bool))
            if not ok:
                raise ConfigError(f"{where}.{key} must be of type {base.__name__}, got {value!r}")
            if base is float:
                value = float(value)
        out[key] = value
    return out


def _annotations(cls) -> dict[str, tuple[type, bool]]:
    out = {}
    for f in dataclasses.fields(cls):
        ann = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        optional = "None" in ann
        base = ann.replace("| None", "").replace("None |", "").strip()
        out[f.name] = ({"int": int, "float": float, "str": str, "bool": bool}[base], optional)
    return out
