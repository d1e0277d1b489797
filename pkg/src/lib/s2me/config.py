"""
Training configuration, method presets and flat key=value config files
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union, get_type_hints

from dotenv import dotenv_values

from .errors import ConfigError
from .fusion import FUSION_STRATEGIES
from .losses import LOSS_TERMS
from .models import MODEL_KINDS

logger = logging.getLogger(__name__)

# keys that do not change what a run computes per step; resuming across them is allowed
HASH_EXCLUDED = ("iterations", "eval_every")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    batch_size: int = 8
    lr0: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    ramp_iters: int = 2500
    lambda_max: float = 5.0
    seed: int = 0
    model_spa: str = "unet"
    model_spe: str = "ynet"
    fusion: str = "entropy"
    loss_terms: Tuple[str, ...] = LOSS_TERMS
    eval_every: int = 100
    base_width: int = 16
    depth: int = 3
    norm: str = "batch"
    local_ratio: float = 0.5
    upsample: str = "bilinear"
    crop_max: int = 2
    flip_p: float = 0.5
    selection: str = "best"
    supervision: str = "scribble"
    lambda_el_max: Optional[float] = None
    grad_clip: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "loss_terms", tuple(t for t in LOSS_TERMS if t in set(self.loss_terms)))
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("iterations", "batch_size", "ramp_iters", "eval_every", "base_width"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.depth < 2:
            problems.append(f"depth must be at least 2, got {self.depth}")
        if not self.lr0 > 0:
            problems.append(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            problems.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.poly_power > 0:
            problems.append(f"poly_power must be > 0, got {self.poly_power}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if not self.lambda_max > 0:
            problems.append(f"lambda_max must be > 0, got {self.lambda_max}")
        if self.lambda_el_max is not None and not self.lambda_el_max > 0:
            problems.append(f"lambda_el_max must be > 0, got {self.lambda_el_max}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            problems.append(f"grad_clip must be > 0, got {self.grad_clip}")
        if not 0 <= self.flip_p <= 1:
            problems.append(f"flip_p must lie in [0, 1], got {self.flip_p}")
        if self.crop_max < 0:
            problems.append(f"crop_max must be nonnegative, got {self.crop_max}")

        choices = {
            "model_spa": MODEL_KINDS,
            "model_spe": MODEL_KINDS,
            "fusion": FUSION_STRATEGIES,
            "norm": ("batch", "instance"),
            "upsample": ("nearest", "bilinear"),
            "selection": ("best", "last"),
            "supervision": ("scribble", "dense"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                problems.append(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

        if "scrib" not in self.loss_terms:
            problems.append(f"loss_terms must include scrib, got {list(self.loss_terms)}")
        if problems:
            raise ConfigError("Invalid training config: " + "; ".join(problems))

    @property
    def el_max(self) -> float:
        return self.lambda_max if self.lambda_el_max is None else self.lambda_el_max

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["loss_terms"] = list(self.loss_terms)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping) -> "TrainConfig":
        unknown = sorted(set(payload) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}")
        return cls(**{k: coerce_value(k, v) for k, v in payload.items()})

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in HASH_EXCLUDED}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Preset:
    """`fixed` keys may not be contradicted by overrides; `defaults` may"""
    description: str
    fixed: Dict[str, object]
    defaults: Dict[str, object] = field(default_factory=dict)


PRESETS: Dict[str, Preset] = {
    "s2me": Preset(
        "UNet + YNet, entropy-guided fusion, all loss terms",
        fixed={"model_spa": "unet", "model_spe": "ynet", "loss_terms": LOSS_TERMS, "supervision": "scribble"},
        defaults={"fusion": "entropy"},
    ),
    "scrib-pce": Preset(
        "Partial cross-entropy on scribbles only",
        fixed={"loss_terms": ("scrib",), "supervision": "scribble"},
        defaults={"model_spa": "unet", "model_spe": "ynet"},
    ),
    "s2me-mt": Preset(
        "Scribbles plus mutual teaching",
        fixed={"loss_terms": ("scrib", "mt"), "supervision": "scribble"},
        defaults={"model_spa": "unet", "model_spe": "ynet", "fusion": "entropy"},
    ),
    "s2me-el": Preset(
        "Scribbles plus ensemble learning",
        fixed={"loss_terms": ("scrib", "el"), "supervision": "scribble"},
        defaults={"model_spa": "unet", "model_spe": "ynet", "fusion": "entropy"},
    ),
    "me-unet-unet": Preset(
        "Two spatial UNets, all loss terms",
        fixed={"model_spa": "unet", "model_spe": "unet", "loss_terms": LOSS_TERMS, "supervision": "scribble"},
        defaults={"fusion": "entropy"},
    ),
    "me-ynet-ynet": Preset(
        "Two YNets, all loss terms",
        fixed={"model_spa": "ynet", "model_spe": "ynet", "loss_terms": LOSS_TERMS, "supervision": "scribble"},
        defaults={"fusion": "entropy"},
    ),
    "fully-ce": Preset(
        "Dense cross-entropy on the full masks (upper bound)",
        fixed={"loss_terms": ("scrib",), "supervision": "dense"},
        defaults={"model_spa": "unet", "model_spe": "ynet"},
    ),
}


def _field_types() -> Dict[str, object]:
    return get_type_hints(TrainConfig)


def coerce_value(key: str, value):
    """Convert a raw (usually string) value to the type of TrainConfig.<key>"""
    types = _field_types()
    if key not in types:
        raise ConfigError(f"Unknown config key: {key}")
    target = types[key]
    if not isinstance(value, str):
        if target == Tuple[str, ...]:
            return tuple(value)
        return value

    text = value.strip()
    try:
        if target == Tuple[str, ...]:
            return tuple(t.strip() for t in text.replace("+", ",").split(",") if t.strip())
        if target == Optional[float]:
            return None if text.lower() in ("", "none", "null") else float(text)
        if target is int:
            return int(text)
        if target is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"Config key {key} expects {getattr(target, '__name__', target)}, got {value!r}")
    return text


def load_config_file(path: Union[str, Path]) -> Dict[str, object]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    raw = dotenv_values(path)
    unknown = sorted(set(raw) - set(_field_types()))
    if unknown:
        raise ConfigError(f"Unknown keys in {path}: {unknown}")
    return {k: coerce_value(k, v if v is not None else "") for k, v in raw.items()}


def parse_overrides(overrides: Iterable[str]) -> Dict[str, object]:
    parsed = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override must look like key=value, got {item!r}")
        parsed[key.strip()] = coerce_value(key.strip(), value)
    return parsed


def _same(a, b) -> bool:
    if isinstance(a, (tuple, list)) and isinstance(b, (tuple, list)):
        return set(a) == set(b)
    return a == b


def resolve_config(
    method: Optional[str] = None,
    config_path: Optional[Union[str, Path]] = None,
    overrides: Union[Mapping[str, object], Iterable[str]] = (),
) -> TrainConfig:
    """Layer defaults < config file < preset < overrides.

    An override that contradicts a key the preset fixes raises ConfigError
    listing every clashing key.
    """
    preset = None
    if not isinstance(overrides, Mapping):
        overrides = parse_overrides(overrides)
    else:
        overrides = {k: coerce_value(k, v) for k, v in overrides.items()}

    if method is not None:
        if method not in PRESETS:
            raise ConfigError(f"Unknown method preset: {method} (expected one of {sorted(PRESETS)})")
        preset = PRESETS[method]
        clashes = [
            f"{key}={overrides[key]!r} (preset {method} fixes {key}={value!r})"
            for key, value in preset.fixed.items()
            if key in overrides and not _same(overrides[key], value)
        ]
        if clashes:
            raise ConfigError("Overrides clash with preset: " + "; ".join(clashes))

    # preset defaults sit below the config file, fixed preset keys above it
    values: Dict[str, object] = dict(preset.defaults) if preset else {}
    if config_path is not None:
        values.update(load_config_file(config_path))
    if preset:
        values.update(preset.fixed)
    values.update(overrides)
    config = TrainConfig.from_dict(values)
    logger.info(f"Resolved config (method={method or 'custom'}, hash={config.config_hash()[:12]})")
    return config


def write_config_file(path: Union[str, Path], config: TrainConfig) -> None:
    """Flat key=value text that load_config_file reads back"""
    lines: List[str] = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(value)
        lines.append(f"{key}={'none' if value is None else value}")
    Path(path).write_text("\n".join(lines) + "\n")
