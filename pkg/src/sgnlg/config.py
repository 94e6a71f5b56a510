"""Run configuration: one flat key namespace, loaded from YAML/JSON and overridden by CLI flags."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields

from .features import FEATURE_PRESETS, resolve_features

CACHE_ENV = "SGNLG_CACHE_DIR"
FAMILIES = ("seq2seq", "cvae", "lm")

# keys that locate files rather than change results; left out of the hash
PATH_KEYS = frozenset({"input_dir", "output_dir", "data_dir", "cache_dir", "checkpoint"})


class ConfigError(ValueError):
    code = "E_CONFIG"


@dataclass
class RunConfig:
    # paths
    input_dir: str = ""
    output_dir: str = ""
    data_dir: str = ""
    cache_dir: str = ""
    checkpoint: str = ""
    # preprocessing
    dev_fraction: float = 0.1
    dedupe: bool = False
    jobs: int = 1
    # features
    features: str = "full_schema"
    symbolic_dim: int = 64
    model_dim: int = 128
    pooling: str = "mean"
    nl_mr_mode: str = "pooled"
    sentence_encoder: str = "hashing:64"
    # model
    family: str = "seq2seq"
    hidden_dim: int = 128
    token_dim: int = 64
    latent_dim: int = 32
    align: str = "general"
    cvae_attention: str = "tanh"
    lm_backbone: str = "tiny"
    # training
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    grad_clip: float = 5.0
    kl_warmup: float = 0.2
    # decoding
    beam_width: int = 5
    max_len: int = 60
    lm_max_len: int = 128
    top_k: int = 5
    # everything random
    seed: int = 0

    def __post_init__(self):
        if not self.cache_dir:
            self.cache_dir = os.environ.get(CACHE_ENV, "")

    def feature_list(self) -> tuple[str, ...]:
        if self.features in FEATURE_PRESETS:
            return FEATURE_PRESETS[self.features]
        return resolve_features([f.strip() for f in self.features.split(",") if f.strip()])

    def validate(self, require_paths=()) -> "RunConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {', '.join(FAMILIES)}, got {self.family!r}")
        try:
            self.feature_list()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigError("dev_fraction must be in [0, 1)")
        for name in ("beam_width", "top_k", "max_len", "lm_max_len", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for key in require_paths:
            path = getattr(self, key)
            if not path:
                raise ConfigError(f"missing required path {key!r}")
            if not os.path.exists(path):
                raise ConfigError(f"{key} does not exist: {path}")
        return self

    def hashed_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in PATH_KEYS}

    def config_hash(self) -> str:
        blob = json.dumps(self.hashed_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}


def _coerce(name: str, value):
    ftype = {f.name: f.type for f in fields(RunConfig)}[name]
    if value is None:
        return value
    if ftype == "bool":
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if ftype == "int":
        return int(value)
    if ftype == "float":
        return float(value)
    if ftype == "str" and isinstance(value, (list, tuple)):
        return ",".join(value)
    return str(value)


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """File keys first, then non-None ``overrides`` on top."""
    data: dict = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if path.endswith((".yaml", ".yml")):
            import yaml
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return RunConfig(**{k: _coerce(k, v) for k, v in data.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
