"""Run configuration: TOML in, validated dataclasses out.

Every tunable lives here with a default, so an empty TOML file is a
valid config. Unknown sections or keys are hard errors (they are
almost always typos), and every validation failure names the offending
field. A canonical rendering plus its hash ties artifacts back to the
exact configuration that produced them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ImportError:                       # Python 3.10
    import tomli as tomllib

from .errors import ConfigError

SSL_METHODS = ("simsiam", "infonce")
TASKS = ("classification", "regression", "segmentation")
INITS = ("zero", "copy")


@dataclass
class DataConfig:
    n_slides: int = 16
    train_patches: int = 512
    test_patches: int = 256
    patch_size: int = 32
    perturbation: float = 0.4
    n_classes: int = 2


@dataclass
class ModelConfig:
    embed_dim: int = 32


@dataclass
class PretrainConfig:
    ssl_method: str = "simsiam"
    sassl_enabled: bool = False
    steps: int = 2000
    batch_size: int = 32
    group_size: int = 4
    crop: int = 24
    flip_prob: float = 0.5
    jitter: float = 0.15
    channel_jitter: float = 0.0
    erase: float = 0.0
    lambda_adv: float = 1.0
    tau_affinity: float = 0.2
    disc_steps: int = 1
    temperature: float = 0.2
    queue_size: int = 256
    key_momentum: float = 0.99
    lr: float = 0.05
    lr_d: float = 0.05
    sgd_momentum: float = 0.9
    log_every: int = 50


@dataclass
class FinetuneConfig:
    task: str = "classification"
    init: str = "copy"
    steps: int = 1000
    batch_size: int = 32
    lr: float = 0.05
    sgd_momentum: float = 0.9
    jitter: float = 0.10
    channel_jitter: float = 0.0
    erase: float = 0.0
    flip_prob: float = 0.5


@dataclass
class RunConfig:
    seed: int = 7
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)


_SECTIONS = {"data": DataConfig, "model": ModelConfig,
             "pretrain": PretrainConfig, "finetune": FinetuneConfig}


def _apply(section_name: str, target, values: dict) -> None:
    known = {f.name: f.type for f in fields(target)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{section_name}]")
        current = getattr(target, key)
        if isinstance(current, bool):
            if not isinstance(val, bool):
                raise ConfigError(f"[{section_name}] {key}: expected boolean, got {val!r}")
        elif isinstance(current, int):
            if isinstance(val, bool) or not isinstance(val, int):
                raise ConfigError(f"[{section_name}] {key}: expected integer, got {val!r}")
        elif isinstance(current, float):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"[{section_name}] {key}: expected number, got {val!r}")
            val = float(val)
        elif isinstance(current, str):
            if not isinstance(val, str):
                raise ConfigError(f"[{section_name}] {key}: expected string, got {val!r}")
        setattr(target, key, val)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: invalid TOML: {e}") from e
    cfg = RunConfig()
    for section, values in raw.items():
        if section == "seed":
            if isinstance(values, bool) or not isinstance(values, int):
                raise ConfigError(f"seed: expected integer, got {values!r}")
            cfg.seed = values
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        _apply(section, getattr(cfg, section), values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    d, m, p, ft = cfg.data, cfg.model, cfg.pretrain, cfg.finetune
    def positive(section, name, v):
        if v <= 0:
            raise ConfigError(f"[{section}] {name} must be positive, got {v}")
    if cfg.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {cfg.seed}")
    for name in ("n_slides", "train_patches", "test_patches", "patch_size", "n_classes"):
        positive("data", name, getattr(d, name))
    if not 0.0 <= d.perturbation <= 1.0:
        raise ConfigError(f"[data] perturbation must be in [0,1], got {d.perturbation}")
    if d.n_classes != 2:
        raise ConfigError(f"[data] n_classes: generator defines exactly 2 classes, got {d.n_classes}")
    positive("model", "embed_dim", m.embed_dim)
    if p.ssl_method not in SSL_METHODS:
        raise ConfigError(f"[pretrain] ssl_method must be one of {SSL_METHODS}, got '{p.ssl_method}'")
    if p.steps < 0:
        raise ConfigError(f"[pretrain] steps must be >= 0, got {p.steps}")
    for name in ("batch_size", "group_size", "crop", "queue_size",
                 "log_every", "disc_steps"):
        positive("pretrain", name, getattr(p, name))
    if p.crop < 15:
        raise ConfigError(f"[pretrain] crop must be >= 15 (three stride-2 stages), got {p.crop}")
    if p.crop > d.patch_size:
        raise ConfigError(f"[pretrain] crop {p.crop} exceeds [data] patch_size {d.patch_size}")
    if p.group_size < 2:
        raise ConfigError(f"[pretrain] group_size must be >= 2 so every patch has "
                          f"a same-slide companion, got {p.group_size}")
    if p.batch_size % p.group_size != 0:
        raise ConfigError(f"[pretrain] batch_size {p.batch_size} not divisible by group_size {p.group_size}")
    if p.batch_size // p.group_size > d.n_slides:
        raise ConfigError(f"[pretrain] batch needs {p.batch_size // p.group_size} slides "
                          f"but [data] n_slides is {d.n_slides}")
    if p.sassl_enabled and p.batch_size // p.group_size < 2:
        raise ConfigError("[pretrain] the stain adversary needs patches from at "
                          "least 2 slides per batch")
    if not 0.0 <= p.flip_prob <= 1.0:
        raise ConfigError(f"[pretrain] flip_prob must be in [0,1], got {p.flip_prob}")
    if p.jitter < 0 or p.jitter >= 1:
        raise ConfigError(f"[pretrain] jitter must be in [0,1), got {p.jitter}")
    if p.channel_jitter < 0 or p.channel_jitter >= 1:
        raise ConfigError(f"[pretrain] channel_jitter must be in [0,1), got {p.channel_jitter}")
    if not 0.0 <= p.erase <= 1.0 or not 0.0 <= ft.erase <= 1.0:
        raise ConfigError("erase must be in [0,1] (fraction of the crop side)")
    if p.lambda_adv < 0:
        raise ConfigError(f"[pretrain] lambda_adv must be >= 0, got {p.lambda_adv}")
    if p.sassl_enabled and p.lambda_adv == 0:
        raise ConfigError("[pretrain] sassl_enabled requires lambda_adv > 0")
    if p.tau_affinity <= 0 or p.temperature <= 0:
        raise ConfigError("[pretrain] tau_affinity and temperature must be positive")
    if not 0.0 <= p.key_momentum <= 1.0:
        raise ConfigError(f"[pretrain] key_momentum must be in [0,1], got {p.key_momentum}")
    if p.lr < 0 or p.lr_d < 0 or ft.lr < 0:
        raise ConfigError("learning rates must be >= 0")
    if not 0.0 <= p.sgd_momentum < 1.0:
        raise ConfigError(f"[pretrain] sgd_momentum must be in [0,1), got {p.sgd_momentum}")
    if ft.task not in TASKS:
        raise ConfigError(f"[finetune] task must be one of {TASKS}, got '{ft.task}'")
    if ft.init not in INITS:
        raise ConfigError(f"[finetune] init must be one of {INITS}, got '{ft.init}'")
    if ft.steps < 0:
        raise ConfigError(f"[finetune] steps must be >= 0, got {ft.steps}")
    positive("finetune", "batch_size", ft.batch_size)
    if not 0.0 <= ft.sgd_momentum < 1.0:
        raise ConfigError(f"[finetune] sgd_momentum must be in [0,1), got {ft.sgd_momentum}")
    if ft.jitter < 0 or ft.jitter >= 1:
        raise ConfigError(f"[finetune] jitter must be in [0,1), got {ft.jitter}")
    if ft.channel_jitter < 0 or ft.channel_jitter >= 1:
        raise ConfigError(f"[finetune] channel_jitter must be in [0,1), got {ft.channel_jitter}")
    if not 0.0 <= ft.flip_prob <= 1.0:
        raise ConfigError(f"[finetune] flip_prob must be in [0,1], got {ft.flip_prob}")
    if ft.task == "segmentation":
        tap = p.crop
        for _ in range(3):
            tap = (tap - 3) // 2 + 1
        if p.crop % tap != 0:
            raise ConfigError(
                f"[finetune] segmentation needs crop divisible by its deepest tap "
                f"({p.crop} vs {tap}); crop 24 works")


def canonical_toml(cfg: RunConfig) -> str:
    """Stable, fully-explicit rendering: every field, sorted, one per line."""
    lines = [f"seed = {cfg.seed}"]
    for section in sorted(_SECTIONS):
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in sorted(fields(obj), key=lambda f: f.name):
            v = getattr(obj, f.name)
            if isinstance(v, str):
                lines.append(f'{f.name} = "{v}"')
            elif isinstance(v, bool):
                lines.append(f"{f.name} = {'true' if v else 'false'}")
            elif isinstance(v, float):
                lines.append(f"{f.name} = {v!r}")
            else:
                lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_toml(cfg).encode()).hexdigest()


def data_fingerprint(cfg: RunConfig) -> str:
    """Hash of just the fields a generated dataset depends on.

    Lets multiple runs (different pretrain settings) share one dataset
    while still catching a stale dataset after a [data] or seed change.
    """
    lines = [f"seed = {cfg.seed}"]
    for f in sorted(fields(cfg.data), key=lambda f: f.name):
        lines.append(f"{f.name} = {getattr(cfg.data, f.name)!r}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()
