"""Run configuration: defaults, presets, validation and YAML round-tripping.

An empty file validates to the full-scale defaults. ``preset: tiny`` or
``preset: desk`` switches the base before user keys are applied. Unknown keys
are errors.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    image_size: int = 128
    images_dir: str | None = None
    fonts_dir: str | None = None
    charset_file: str | None = None
    structure_table: str | None = None
    synthetic_fonts: int = 6
    content_font: str = "content"
    split_ratios: list[float] = field(default_factory=lambda: [2841, 158, 500])
    reference_chars: list[str] | None = None
    unseen_fonts: int = 1
    refs_per_char: int = 3
    max_chars: int | None = None


@dataclass
class VQGANConfig:
    latent_size: int = 16
    codebook_size: int = 1024
    code_dim: int = 256
    channels: list[int] = field(default_factory=lambda: [64, 128, 128, 256])
    res_blocks: int = 1
    lambda_comm: float = 0.5
    lambda_adv: float = 0.8
    lr: float = 4e-5
    batch_size: int = 32
    iterations: int = 200_000
    disc_start: int = 0
    disc_channels: int = 64
    perceptual: str = "random"
    perceptual_weights: str | None = None
    checkpoint_every: int = 10_000


@dataclass
class VQFontConfig:
    channels: int = 256
    encoder_channels: list[int] | None = None  # None: reuse vqgan.channels
    attention_heads: int = 8
    transformer_blocks: int = 15
    transformer_heads: int = 8
    ffn_mult: int = 4
    lambda_self: float = 1.0
    lambda_main: float = 2.0
    lambda_l1: float = 2.0
    lambda_adv: float = 0.002
    lambda_per: float = 1.0
    lr: float = 2e-4
    batch_size: int = 32
    iterations: int = 300_000
    finetune_decoder_layers: int = 4
    use_ssem: bool = True
    use_codebook: bool = True
    disc_start: int = 0
    disc_channels: int = 64
    checkpoint_every: int = 10_000


@dataclass
class RunConfig:
    preset: str = "paper"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    vqgan: VQGANConfig = field(default_factory=VQGANConfig)
    vqfont: VQFontConfig = field(default_factory=VQFontConfig)

    @property
    def downsamplings(self) -> int:
        return int(round(math.log2(self.data.image_size / self.vqgan.latent_size)))

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, dict] = {
    "paper": {},
    "desk": {
        "data": {"image_size": 128, "synthetic_fonts": 30, "split_ratios": [200, 40, 60], "unseen_fonts": 5},
        "vqgan": {
            "codebook_size": 256,
            "code_dim": 128,
            "channels": [32, 64, 64, 128],
            "lr": 2e-4,
            "iterations": 20_000,
            "disc_start": 5_000,
            "disc_channels": 32,
            "checkpoint_every": 2_000,
        },
        "vqfont": {
            "channels": 128,
            "transformer_blocks": 6,
            "iterations": 30_000,
            "disc_channels": 32,
            "checkpoint_every": 2_000,
        },
    },
    "tiny": {
        "data": {"image_size": 32, "synthetic_fonts": 6, "split_ratios": [100, 30, 20], "unseen_fonts": 1},
        "vqgan": {
            "latent_size": 8,
            "codebook_size": 64,
            "code_dim": 32,
            "channels": [16, 32, 64],
            "lr": 1e-3,
            "batch_size": 16,
            "iterations": 1500,
            "disc_start": 1000,
            "disc_channels": 16,
            "checkpoint_every": 500,
        },
        "vqfont": {
            "channels": 64,
            "encoder_channels": [8, 16, 32],
            "attention_heads": 4,
            "transformer_blocks": 2,
            "transformer_heads": 4,
            "ffn_mult": 2,
            "lr": 1e-3,
            "batch_size": 16,
            "iterations": 2000,
            "disc_start": 1000,
            "disc_channels": 16,
            "checkpoint_every": 500,
        },
    },
}


def _merge(base: Any, raw: dict, path: str, errors: list[str]) -> Any:
    """Apply ``raw`` onto dataclass ``base`` in place, collecting violations."""
    known = {f.name: f for f in fields(base)}
    for key, value in raw.items():
        where = f"{path}{key}"
        if key not in known:
            errors.append(f"unknown key '{where}'")
            continue
        current = getattr(base, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                errors.append(f"'{where}' must be a mapping")
            else:
                _merge(current, value, where + ".", errors)
        else:
            setattr(base, key, value)
    return base


def _check(cfg: RunConfig) -> list[str]:
    errs: list[str] = []

    def need(cond: bool, msg: str) -> None:
        if not cond:
            errs.append(msg)

    def typed(obj: Any, name: str, kind: type | tuple, where: str, optional: bool = False) -> bool:
        v = getattr(obj, name)
        if v is None and optional:
            return False
        ok = isinstance(v, kind) and not (isinstance(v, bool) and kind in (int, float, (int, float)))
        if not ok:
            errs.append(f"'{where}.{name}' has invalid type {type(v).__name__}")
        return ok

    d, q, f = cfg.data, cfg.vqgan, cfg.vqfont
    need(cfg.preset in PRESETS, f"preset must be one of {sorted(PRESETS)}")
    typed(cfg, "seed", int, "run")
    for name in ("image_size", "synthetic_fonts", "unseen_fonts", "refs_per_char"):
        typed(d, name, int, "data")
    for name in ("images_dir", "fonts_dir", "charset_file", "structure_table"):
        typed(d, name, str, "data", optional=True)
    typed(d, "max_chars", int, "data", optional=True)
    if typed(d, "image_size", int, "data"):
        need(d.image_size >= 8 and d.image_size & (d.image_size - 1) == 0, "data.image_size must be a power of two >= 8")
    if isinstance(d.refs_per_char, int):
        need(d.refs_per_char >= 1, "data.refs_per_char must be >= 1")
    if isinstance(d.unseen_fonts, int):
        need(d.unseen_fonts >= 0, "data.unseen_fonts must be >= 0")
    if not (isinstance(d.split_ratios, list) and len(d.split_ratios) == 3 and all(isinstance(r, (int, float)) and r >= 0 for r in d.split_ratios)):
        errs.append("data.split_ratios must be three non-negative numbers")
    if d.reference_chars is not None and not (isinstance(d.reference_chars, list) and all(isinstance(c, str) for c in d.reference_chars)):
        errs.append("data.reference_chars must be a list of hex codepoints or characters")

    for name in ("latent_size", "codebook_size", "code_dim", "res_blocks", "batch_size", "iterations", "disc_start", "disc_channels", "checkpoint_every"):
        typed(q, name, int, "vqgan")
    for name in ("lambda_comm", "lambda_adv", "lr"):
        typed(q, name, (int, float), "vqgan")
    if isinstance(q.codebook_size, int):
        need(q.codebook_size >= 2, "vqgan.codebook_size must be >= 2")
    if isinstance(q.code_dim, int):
        need(q.code_dim >= 1, "vqgan.code_dim must be >= 1")
    if isinstance(q.latent_size, int) and isinstance(d.image_size, int) and q.latent_size > 0:
        ratio = d.image_size / q.latent_size
        ok = q.latent_size >= 2 and ratio >= 1 and float(ratio).is_integer() and int(ratio) & (int(ratio) - 1) == 0
        need(ok, "vqgan.latent_size must divide data.image_size by a power of two")
        if ok and isinstance(q.channels, list):
            n = int(round(math.log2(ratio)))
            need(len(q.channels) == n + 1, f"vqgan.channels needs {n + 1} entries for {n} downsamplings")
    else:
        errs.append("vqgan.latent_size must be a positive integer")
    if not (isinstance(q.channels, list) and q.channels and all(isinstance(c, int) and c > 0 for c in q.channels)):
        errs.append("vqgan.channels must be a list of positive integers")
    for name in ("lr",):
        v = getattr(q, name)
        if isinstance(v, (int, float)):
            need(0 < v < 1, "vqgan.lr must be in (0, 1)")
    for name in ("lambda_comm", "lambda_adv"):
        v = getattr(q, name)
        if isinstance(v, (int, float)):
            need(v >= 0, f"vqgan.{name} must be >= 0")
    need(q.perceptual in ("random", "vgg16"), "vqgan.perceptual must be 'random' or 'vgg16'")
    if isinstance(q.batch_size, int):
        need(q.batch_size >= 1, "vqgan.batch_size must be >= 1")
    if isinstance(q.iterations, int):
        need(q.iterations >= 0, "vqgan.iterations must be >= 0")

    for name in ("channels", "attention_heads", "transformer_blocks", "transformer_heads", "ffn_mult", "batch_size", "iterations", "finetune_decoder_layers", "disc_start", "disc_channels", "checkpoint_every"):
        typed(f, name, int, "vqfont")
    for name in ("lambda_self", "lambda_main", "lambda_l1", "lambda_adv", "lambda_per", "lr"):
        if typed(f, name, (int, float), "vqfont"):
            need(getattr(f, name) >= 0, f"vqfont.{name} must be >= 0")
    for name in ("use_ssem", "use_codebook"):
        typed(f, name, bool, "vqfont")
    if f.encoder_channels is not None:
        ok = isinstance(f.encoder_channels, list) and all(isinstance(c, int) and not isinstance(c, bool) and c > 0 for c in f.encoder_channels)
        need(ok, "vqfont.encoder_channels must be a list of positive integers")
        if ok and isinstance(q.channels, list):
            need(len(f.encoder_channels) == len(q.channels), "vqfont.encoder_channels must have as many entries as vqgan.channels")
    if isinstance(f.channels, int) and isinstance(f.attention_heads, int):
        need(f.attention_heads >= 1 and f.channels % f.attention_heads == 0, "vqfont.attention_heads must divide vqfont.channels")
    if isinstance(f.channels, int) and isinstance(f.transformer_heads, int):
        need(f.transformer_heads >= 1 and f.channels % f.transformer_heads == 0, "vqfont.transformer_heads must divide vqfont.channels")
    if isinstance(f.transformer_blocks, int):
        need(f.transformer_blocks >= 1, "vqfont.transformer_blocks must be >= 1")
    if isinstance(f.finetune_decoder_layers, int):
        need(f.finetune_decoder_layers >= 0, "vqfont.finetune_decoder_layers must be >= 0")
    if isinstance(f.lr, (int, float)):
        need(0 < f.lr < 1, "vqfont.lr must be in (0, 1)")
    if isinstance(f.batch_size, int):
        need(f.batch_size >= 1, "vqfont.batch_size must be >= 1")
    return errs


def validate_config(raw: dict | None) -> RunConfig:
    """Build a :class:`RunConfig` from parsed YAML, applying preset defaults."""
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    errors: list[str] = []
    preset = raw.get("preset", "paper")
    cfg = RunConfig()
    if preset in PRESETS:
        _merge(cfg, copy.deepcopy(PRESETS[preset]), "", errors)
    _merge(cfg, raw, "", errors)
    errors += _check(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return validate_config({})
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return validate_config(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of :meth:`RunConfig.to_dict`; validates as well."""
    return validate_config(d)
